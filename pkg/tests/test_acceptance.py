"""Acceptance criteria, one test per criterion.

Each test records a one-line summary; the terminal summary prints a
PASS/FAIL line per criterion (see ``conftest.py``).
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from sloppy_reduce.cli import main
from sloppy_reduce.data import Dataset
from sloppy_reduce.likelihood import multi_start_mle
from sloppy_reduce.reduction import (
    DEFAULT_THRESHOLD,
    evaluate_candidate,
    predictive_summary,
    propose_candidates,
    score_mechanisms,
)
from sloppy_reduce.sloppiness import (
    analyze,
    hessian_fd,
    leading_cosines,
    loglik_hessian,
    matrix_hessian_mle,
    matrix_lis,
    matrix_posterior_cov,
)
from sloppy_reduce.smc import marginal_tv, run_smc, sampler_options

from conftest import check_eigenparameter_contract, random_psd

TOY_SEEDS = (0, 1, 2, 3, 4)
TOY_M = 5000


@pytest.fixture
def criterion(record_property):
    def record(name, detail):
        record_property("criterion", name)
        record_property("detail", detail)
    return record


def leading_vector(S):
    w, V = np.linalg.eigh(S)
    return V[:, np.argmax(w)]


# ---------------------------------------------------------------------------
# 1. conjugate oracle


def test_conjugate_linear_log_oracle(criterion, linear_log):
    criterion("conjugate-oracle", "")
    t0 = time.perf_counter()
    m, ds = linear_log.model, linear_log.dataset
    ps = run_smc(m, ds, M=5000, seed=0)
    phi = ps.log_theta()
    mean = np.array(linear_log.oracle["posterior_mean_log"])
    cov = np.array(linear_log.oracle["posterior_cov_log"])
    se = phi.std(axis=0, ddof=1) / math.sqrt(ps.M)
    z = np.abs(phi.mean(axis=0) - mean) / se
    emp = np.cov(phi, rowvar=False)
    frob = np.linalg.norm(emp - cov) / np.linalg.norm(cov)

    v_ref = leading_vector(np.array(linear_log.oracle["fisher_log"]))
    best = multi_start_mle(m, ds, n_starts=5, seed=0)[0]
    mats = {
        "S_H": matrix_hessian_mle(m, ds, best).entries,
        "S_P": matrix_posterior_cov(ps).entries,
        "S_L": matrix_lis(m, ds, ps).entries,
    }
    cos = {k: abs(float(leading_vector(S) @ v_ref)) for k, S in mats.items()}
    elapsed = time.perf_counter() - t0
    criterion("conjugate-oracle",
              f"max|z|={z.max():.2f} (<3) frob={frob:.3f} (<0.10) "
              + " ".join(f"cos({k})={v:.5f}" for k, v in cos.items())
              + f" (>=0.99) t={elapsed:.0f}s (<120)")
    assert np.all(z < 3.0)
    assert frob < 0.10
    assert all(v >= 0.99 for v in cos.values())
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. finite-difference exactness


def test_finite_difference_exactness(criterion, linear_log, exp_sum):
    criterion("fd-exactness", "")
    g = np.random.default_rng(0)
    Q = random_psd(g, 4) + np.eye(4)
    x0 = g.standard_normal(4)
    H = hessian_fd(lambda x: -0.5 * (x - 1.0) @ Q @ (x - 1.0), x0)
    quad_err = float(np.max(np.abs(H + Q)))

    A = linear_log.dataset.conditions
    exact = -A.T @ A / 0.1**2
    th = linear_log.theta_full()
    th[-1] = 0.1
    HA = loglik_hessian(linear_log.model, linear_log.dataset, th)
    rel_a = float(np.max(np.abs(HA - exact)) / np.max(np.abs(exact)))

    best = multi_start_mle(exp_sum.model, exp_sum.dataset, n_starts=5, seed=0)[0]
    w1 = np.linalg.eigvalsh(matrix_hessian_mle(exp_sum.model, exp_sum.dataset, best, 1e-2).entries)
    w2 = np.linalg.eigvalsh(matrix_hessian_mle(exp_sum.model, exp_sum.dataset, best, 2e-2).entries)
    rel_delta = float(np.max(np.abs(w2 - w1) / np.abs(w1)))
    criterion("fd-exactness", f"quadratic abs={quad_err:.1e} (<1e-6) model-A rel={rel_a:.1e} (<1e-6) "
              f"delta 1e-2 vs 2e-2 on exp-sum rel={rel_delta:.2e} (<0.01)")
    assert quad_err < 1e-6
    assert rel_a < 1e-6
    assert rel_delta < 0.01


# ---------------------------------------------------------------------------
# 3. eigenparameter contract


def test_eigenparameter_contract(criterion):
    criterion("eigenparameter-contract", "")
    g = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for _ in range(100):
        n = int(g.integers(2, 10))
        check_eigenparameter_contract(random_psd(g, n), float(10.0 ** g.uniform(-3, 3)))
    elapsed = time.perf_counter() - t0
    criterion("eigenparameter-contract", f"100 random PSD matrices t={elapsed:.2f}s (<10)")
    assert elapsed < 10


# ---------------------------------------------------------------------------
# 4. sloppiness hallmark


def test_exp_sum_sloppy_spectrum(criterion, exp_sum):
    criterion("sloppiness-hallmark", "")
    t0 = time.perf_counter()
    clean = Dataset(exp_sum.dataset.condition_names, exp_sum.dataset.conditions,
                    exp_sum.oracle["clean_predictions"])
    S_H = -loglik_hessian(exp_sum.model, clean, exp_sum.theta_full())
    w = np.sort(np.linalg.eigvalsh(S_H))[::-1]
    gn = np.array(exp_sum.oracle["gauss_newton_eigenvalues"])
    rel = np.abs(w - gn) / gn
    elapsed = time.perf_counter() - t0
    criterion("sloppiness-hallmark", f"lambda1/lambda4={w[0] / w[3]:.3g} (>1e3) "
              f"max rel vs GN={rel.max():.2e} (<0.05) t={elapsed:.1f}s (<30)")
    assert w[0] / w[3] > 1e3
    assert np.all(rel < 0.05)
    assert elapsed < 30


# ---------------------------------------------------------------------------
# toy polyp runs shared by criteria 5-7


@pytest.fixture(scope="session")
def toy_runs(toy):
    options = sampler_options(toy.config)
    t0 = time.perf_counter()
    runs = [run_smc(toy.model, toy.dataset, M=TOY_M, seed=s, **options) for s in TOY_SEEDS]
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_toy_reproducibility(criterion, toy_runs):
    criterion("toy-reproducibility", "")
    runs, elapsed = toy_runs
    specs = [analyze(matrix_posterior_cov(ps)) for ps in runs]
    cos = min(float(leading_cosines(a, b, 3).min()) for a, b in itertools.combinations(specs, 2))
    tv = max(float(marginal_tv(a, b).max()) for a, b in itertools.combinations(runs, 2))
    logz = [ps.log_evidence for ps in runs]
    criterion("toy-reproducibility", f"min top-3 |cos|={cos:.4f} (>=0.95) max TV={tv:.3f} (<0.1) "
              f"logZ sd={np.std(logz, ddof=1):.2f} t={elapsed / 60:.1f}min (<20)")
    assert cos >= 0.95
    assert tv < 0.1
    assert elapsed < 20 * 60


@pytest.mark.slow
def test_toy_reduction(criterion, toy, toy_runs):
    criterion("toy-reduction", "")
    t0 = time.perf_counter()
    model, ds = toy.model, toy.dataset
    original = toy_runs[0][0]
    seed = TOY_SEEDS[0]
    smc_config = {"M": TOY_M, "seed": seed, **sampler_options(toy.config)}
    scores = score_mechanisms(analyze(matrix_posterior_cov(original)), model.space)
    by_name = {s.mechanism: s.score for s in scores}
    cands = propose_candidates(scores)
    expected = [frozenset({"pump2"}), frozenset({"kco2-channel"}), frozenset({"pump2", "kco2-channel"})]

    rmse0 = predictive_summary(model, original, ds, seed=seed)[0]
    evaluated = {c: evaluate_candidate(model, c, ds, smc_config, original.log_evidence) for c in cands}
    pump1 = evaluate_candidate(model, {"pump1"}, ds, smc_config, original.log_evidence)
    elapsed = time.perf_counter() - t0 + toy_runs[1] / len(TOY_SEEDS)

    evidence = toy.oracle.get("evidence", {})
    oracle_bf = {label: math.exp(evidence["original"]["mean"] - evidence[label]["mean"])
                 for label in evidence if label != "original"} if "original" in evidence else {}
    parts = [f"scores pump2={by_name['pump2']:.3f} kco2={by_name['kco2-channel']:.3f} (<{DEFAULT_THRESHOLD})"]
    for c, r in evaluated.items():
        ref = oracle_bf.get(r.label, math.nan)
        parts.append(f"{r.label}: BF={r.bayes_factor_vs_original:.2f} oracle={ref:.2f} "
                     f"rmse ratio={r.rmse / rmse0:.3f}")
    parts.append(f"pump1: BF={pump1.bayes_factor_vs_original:.3g} oracle={oracle_bf.get('pump1', math.nan):.3g}")
    parts.append(f"t={elapsed / 60:.1f}min (<30)")
    criterion("toy-reduction", "; ".join(parts))

    assert by_name["pump2"] < DEFAULT_THRESHOLD and by_name["kco2-channel"] < DEFAULT_THRESHOLD
    assert by_name["pump1"] >= DEFAULT_THRESHOLD
    assert sorted(cands, key=sorted) == sorted(expected, key=sorted)
    for r in evaluated.values():
        assert not r.failed
        assert 1 / 3 <= r.bayes_factor_vs_original <= 3
        assert abs(r.rmse / rmse0 - 1.0) <= 0.10
    assert pump1.bayes_factor_vs_original > 100
    # the long-run oracle puts the true factors well inside the same bounds
    assert set(oracle_bf) >= {"pump2", "kco2-channel", "kco2-channel+pump2", "pump1"}
    for label in ("pump2", "kco2-channel", "kco2-channel+pump2"):
        assert 1 / 3 <= oracle_bf[label] <= 3
    assert oracle_bf["pump1"] > 100
    assert elapsed < 30 * 60


@pytest.mark.slow
def test_toy_lis_agreement(criterion, toy, toy_runs):
    criterion("lis-agreement", "")
    ps = toy_runs[0][0]
    lis = analyze(matrix_lis(toy.model, toy.dataset, ps))
    postcov = analyze(matrix_posterior_cov(ps))
    cos = leading_cosines(lis, postcov, 2)
    criterion("lis-agreement", f"|cos| 1,2 = {cos[0]:.4f}, {cos[1]:.4f} (>=0.9)")
    assert np.all(cos >= 0.9)


# ---------------------------------------------------------------------------
# 8. determinism


def test_cli_determinism(criterion, tmp_path, monkeypatch, capsys):
    criterion("cli-determinism", "")
    root = tmp_path / "runs"

    def cli(*args):
        code = main([str(a) for a in args])
        capsys.readouterr()
        assert code == 0, args
        return root / args[args.index("--run-id") + 1] if "--run-id" in args else None

    monkeypatch.setenv("SLOPPY_REDUCE_THREADS", "2")
    smc = cli("calibrate", "--model", "linear-log", "--particles", 1200, "--seed", 5,
              "--out", root, "--run-id", "smc")
    mle = cli("calibrate", "--model", "exp-sum", "--method", "mle", "--starts", 4,
              "--out", root, "--run-id", "mle")
    runs = [smc, mle,
            cli("sloppy", "--run", smc, "--matrix", "postcov", "--run-id", "postcov"),
            cli("sloppy", "--run", smc, "--matrix", "lis", "--run-id", "lis"),
            cli("sloppy", "--run", mle, "--matrix", "hessian", "--run-id", "hessian"),
            cli("reduce", "--run", smc, "--force-drop", "theta3", "--starts", 2, "--run-id", "reduce")]
    runs.append(cli("compare", "--runs", root / "reduce", "--out", root, "--run-id", "compare"))

    outcomes = {}
    for threads in ("1", "3"):
        monkeypatch.setenv("SLOPPY_REDUCE_THREADS", threads)
        for run in runs:
            code = main(["verify", "--manifest", str(run / "manifest.json")])
            out = capsys.readouterr().out
            outcomes[(run.name, threads)] = code
            assert "MISMATCH" not in out
    n_artifacts = sum(len(json.loads((r / "manifest.json").read_text())["artifacts"]) for r in runs)
    bad = [k for k, v in outcomes.items() if v != 0]
    criterion("cli-determinism", f"{len(runs)} commands, {n_artifacts} artifacts, "
              f"verified under 1 and 3 threads (built under 2): {len(bad)} failures")
    assert not bad
