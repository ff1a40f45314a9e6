"""Command-line interface: calibrate, analyze, reduce, compare, verify.

Every command writes into a fresh run directory ``<root>/<run-id>/`` that is
assembled in a temporary sibling and renamed into place only on success, so
a failing command leaves no partial artifacts. Each run directory carries a
``manifest.json`` with the exact command, input hashes and the SHA-256 of
every artifact; ``verify`` re-executes a manifest and compares the hashes.

Exit codes: 0 success, 2 configuration or input error, 3 optimizer,
sampler or numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import FIXTURE_NAMES, evidence_oracle, fixture_dir, generate_fixture
from .data import Dataset, file_sha256
from .errors import (ConfigError, DomainError, OptimizationError, PriorCovError, SamplerError,
                     ShapeError, SpectrumError, StateError, StencilError)
from .likelihood import MleResult, multi_start_mle
from .models import model_from_config
from .params import ParameterSpace
from .reduction import (DEFAULT_TAU, DEFAULT_THRESHOLD, ReductionCandidate, candidate_label,
                        compare_report, evaluate_candidate, predictive_summary,
                        propose_candidates, score_mechanisms)
from .sloppiness import (SloppySpectrum, analyze, matrix_hessian_mle, matrix_lis,
                         matrix_posterior_cov)
from .smc import ParticleSet, run_smc, sampler_options

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 2, 3

_CONFIG_ERRORS = (ConfigError, DomainError, ShapeError, KeyError, OSError, ValueError)
_RUN_ERRORS = (OptimizationError, SamplerError, StencilError, SpectrumError, PriorCovError, StateError)

MATRIX_KINDS = {"hessian": "mle", "postcov": "smc", "lis": "smc"}


class CommandError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# inputs


def resolve_config(model_arg: str) -> tuple[dict, Path]:
    """A built-in fixture name or a path to a model config JSON."""
    path = fixture_dir(model_arg) / "config.json" if model_arg in FIXTURE_NAMES else Path(model_arg)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model config {path}: {exc}") from None
    return doc, path


def with_noise_default(doc: dict, dataset: Dataset) -> dict:
    """Fill a missing noise upper bound with 10x the data standard deviation."""
    doc = json.loads(json.dumps(doc))
    for p in doc.get("parameters", []):
        if p.get("role") == "noise":
            p.setdefault("lower", 0.0)
            if p.get("upper") is None:
                p["upper"] = 10.0 * float(np.std(dataset.observed))
    return doc


def load_inputs(model_arg: str, data_arg: str | None):
    doc, cfg_path = resolve_config(model_arg)
    if data_arg is None:
        if model_arg not in FIXTURE_NAMES:
            raise ConfigError("--data is required for a custom model config")
        data_path = fixture_dir(model_arg) / "data.csv"
    else:
        data_path = Path(data_arg)
    dataset = Dataset.read_csv(data_path)
    doc = with_noise_default(doc, dataset)
    model = model_from_config(doc)
    return model, doc, dataset, cfg_path, data_path


def _sha_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def write_json(path: Path, doc) -> None:
    write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# run directories


class RunWriter:
    """Collects artifacts in a temporary directory and publishes them atomically."""

    def __init__(self, root, command: str, argv: list, identity: dict, run_id: str | None = None):
        self.root = Path(root)
        self.command = command
        self.argv = argv
        self.identity = identity
        digest = _sha_text(_canonical({"command": command, **identity}))[:10]
        self.run_id = run_id or f"{time.strftime('%Y%m%dT%H%M%SZ', time.gmtime())}-{command}-{digest}"
        self.root.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.run_id}.", dir=self.root))
        self.artifacts: list[str] = []

    def path(self, rel: str) -> Path:
        self.artifacts.append(rel)
        p = self.tmp / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def publish(self, extra: dict | None = None) -> Path:
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "argv": self.argv,
            "tool_version": __version__,
            "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            **self.identity,
            **(extra or {}),
            "artifacts": {
                rel: {"path": rel, "sha256": file_sha256(self.tmp / rel)}
                for rel in sorted(set(self.artifacts))
            },
        }
        write_json(self.tmp / "manifest.json", manifest)
        final = self.root / self.run_id
        n = 1
        while final.exists():
            n += 1
            final = self.root / f"{self.run_id}-{n}"
        if final.name != self.run_id:
            manifest["run_id"] = final.name
            write_json(self.tmp / "manifest.json", manifest)
        os.replace(self.tmp, final)
        return final

    def discard(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


@contextlib.contextmanager
def run_dir(*args, **kwargs):
    writer = RunWriter(*args, **kwargs)
    try:
        yield writer
    except BaseException:
        writer.discard()
        raise


def read_manifest(run: str | Path) -> tuple[Path, dict]:
    run = Path(run)
    mpath = run / "manifest.json" if run.is_dir() else run
    try:
        return mpath.parent, json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read run manifest {mpath}: {exc}") from None


def _abs(p) -> str:
    return str(Path(p).resolve())


# ---------------------------------------------------------------------------
# commands


def cmd_calibrate(args) -> Path:
    model, doc, dataset, cfg_path, data_path = load_inputs(args.model, args.data)
    identity = {
        "model": model.name,
        "model_config_sha256": _sha_text(_canonical(doc)),
        "model_config": _abs(cfg_path),
        "data": _abs(data_path),
        "data_sha256": file_sha256(data_path),
        "method": args.method,
        "seed": args.seed,
    }
    options = sampler_options(doc)
    for key, flag in (("n_cells", args.cells), ("min_moves", args.min_moves), ("max_moves", args.max_moves)):
        if flag is not None:
            options[key] = flag
    options = sampler_options({"sampler": options})
    if args.method == "smc":
        identity["M"] = args.particles
        identity["sampler"] = options
    else:
        identity["starts"] = args.starts
    argv = ["calibrate", "--model", args.model if args.model in FIXTURE_NAMES else _abs(args.model),
            "--data", _abs(data_path), "--method", args.method, "--seed", str(args.seed),
            "--particles", str(args.particles), "--starts", str(args.starts)]
    for key, flag in (("n_cells", "--cells"), ("min_moves", "--min-moves"), ("max_moves", "--max-moves")):
        if key in options:
            argv += [flag, str(options[key])]
    with run_dir(args.out, "calibrate", argv, identity, args.run_id) as run:
        write_json(run.path("model.json"), doc)
        if args.method == "smc":
            ps = stage("smc", run_smc, model, dataset, M=args.particles, seed=args.seed, **options)
            ps.save(run.path("particles.csv"), run.path("particles.json"), model.name, identity["data_sha256"])
            extra = {"log_evidence": ps.log_evidence}
        else:
            results = stage("mle", multi_start_mle, model, dataset, n_starts=args.starts, seed=args.seed)
            write_json(run.path("mle.json"), [r.to_json() for r in results])
            extra = {"max_loglik": results[0].loglik}
        out = run.publish(extra)
    print(out)
    return out


def stage(name, fn, *a, **kw):
    """Run a pipeline stage, tagging numerical failures with the stage name."""
    try:
        return fn(*a, **kw)
    except _RUN_ERRORS as exc:
        raise CommandError(f"{name} failed: {type(exc).__name__}: {exc}", EXIT_FAILURE) from exc


class CalibrationRun:
    """A published calibrate run read back from disk."""

    def __init__(self, path):
        self.path, self.manifest = read_manifest(path)
        if self.manifest.get("command") != "calibrate":
            raise ConfigError(f"{self.path} is not a calibrate run")
        self.doc = json.loads((self.path / "model.json").read_text(encoding="utf-8"))
        self.model = model_from_config(self.doc)
        data = Path(self.manifest["data"])
        if not data.exists() or file_sha256(data) != self.manifest["data_sha256"]:
            raise ConfigError(f"dataset {data} is missing or changed since calibration")
        self.dataset = Dataset.read_csv(data)
        self.method = self.manifest["method"]

    def particles(self) -> ParticleSet:
        if self.method != "smc":
            raise ConfigError(f"{self.path} is an {self.method} run; this step needs an SMC run")
        return ParticleSet.load(self.model.space, self.path / "particles.csv", self.path / "particles.json")

    def mle(self) -> list[MleResult]:
        if self.method != "mle":
            raise ConfigError(f"{self.path} is an {self.method} run; this step needs an MLE run")
        doc = json.loads((self.path / "mle.json").read_text(encoding="utf-8"))
        return [MleResult.from_json(d, self.model.space.names) for d in doc]


def cmd_sloppy(args) -> Path:
    cal = CalibrationRun(args.run)
    need = MATRIX_KINDS[args.matrix]
    if cal.method != need:
        raise ConfigError(
            f"--matrix {args.matrix} needs an {need.upper()} calibration, but {cal.path.name} used {cal.method}")
    if args.matrix == "hessian":
        best = next((r for r in cal.mle() if r.retained and r.optimizer_converged), None)
        if best is None:
            raise ConfigError("MLE run has no retained converged optimum")
        S = stage("hessian", matrix_hessian_mle, cal.model, cal.dataset, best, args.delta)
    elif args.matrix == "postcov":
        S = stage("postcov", matrix_posterior_cov, cal.particles())
    else:
        S = stage("lis", matrix_lis, cal.model, cal.dataset, cal.particles(), delta=args.delta,
                  seed=cal.manifest["seed"])
    spec = stage("analyze", analyze, S)
    out_root = Path(args.out) if args.out else cal.path.parent
    identity = {"parent_run": cal.manifest["run_id"], "parent_path": _abs(cal.path),
                "matrix": args.matrix, "delta": args.delta, "data_sha256": cal.manifest["data_sha256"]}
    argv = ["sloppy", "--run", _abs(cal.path), "--matrix", args.matrix, "--delta", repr(args.delta)]
    with run_dir(out_root, "sloppy", argv, identity, args.run_id) as run:
        write_text(run.path("spectrum.csv"), spec.spectrum_csv())
        write_text(run.path("eigenvectors.csv"), spec.eigenvectors_csv())
        write_text(run.path("eigenparams.txt"), spec.report())
        write_json(run.path("matrix.json"), {
            "kind": S.kind, "names": list(S.names), "entries": S.entries.tolist(),
            "warnings": list(S.warnings), "info": _jsonable(S.info),
        })
        out = run.publish()
    print(spec.report(), end="")
    print(out)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _find_sloppy(cal: CalibrationRun, matrix: str, explicit: str | None) -> tuple[Path, dict]:
    if explicit:
        return read_manifest(explicit)
    hits = []
    for m in sorted(cal.path.parent.glob("*/manifest.json")):
        doc = json.loads(m.read_text(encoding="utf-8"))
        if doc.get("command") == "sloppy" and doc.get("parent_run") == cal.manifest["run_id"] \
                and doc.get("matrix") == matrix:
            hits.append((m.parent, doc))
    if not hits:
        raise ConfigError(
            f"no '{matrix}' sloppiness analysis found for run {cal.manifest['run_id']}; run `sloppy` first")
    return hits[-1]


def cmd_reduce(args) -> Path:
    cal = CalibrationRun(args.run)
    if cal.method != "smc":
        raise ConfigError("reduce needs an SMC calibration run")
    spath, smanifest = _find_sloppy(cal, args.matrix, args.sloppy)
    spectrum = SloppySpectrum.read(spath, smanifest.get("matrix", ""))
    model = cal.model
    space = model.space
    unknown = (set(args.force_drop) | set(args.keep)) - set(space.mechanisms)
    if unknown:
        raise ConfigError(f"unknown mechanisms: {sorted(unknown)}")
    locked = sorted(m for m in args.force_drop if not space.removable[m])
    if locked and not args.i_know:
        raise ConfigError(
            f"mechanism(s) {locked} are marked non-removable; pass --i-know to remove them anyway")
    if locked:
        # operator override: rebuild the model with those mechanisms unlocked
        doc = json.loads(json.dumps(cal.doc))
        flags = doc.setdefault("mechanisms", {}).setdefault("_removable", {})
        for m in locked:
            flags[m] = True
        model = model_from_config(doc)
        space = model.space
    scores = score_mechanisms(spectrum, space, args.tau)
    cands = propose_candidates(scores, args.max_drop, args.threshold, keep=args.keep)
    for m in args.force_drop:
        if frozenset([m]) not in cands:
            cands.append(frozenset([m]))

    original_ps = cal.particles()
    seed = cal.manifest["seed"] if args.seed is None else args.seed
    smc_config = {"M": cal.manifest["M"], "seed": seed, **cal.manifest.get("sampler", {})}
    mle_config = {"n_starts": args.starts, "seed": seed} if args.starts > 0 else None

    original = ReductionCandidate(frozenset(), space.n_p, original_ps)
    original.log_evidence = original_ps.log_evidence
    original.bayes_factor_vs_original = 1.0
    original.rmse, original.intervals, original.coverage = predictive_summary(
        model, original_ps, cal.dataset, seed=seed)
    if mle_config:
        best = stage("mle", multi_start_mle, model, cal.dataset, mle_config["n_starts"], seed, 1)[0]
        original.max_loglik = best.loglik
        original.aic = 2.0 * (space.n_p + 1) - 2.0 * best.loglik

    evaluated = []
    for drop in cands:
        print(f"evaluating candidate {candidate_label(drop)} ...", file=sys.stderr)
        evaluated.append(evaluate_candidate(model, drop, cal.dataset, smc_config,
                                            original.log_evidence, mle_config))
    report = compare_report(original, evaluated)

    identity = {"parent_run": cal.manifest["run_id"], "parent_path": _abs(cal.path),
                "sloppy_run": smanifest["run_id"], "data_sha256": cal.manifest["data_sha256"],
                "seed": seed, "M": smc_config["M"], "threshold": args.threshold, "tau": args.tau,
                "max_drop": args.max_drop, "force_drop": sorted(args.force_drop),
                "keep": sorted(args.keep), "starts": args.starts}
    argv = ["reduce", "--run", _abs(cal.path), "--matrix", args.matrix, "--sloppy", _abs(spath),
            "--threshold", repr(args.threshold), "--tau", repr(args.tau), "--max-drop", str(args.max_drop),
            "--seed", str(seed), "--starts", str(args.starts)]
    for m in args.force_drop:
        argv += ["--force-drop", m]
    for m in args.keep:
        argv += ["--keep", m]
    if args.i_know:
        argv.append("--i-know")
    out_root = Path(args.out) if args.out else cal.path.parent
    with run_dir(out_root, "reduce", argv, identity, args.run_id) as run:
        write_text(run.path("scores.csv"), _scores_csv(scores))
        write_text(run.path("report.csv"), report.to_csv())
        write_text(run.path("report.txt"), report.to_text())
        for c in evaluated:
            sub = c.label
            write_json(run.path(f"{sub}/summary.json"), _jsonable(c.summary()))
            if c.particles is not None:
                c.particles.save(run.path(f"{sub}/particles.csv"), run.path(f"{sub}/particles.json"),
                                 model.name, cal.manifest["data_sha256"])
                write_text(run.path(f"{sub}/intervals.csv"), _intervals_csv(c.intervals))
        out = run.publish({"candidates": [c.label for c in evaluated]})
    print(report.to_text(), end="")
    print(out)
    return out


def _scores_csv(scores) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mechanism", "score", "removable", "stiff_set"])
    for s in scores:
        w.writerow([s.mechanism, repr(float(s.score)), str(s.removable).lower(),
                    ";".join(str(j + 1) for j in s.stiff_set)])
    return buf.getvalue()


def _intervals_csv(iv) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "lower95", "upper95"])
    for i, (lo, hi) in enumerate(iv):
        w.writerow([i, repr(float(lo)), repr(float(hi))])
    return buf.getvalue()


def cmd_compare(args) -> Path:
    runs = [read_manifest(r) for r in args.runs]
    for path, doc in runs:
        if doc.get("command") != "reduce":
            raise ConfigError(f"{path} is not a reduce run")
    hashes = {doc["data_sha256"] for _, doc in runs}
    if len(hashes) > 1:
        raise ConfigError("refusing to compare runs calibrated on different datasets "
                          f"(data hashes {sorted(h[:12] for h in hashes)})")
    rows = []
    header = None
    for path, doc in runs:
        with open(path / "report.csv", encoding="utf-8", newline="") as fh:
            table = list(csv.reader(fh))
        header = ["run", *table[0]]
        rows += [[doc["run_id"], *r] for r in table[1:] if r]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    identity = {"runs": [doc["run_id"] for _, doc in runs], "data_sha256": hashes.pop()}
    argv = ["compare", "--runs", *(_abs(p) for p, _ in runs)]
    out_root = Path(args.out) if args.out else runs[0][0].parent
    with run_dir(out_root, "compare", argv, identity, args.run_id) as run:
        write_text(run.path("comparison.csv"), buf.getvalue())
        out = run.publish()
    print(buf.getvalue(), end="")
    print(out)
    return out


def cmd_fixture(args) -> int:
    fx = generate_fixture(args.name, args.seed)
    out = Path(args.out) if args.out else Path("fixtures") / args.name
    existing = out / "oracle.json"
    if existing.exists() and args.keep_evidence:
        old = json.loads(existing.read_text(encoding="utf-8"))
        if "evidence" in old:
            fx.oracle["evidence"] = old["evidence"]
    paths = fx.write(out)
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_evidence_oracle(args) -> int:
    drops = [frozenset(d.split("+")) for d in args.drop]
    result = evidence_oracle(args.name, drops, runs=args.runs, M=args.particles, seed0=args.seed)
    path = Path(args.oracle) if args.oracle else fixture_dir(args.name) / "oracle.json"
    doc = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    doc.setdefault("evidence", {}).update(result)
    write_json(path, doc)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    """Re-execute a manifest into a scratch root and compare artifact hashes."""
    path, manifest = read_manifest(args.manifest)
    argv = list(manifest["argv"])
    scratch = Path(tempfile.mkdtemp(prefix="sloppy-verify-"))
    try:
        redo = main([*argv, "--out", str(scratch), "--run-id", "verify"], _raise=True)
        if redo != EXIT_OK:
            return redo
        mismatched = []
        for rel, meta in manifest["artifacts"].items():
            got = scratch / "verify" / rel
            sha = file_sha256(got) if got.exists() else "<missing>"
            status = "ok" if sha == meta["sha256"] else "MISMATCH"
            print(f"{status:8s} {rel}")
            if status != "ok":
                mismatched.append(rel)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    if mismatched:
        print(f"{len(mismatched)} artifact(s) differ", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sloppy-reduce", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", default=None, help="root directory for the new run")
        sp.add_argument("--run-id", default=None, help=argparse.SUPPRESS)

    c = sub.add_parser("calibrate", help="MLE or SMC calibration of a model")
    c.add_argument("--model", required=True, help="built-in fixture name or model config JSON")
    c.add_argument("--data", default=None, help="dataset CSV (defaults to the fixture data)")
    c.add_argument("--method", choices=("mle", "smc"), default="smc")
    c.add_argument("--particles", type=int, default=5000)
    c.add_argument("--starts", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--cells", type=int, default=None,
                   help="k-means cells for local proposals (1 = one global covariance)")
    c.add_argument("--min-moves", type=int, default=None, help="minimum MH rounds per stage")
    c.add_argument("--max-moves", type=int, default=None, help="maximum MH rounds per stage")
    common(c)
    c.set_defaults(func=cmd_calibrate, default_out="runs")

    s = sub.add_parser("sloppy", help="sensitivity matrix and eigenparameters of a calibration run")
    s.add_argument("--run", required=True)
    s.add_argument("--matrix", choices=tuple(MATRIX_KINDS), default="postcov")
    s.add_argument("--delta", type=float, default=1e-2)
    common(s)
    s.set_defaults(func=cmd_sloppy)

    r = sub.add_parser("reduce", help="score mechanisms, recalibrate reduced models, report")
    r.add_argument("--run", required=True, help="SMC calibrate run")
    r.add_argument("--matrix", choices=tuple(MATRIX_KINDS), default="postcov")
    r.add_argument("--sloppy", default=None, help="explicit sloppy run (default: latest for --matrix)")
    r.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    r.add_argument("--tau", type=float, default=DEFAULT_TAU)
    r.add_argument("--max-drop", type=int, default=2)
    r.add_argument("--force-drop", action="append", default=[], metavar="MECHANISM")
    r.add_argument("--keep", action="append", default=[], metavar="MECHANISM")
    r.add_argument("--i-know", action="store_true",
                   help="allow --force-drop of mechanisms marked non-removable")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--starts", type=int, default=20, help="MLE starts per model for AIC (0 skips)")
    common(r)
    r.set_defaults(func=cmd_reduce)

    m = sub.add_parser("compare", help="merge reduce reports of runs on the same data")
    m.add_argument("--runs", nargs="+", required=True)
    common(m)
    m.set_defaults(func=cmd_compare)

    f = sub.add_parser("fixture", help="regenerate a benchmark fixture")
    f.add_argument("name", choices=FIXTURE_NAMES)
    f.add_argument("--seed", type=int, default=1)
    f.add_argument("--out", default=None)
    f.add_argument("--keep-evidence", action="store_true",
                   help="carry over long-run evidence values from an existing oracle.json")
    f.set_defaults(func=cmd_fixture)

    e = sub.add_parser("evidence-oracle", help="long-run evidence estimates for a fixture")
    e.add_argument("name", choices=FIXTURE_NAMES)
    e.add_argument("--drop", action="append", default=[], help="candidate as m1+m2 (repeatable)")
    e.add_argument("--runs", type=int, default=10)
    e.add_argument("--particles", type=int, default=20000)
    e.add_argument("--seed", type=int, default=1000)
    e.add_argument("--oracle", default=None, help="oracle.json to update")
    e.set_defaults(func=cmd_evidence_oracle)

    v = sub.add_parser("verify", help="re-run a manifest and compare artifact hashes")
    v.add_argument("--manifest", required=True)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None, _raise=False) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", "") is None and args.command == "calibrate":
        args.out = "runs"
    try:
        result = args.func(args)
    except CommandError as exc:
        print(f"sloppy-reduce {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except _RUN_ERRORS as exc:
        print(f"sloppy-reduce {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except _CONFIG_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"sloppy-reduce {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
