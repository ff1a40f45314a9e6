import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sloppy_reduce.bench import load_fixture
from sloppy_reduce.sloppiness import analyze
from sloppy_reduce.params import ParameterSpace, ParameterSpec

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def linear_log():
    return load_fixture("linear-log")


@pytest.fixture(scope="session")
def exp_sum():
    return load_fixture("exp-sum")


@pytest.fixture(scope="session")
def toy():
    return load_fixture("toy-polyp")


def make_space(n=3, mechanisms=None, removable=None, upper=10.0):
    specs = [ParameterSpec(f"p{i + 1}", 0.0, upper) for i in range(n)]
    specs.append(ParameterSpec("sigma", 0.0, 1.0, "noise"))
    if mechanisms is None:
        mechanisms = {f"m{i + 1}": [f"p{i + 1}"] for i in range(n)}
    return ParameterSpace(tuple(specs), mechanisms, removable or {})


def random_psd(generator: np.random.Generator, n: int) -> np.ndarray:
    """Symmetric PSD matrix with a log-uniform spread of eigenvalues."""
    q, _ = np.linalg.qr(generator.standard_normal((n, n)))
    lam = 10.0 ** generator.uniform(-6, 3, size=n)
    S = (q * lam) @ q.T
    return 0.5 * (S + S.T)


def check_eigenparameter_contract(S, c):
    """Assert the eigenparameter contract on ``S`` and its invariance under ``c * S``."""
    spec = analyze(S)
    r = spec.rescaled
    assert np.all(np.diff(spec.eigenvalues) <= 0)
    assert r[0] == 1.0 and np.all(r > 0) and np.all(r <= 1.0)
    V = spec.eigenvectors
    assert np.all(np.abs(V).max(axis=0) == 1.0)
    assert np.all(V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])] == 1.0)
    U = spec.raw_eigenvectors
    off = U.T @ U - np.eye(U.shape[1])
    assert np.max(np.abs(off)) <= 1e-8
    recon = (U * spec.eigenvalues) @ U.T
    assert np.linalg.norm(recon - S) <= 1e-8 * np.linalg.norm(S)
    # c * S is S up to one rounding per entry, so eigenvector j may move by
    # about eps * lambda_1 / gap_j; beyond that the outputs must agree
    scaled = analyze(c * S)
    eps = np.finfo(float).eps
    assert np.allclose(scaled.rescaled, r, rtol=1e-8, atol=100 * eps)
    lam = spec.eigenvalues
    gaps = np.array([np.min(np.abs(np.delete(lam, j) - lam[j])) for j in range(len(lam))])
    tol = 1e-9 + 1e3 * eps * lam[0] / gaps
    for j in range(len(lam)):
        assert np.max(np.abs(scaled.eigenvectors[:, j] - V[:, j])) <= tol[j]
        if tol[j] < 1e-6:
            assert scaled.expression(j) == spec.expression(j)


# -- acceptance report -------------------------------------------------------

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        _ACCEPTANCE.append((props.get("criterion", report.nodeid.split("::")[-1]),
                            report.outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _ACCEPTANCE:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
