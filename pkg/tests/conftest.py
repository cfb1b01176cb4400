import numpy as np
import pytest

from nullwave import geometry as geo

# filled by the @criterion decorator in test_acceptance.py
ACCEPTANCE_REGISTRY = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One verdict line per acceptance criterion, capture-independent."""
    seen = {}
    for status, flag in (("passed", "PASS"), ("failed", "FAIL"),
                         ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call":
                continue
            name = rep.nodeid.split("::")[-1]
            if name in ACCEPTANCE_REGISTRY:
                seen[name] = flag
    if not seen:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, (num, label) in sorted(ACCEPTANCE_REGISTRY.items(),
                                     key=lambda kv: kv[1][0]):
        if name in seen:
            terminalreporter.write_line(
                f"criterion {num:2d} {seen[name]}  {label}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def _random_constant_lorentz(dim, seed):
    """Constant Lorentz-signature metric: congruence transform of flat."""
    rng = np.random.default_rng(seed)
    n = dim + 1
    lam = np.eye(n) + 0.25 * rng.standard_normal((n, n))
    while abs(np.linalg.det(lam)) < 0.2:
        lam = np.eye(n) + 0.25 * rng.standard_normal((n, n))
    eta = np.eye(n)
    eta[0, 0] = -1.0
    mat = lam.T @ eta @ lam
    return geo.coefficient_table(
        lambda x, _m=mat: np.broadcast_to(_m, np.shape(x)[:-1] + _m.shape).copy(),
        dim, time_dependent=False, label=f"random_lorentz_{seed}")


@pytest.fixture
def random_lorentz():
    return _random_constant_lorentz


def make_catalog(dim=3):
    """Flat metric plus two genuinely x-dependent curved metrics."""
    gamma = geo.ScalarField(
        lambda x: 0.25 * np.sin(x[..., 0] + 0.7 * x[..., 1]),
        grad=None, time_dependent=True)
    beta = geo.ScalarField(lambda x: 1.0 + 0.3 * np.sin(x[..., 1]))

    def kappa_fn(x):
        out = np.zeros(np.shape(x)[:-1] + (dim, dim))
        out[..., 0, 0] = 1.0 + 0.2 * np.cos(x[..., 2] if dim > 1 else x[..., 1])
        for a in range(1, dim):
            out[..., a, a] = 1.0 + 0.1 * np.sin(x[..., 1] + a)
        return out

    return [
        geo.minkowski(dim),
        geo.conformal_minkowski(gamma, dim),
        geo.product_metric(beta, geo.MatrixField(kappa_fn), dim),
    ]


@pytest.fixture
def metric_catalog():
    return make_catalog(3)
