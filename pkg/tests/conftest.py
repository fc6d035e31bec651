import numpy as np
import pytest

from gpdm_soh.kernels import KernelSpec, KernelTerm, parse_kernel
from gpdm_soh.model import CholeskyFactor, GpdmParams

KINDS = {
    "rbf": (2, lambda r: [r.uniform(0.5, 2.0), r.uniform(0.3, 2.0)]),
    "linear": (1, lambda r: [r.uniform(0.2, 1.5)]),
    "matern32": (2, lambda r: [r.uniform(0.5, 2.0), r.uniform(0.3, 2.0)]),
    "matern52": (2, lambda r: [r.uniform(0.5, 2.0), r.uniform(0.3, 2.0)]),
    "rational_quadratic": (3, lambda r: [r.uniform(0.5, 2.0), r.uniform(0.3, 2.0), r.uniform(0.5, 3.0)]),
    "polynomial": (2, lambda r: [r.uniform(0.2, 1.0), r.uniform(0.5, 1.5)]),
}


def random_spec(rng, n_terms=None):
    names = sorted(KINDS)
    n_terms = n_terms or int(rng.integers(1, 3))
    terms = []
    for _ in range(n_terms):
        kind = names[int(rng.integers(len(names)))]
        terms.append(KernelTerm(kind, tuple(KINDS[kind][1](rng)), weight=float(rng.uniform(0.5, 1.5))))
    return KernelSpec(tuple(terms))


def random_factor(rng, dim):
    L = np.tril(rng.normal(scale=0.3, size=(dim, dim)))
    L[np.diag_indices(dim)] = rng.uniform(0.6, 1.4, size=dim)
    return CholeskyFactor(L)


def random_params(rng, T, D, Q, spec_y=None, spec_x=None):
    return GpdmParams(
        X=rng.normal(size=(T, Q)),
        kernel_y=spec_y or random_spec(rng),
        kernel_x=spec_x or random_spec(rng),
        L_y=random_factor(rng, D),
        L_x=random_factor(rng, Q),
        sigma2_y=float(rng.uniform(0.05, 0.5)),
        sigma2_x=float(rng.uniform(0.05, 0.5)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mixed_kernel():
    return parse_kernel("1*rbf(1,1) + 1*linear(1)")


ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""

    def record(n, passed, detail):
        status = "SKIP" if passed is None else ("PASS" if bool(passed) else "FAIL")
        ACCEPTANCE[n] = f"criterion {n}: {status} ({detail})"
        print(ACCEPTANCE[n])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
