import numpy as np
import pytest

from tsenet import engine as E


def numeric_grad(fn, arrays, eps=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = fn(*arrays)
            a[i] = old - eps
            lo = fn(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    leaves = [E.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    E.backward(out)
    return [leaf.grad for leaf in leaves]


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


@pytest.fixture
def gradcheck():
    def check(build, arrays, tol=1e-4):
        def scalar(*arrs):
            with E.no_grad():
                return build(*[E.Tensor(x) for x in arrs]).item()

        num = numeric_grad(scalar, [a.copy() for a in arrays])
        ana = analytic_grad(build, arrays)
        errs = [rel_error(n, a) for n, a in zip(num, ana)]
        assert max(errs) < tol, errs
        return errs

    return check


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
