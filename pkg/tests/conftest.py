import numpy as np
import pytest

from piddm.fields import RngSource


def fd_grad(f, x, delta=1e-6):
    """Central differences of a scalar function of a flat array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + delta
        fp = f(x)
        flat[i] = old - delta
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * delta)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def fd_check(f, grad, x, idx=None, delta=1e-6):
    """Relative error of ``grad`` against central differences on selected entries."""
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    num, ana = [], []
    g = np.asarray(grad).reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + delta
        fp = f(x)
        flat[i] = old - delta
        fm = f(x)
        flat[i] = old
        num.append((fp - fm) / (2 * delta))
        ana.append(g[i])
    return rel_err(ana, num)


@pytest.fixture
def rng():
    return RngSource(1234)


# acceptance results: criterion -> list of (part, ok, detail)
ACCEPTANCE: dict = {}


def record(criterion: int, part: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}: {'ok' if ok else 'FAILED'} ({d})" for p, ok, d in parts)
        tr.write_line(f"criterion {c}: {verdict}  {detail}")
