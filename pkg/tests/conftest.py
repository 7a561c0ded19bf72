import numpy as np

from vcrn import numerics as nx


def assert_store_gradients(loss_fn, store, tol=1e-6, h=1e-5):
    """Backprop ``loss_fn()`` and compare every trainable gradient to central differences."""
    store.zero_grad()
    nx.backward(loss_fn())
    analytic = {name: t.grad.copy() for name, t in store.trainable()}
    with nx.no_grad():
        numeric = nx.finite_difference_grad(lambda: float(loss_fn().values), store, h)
    worst = {name: nx.relative_error(analytic[name], numeric[name]) for name in analytic}
    bad = {k: v for k, v in worst.items() if not v < tol}
    assert not bad, f"gradient mismatch: {bad}"
    return worst


def weighted_sum(t, seed=0):
    w = np.random.default_rng(seed).normal(size=t.shape)
    return nx.sum_all(nx.hadamard(t, nx.Tensor(w)))


_ACCEPTANCE: list[str] = []


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
