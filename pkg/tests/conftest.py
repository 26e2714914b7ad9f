import contextlib

import numpy as np
import pytest

from mrunits import engine as E


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@contextlib.contextmanager
def bound_params(store, leaves):
    """Temporarily swap tensors in ``store`` for the given leaves."""
    saved = {k: store.params[k] for k in leaves}
    store.params.update(leaves)
    try:
        yield
    finally:
        store.params.update(saved)


def store_grad_error(store, loss_fn, names=None, extra=None, eps=1e-6, max_entries=None):
    """Run :func:`engine.grad_check` over store entries (and extra inputs).

    ``loss_fn(inputs)`` must return a scalar tensor and read its parameters
    from ``store``; ``inputs`` holds the entries of ``extra``.
    """
    names = list(store.params) if names is None else list(names)
    extra = dict(extra or {})
    point = {f"p:{n}": store[n].data.astype(np.float64) for n in names}
    point.update({f"x:{k}": np.asarray(v, dtype=np.float64) for k, v in extra.items()})

    def forward(t):
        params = {n: t[f"p:{n}"] for n in names}
        with bound_params(store, params):
            return loss_fn({k: t[f"x:{k}"] for k in extra})

    return E.grad_check(forward, point, eps=eps, max_entries=max_entries)


# acceptance reporting: one line per criterion, taken from the real test outcome
_CRITERIA = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        name = props.get("criterion", report.nodeid.split("::")[-1])
        status = "PASS" if report.passed else "FAIL"
        _CRITERIA.append(f"{status}  {name}" + (f"  ({props['detail']})" if "detail" in props else ""))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
