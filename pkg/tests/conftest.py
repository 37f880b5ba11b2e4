import numpy as np
import pytest

from beaa.he import make_backend, preset


@pytest.fixture(scope="session")
def toy_params():
    return preset("toy")


@pytest.fixture(scope="session")
def desk_params():
    return preset("desk")


@pytest.fixture(scope="session", params=["sim", "ckks"])
def toy_env(request, toy_params):
    """(backend, keys) on the small ring for both implementations."""
    be = make_backend(request.param, toy_params)
    keys = be.keygen(rotation_steps=[1, 2, 3, 5, toy_params.slot_count - 1], seed=11)
    return be, keys


@pytest.fixture(scope="session")
def desk_env(desk_params):
    be = make_backend("ckks", desk_params)
    keys = be.keygen(rotation_steps=[1, 3], seed=5)
    return be, keys


@pytest.fixture(scope="session")
def desk_sim(desk_params):
    be = make_backend("sim", desk_params)
    return be, be.keygen(rotation_steps=[1, 3], seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance criterion reporting ---------------------------------------
_CRITERIA = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, store, number, title):
        self.store, self.number, self.title = store, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail
        if exc_type is not None:
            reason = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
            detail = f"{detail}; {reason}" if detail else reason
        self.store[self.number] = f"criterion {self.number} {status}: {self.title} ({detail})"
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records one pass/fail line for criterion n."""
    store = request.config.stash.setdefault(_CRITERIA, {})
    return lambda number, title: _Criterion(store, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(store[n])
