import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hybridreg.scenegen import DatasetConfig, generate_dataset, load_pair, read_manifest
from hybridreg.scenegen.dataset import MANIFEST

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

BENCH_PAIRS = 100


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _dataset(tmp_path_factory, name, **kw):
    root = tmp_path_factory.mktemp(name)
    cfg = DatasetConfig(**kw)
    generate_dataset(cfg, root)
    records = read_manifest(root / MANIFEST)
    return cfg, root, records, [load_pair(r, root) for r in records]


@pytest.fixture(scope="session")
def rigid_set(tmp_path_factory):
    """100 rigid-only pairs, seed 0, written to disk and loaded back."""
    return _dataset(tmp_path_factory, "rigid", seed=0, n_pairs=BENCH_PAIRS, splits=("rigid-only",))


@pytest.fixture(scope="session")
def hybrid_set(tmp_path_factory):
    """100 pairs with 30-50% non-rigid pixels, seed 0."""
    return _dataset(tmp_path_factory, "hybrid", seed=0, n_pairs=BENCH_PAIRS, splits=("nonrigid-30-50",))


@pytest.fixture(scope="session")
def small_set(tmp_path_factory):
    """A few pairs from every split, for quick end-to-end tests."""
    return _dataset(
        tmp_path_factory, "small", seed=3, n_pairs=6,
        splits=("rigid-only", "nonrigid-10-30", "nonrigid-30-50"),
    )


# --- acceptance verdicts ------------------------------------------------------------

N_CRITERIA = 8
_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; printed again at the end of the run."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        store[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(store.get(n, f"FAIL criterion {n}: not run or stopped before its verdict"))
