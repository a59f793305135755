from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from recguard.data import InteractionSet, normalize

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
ML100K = ROOT / "data" / "ml-100k" / "u.data"
FILMTRUST = ROOT / "data" / "filmtrust" / "ratings.txt"


def low_rank_ratings(n_users, n_items, density, seed, rank=3):
    """Synthetic explicit ratings with latent structure, every user rating at least 3 items."""
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(n_users, rank))
    V = rng.normal(size=(n_items, rank))
    raw = U @ V.T
    raw = 1 + 4 * (raw - raw.min()) / (raw.max() - raw.min())
    mask = rng.random((n_users, n_items)) < density
    for u in range(n_users):
        mask[u, rng.choice(n_items, size=3, replace=False)] = True
    users, items = np.nonzero(mask)
    return InteractionSet(users, items, normalize(raw[users, items]), n_users, n_items)


@pytest.fixture(scope="session")
def small_data():
    return low_rank_ratings(60, 40, 0.3, seed=7)


@pytest.fixture
def ml100k_path():
    if not ML100K.exists():
        pytest.fail(f"ML-100K ratings missing at {ML100K}; run `python -m recguard.fetch data/ml-100k`")
    return ML100K


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the acceptance summary, then assert."""

    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
