import numpy as np
import pytest

from fedsim.data import gen_blobs, split_public_private, stratified_split
from fedsim.seeding import derive_seed


@pytest.fixture(scope="session")
def blobs3():
    """Small well-separated 3-class dataset reused across tests."""
    return gen_blobs(classes=3, per_class=60, d=6, separation=4.0,
                     noise_sd=1.0, seed=5)


@pytest.fixture(scope="session")
def split3(blobs3):
    test, train = stratified_split(blobs3, 0.25, derive_seed(11, "test-split"))
    return test, train


@pytest.fixture()
def plan3(split3):
    _, train = split3
    return split_public_private(train, 4, "iid", seed=derive_seed(11, "partition"))


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / denom
