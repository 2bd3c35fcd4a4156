import numpy as np
import pytest

from cocoa.data import ColumnMatrix, Dataset, FEATURES_AS_COLUMNS


def dataset_from_dense(X, y):
    """Samples as rows, features as columns."""
    return Dataset(ColumnMatrix.from_dense(np.asarray(X, dtype=float)), np.asarray(y, dtype=float),
                   FEATURES_AS_COLUMNS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
