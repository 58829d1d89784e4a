import numpy as np
import pytest

from paraformer.data import RECORD
from paraformer.models import ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_spec(name="para-former-1-2", **kw):
    base = dict(dim=8, heads=2, ffn_dim=16, patch=4, image=(3, 8, 8), classes=4, precision="f64")
    base.update(kw)
    return ModelSpec.from_name(name, **base)


@pytest.fixture
def make_spec():
    return tiny_spec


def cifar_bytes(labels, seed=0):
    r = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.uint8)
    pix = r.integers(0, 256, (len(labels), RECORD - 1), dtype=np.uint8)
    return np.concatenate([labels[:, None], pix], axis=1).tobytes()


@pytest.fixture
def cifar_dir(tmp_path):
    """Two tiny train batches and a test batch in the binary CIFAR-10 layout."""
    (tmp_path / "data_batch_1.bin").write_bytes(cifar_bytes(np.arange(30) % 10, 1))
    (tmp_path / "data_batch_2.bin").write_bytes(cifar_bytes((np.arange(30) + 3) % 10, 2))
    (tmp_path / "test_batch.bin").write_bytes(cifar_bytes(np.arange(20) % 10, 3))
    return tmp_path
