import numpy as np
import pytest

from viralnet import kernels
from viralnet.numcore import make_rng

BACKENDS = ["python"]
try:
    from viralnet import _ckernels  # noqa: F401
    BACKENDS.append("cython")
except ImportError:
    pass


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rng():
    return make_rng(12345)


def central_diff(f, x, idx, h=1e-5):
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """60 images at 32x32 with two categories, generated once per session."""
    from viralnet.data import SynthConfig, synth_generate
    out = tmp_path_factory.mktemp("synth32")
    cfg = SynthConfig(n=60, image_size=32, distractors=2, category_correlation=1.0)
    manifest, records = synth_generate(cfg, make_rng(3), out)
    return out, manifest, records


def small_train_config(**kw):
    from viralnet.train import TrainConfig
    base = dict(image_size=32, roi_size=16, feature_dim=8, category_dim=4, epochs=2, batch_size=16,
                max_pairs=200, seed=1)
    base.update(kw)
    return TrainConfig(**base)
