import os
import sys

import numpy as np
import pytest

# Add project root to sys.path (so tests can import core.*)
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.append(PROJECT_ROOT)

from core.config import CenterSettings, DataSettings, EvalSettings, ExperimentConfig, SSLSettings
from core.federation import FLConfig
from core.models import ModelSpec
from core.synthdata import CenterSpec, default_prototypes, generate_center_dataset
from core.tensor import ParamSet, Tensor


def max_rel_err(a: ParamSet, b: ParamSet, floor: float = 1e-3) -> float:
    """Largest |a - b| / max(|a|, |b|, floor) over every coordinate of two gradient sets."""
    worst = 0.0
    for name in a:
        x, y = a[name].array, b[name].array
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


@pytest.fixture
def tiny_spec():
    """Model small enough for finite differences over every weight."""
    return ModelSpec(input_dims=(3, 2, 2), encoder_widths=(3,), repr_dim=3, proj_hidden=3, proj_dim=2,
                     n_classes=2, n_centers=2)


@pytest.fixture
def small_spec():
    return ModelSpec(input_dims=(3, 4, 4), encoder_widths=(6,), repr_dim=4, proj_hidden=4, proj_dim=3,
                     n_classes=2, n_centers=2)


@pytest.fixture
def make_center():
    """Returns a function building a small labelled center dataset."""
    def _make(center_id=0, n_per_class=4, n_classes=2, image_size=4, offset=0.0, sigma=0.05, seed=0):
        prototypes = tuple(default_prototypes(n_classes, image_size, seed=7))
        spec = CenterSpec(center_id, n_per_class, prototypes, stain_offset=(offset, offset, offset),
                          sigma=sigma, image_size=image_size)
        return generate_center_dataset(spec, seed)
    return _make


@pytest.fixture
def random_paramset():
    """Returns a function building a ParamSet of uniform values in [-scale, scale]."""
    def _make(seed, shapes=(("a", (2, 3)), ("b", (3,))), scale=1.0):
        rng = np.random.default_rng(seed)
        return ParamSet((name, Tensor(rng.uniform(-scale, scale, size=shape))) for name, shape in shapes)
    return _make


@pytest.fixture
def tiny_config():
    """Experiment config whose whole pipeline runs in seconds."""
    centers = (
        CenterSettings(0, 3, ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)), (0.0, 0.0, 0.0), 0.05),
        CenterSettings(1, 3, ((0.8, 0.2, 0.0), (0.0, 0.9, 0.1), (0.1, 0.0, 0.9)), (0.1, -0.05, 0.05), 0.05),
    )
    return ExperimentConfig(
        master_seed=3,
        model=ModelSpec(input_dims=(3, 4, 4), encoder_widths=(6,), repr_dim=4, proj_hidden=4, proj_dim=3,
                        n_classes=2, n_centers=2),
        data=DataSettings(image_size=4, n_classes=2, centers=centers, pseudo_n=10),
        ssl=SSLSettings(epochs=2, lr=0.001, batch=4, grid=2, k_swaps=1, holdout=0.2),
        fl=FLConfig(rounds=2, local_epochs=1, lr=0.001, batch=4),
        eval=EvalSettings(k_folds=2),
        variants=("fedavg", "ssl_fl_bt"),
    )


@pytest.fixture
def write_config(tmp_path):
    """Returns a function saving a config under tmp_path and returning its path."""
    def _write(config, name="experiment.json"):
        path = tmp_path / name
        config.save_json(path)
        return path
    return _write
