import json
import os

import numpy as np
import pytest

from classifier import ArchitectureSpec, ClassifierModel, init_model
from config import ExperimentConfig, GeneratorSection, TrainingSection
from dataset import LabeledDataset, steel_taxonomy
from taxonomy import parse_taxonomy

CONFIGS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
FIGURE_TREE_PATH = os.path.join(CONFIGS_DIR, "figure_tree.json")
with open(FIGURE_TREE_PATH, "r", encoding="utf-8") as _fh:
    FIGURE_TREE = json.load(_fh)


@pytest.fixture
def figure_tree():
    return parse_taxonomy(json.dumps(FIGURE_TREE))


@pytest.fixture
def steel_tree():
    return steel_taxonomy()


def random_model(seed: int, input_dim: int = 4, hidden=(8,), output_dim: int = 4, scale: float = 0.3):
    """Small model with N(0, scale^2) parameters."""
    rng = np.random.default_rng(seed)
    spec = ArchitectureSpec(input_dim=input_dim, output_dim=output_dim, hidden=hidden)
    sizes = spec.layer_sizes
    weights = [scale * rng.standard_normal((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [scale * rng.standard_normal(b) for b in sizes[1:]]
    return ClassifierModel(spec=spec, weights=weights, biases=biases)


@pytest.fixture
def small_model():
    return init_model(ArchitectureSpec(input_dim=4, output_dim=4, hidden=(8,)), seed=3)


def toy_dataset(tree, per_class: int = 40, seed: int = 0, spread: float = 2.0, noise: float = 0.5):
    """Well separated clusters on the first two axes of a 4-dim space."""
    rng = np.random.default_rng(seed)
    K = tree.num_classes
    centers = np.zeros((K, 4))
    for k in range(K):
        centers[k, 0] = spread if k % 2 == 0 else -spread
        centers[k, 1] = spread if k // 2 % 2 == 0 else -spread
        centers[k, 2] = spread * (k // 4)
    X = np.vstack([centers[k] + noise * rng.standard_normal((per_class, 4)) for k in range(K)])
    y = np.repeat(np.arange(K), per_class)
    return LabeledDataset(features=X, labels=y, tree=tree, provenance="toy")


def tiny_config(tmp_path, **overrides) -> ExperimentConfig:
    """Fast grid on the four-leaf tree in configs/figure_tree.json."""
    values = dict(
        taxonomy_path=FIGURE_TREE_PATH,
        generator=GeneratorSection(feature_dim=4, default_count=30, seed=1),
        scenarios=["L22"],
        betas=[10.0],
        seeds=[0, 1],
        learning_rates=[0.05],
        training=TrainingSection(hidden=[8], epochs=5, batch_size=16),
        temperature=10.0,
        epsilon=0.001,
        output_dir=str(tmp_path / "results"),
    )
    values.update(overrides)
    return ExperimentConfig(**values).validate()


def write_config(cfg: ExperimentConfig, path) -> str:
    path.write_text(json.dumps(cfg.to_dict()), encoding="utf-8")
    return str(path)
