"""Small tanh multilayer perceptron with exact analytic gradients.

Layer l maps activations ``a_l`` to ``a_{l+1} = tanh(a_l @ W_l + b_l)``; the
last layer is affine and produces logits. The last hidden activation is the
penultimate feature vector g(x) consumed by the Mahalanobis detector.
"""
import json
import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from taxonomy import TaxonomyTree, one_hot_matrix, soft_label_matrix

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-300
SIMPLEX_TOL = 1e-9

# Incremented whenever a zero probability is clamped inside a log; grid workers share it
numeric_warnings: Counter = Counter()
_warnings_lock = threading.Lock()


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class ArchitectureSpec:
    input_dim: int
    output_dim: int
    hidden: Tuple[int, ...] = (64, 32)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 2 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid architecture {self}")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported")

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.input_dim,) + self.hidden + (self.output_dim,)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
        }


@dataclass
class ClassifierModel:
    spec: ArchitectureSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    trained: bool = False

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("parameter count does not match the architecture")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
                raise ValueError(f"layer {l} has shapes {W.shape}, {b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite parameters")

    @property
    def num_classes(self) -> int:
        return self.spec.output_dim

    def parameters(self) -> List[np.ndarray]:
        """Parameters in the order W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(
            spec=self.spec,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            trained=self.trained,
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    beta: Optional[float] = None  # None trains on one-hot labels
    weight_decay: float = 1e-4
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    @property
    def hierarchical(self) -> bool:
        return self.beta is not None


def init_model(spec: ArchitectureSpec, seed: int = 0) -> ClassifierModel:
    """Fan-in scaled uniform initialization."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return ClassifierModel(spec=spec, weights=weights, biases=biases)


def _check_inputs(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.spec.input_dim:
        raise ValueError(f"expected inputs with {model.spec.input_dim} features, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs contain non-finite values")
    return X


def _activations(model: ClassifierModel, X: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    acts = [X]
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        acts.append(np.tanh(acts[-1] @ W + b))
    logits = acts[-1] @ model.weights[-1] + model.biases[-1]
    return acts, logits


def _backward(model: ClassifierModel, acts: List[np.ndarray], upstream: np.ndarray,
              want_params: bool = True):
    """Backpropagate d(objective)/d(logits); returns (param grads, input grad)."""
    grads: List[np.ndarray] = []
    g = upstream
    for l in range(len(model.weights) - 1, -1, -1):
        if want_params:
            grads.append(g.sum(axis=0))
            grads.append(acts[l].T @ g)
        g = g @ model.weights[l].T
        if l > 0:
            g = g * (1.0 - acts[l] ** 2)
    grads.reverse()
    return grads, g


def forward_batch(model: ClassifierModel, X: np.ndarray):
    """Batch forward pass: (penultimate N x H, logits N x K, probs N x K)."""
    acts, logits = _activations(model, _check_inputs(model, X))
    return acts[-1], logits, softmax(logits, axis=1)


def forward(model: ClassifierModel, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single feature vector")
    penultimate, logits, probs = forward_batch(model, x[None, :])
    return penultimate[0], logits[0], probs[0]


def softmax_T(logits: np.ndarray, T: float) -> np.ndarray:
    """Temperature-scaled softmax, evaluated with max subtraction."""
    if not T > 0:
        raise ValueError(f"temperature must be > 0, got {T}")
    return softmax(np.asarray(logits, dtype=np.float64) / T, axis=-1)


def large_temperature_probs(logits: np.ndarray, T: float) -> np.ndarray:
    """First-order large-T approximation 1 / (K + (1/T) sum_j (g_j - g_k))."""
    g = np.asarray(logits, dtype=np.float64)
    K = g.shape[-1]
    spread = g.sum(axis=-1, keepdims=True) - K * g
    return 1.0 / (K + spread / T)


def _check_simplex(v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a nonempty vector")
    if np.any(v < -SIMPLEX_TOL) or abs(v.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name} is not a probability vector")
    return v


def safe_log(probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """log(probs), clamping zeros that carry positive weight at PROB_FLOOR."""
    bad = (probs <= 0) & (weights > 0)
    if np.any(bad):
        with _warnings_lock:
            numeric_warnings["log_clamp"] += int(bad.sum())
        logger.debug(f"Clamped {int(bad.sum())} zero probabilities at {PROB_FLOOR}")
    return np.log(np.maximum(probs, PROB_FLOOR))


def soft_ce_loss(probs: np.ndarray, target: np.ndarray) -> float:
    """Cross-entropy of ``probs`` against a (soft) target distribution."""
    probs = _check_simplex(probs, "probs")
    target = _check_simplex(target, "target")
    if probs.shape != target.shape:
        raise ValueError("probs and target differ in length")
    return float(-np.sum(target * safe_log(probs, target)))


def batch_loss(model: ClassifierModel, X: np.ndarray, targets: np.ndarray) -> float:
    """Mean soft cross-entropy over a batch, computed from log-softmax."""
    _, logits = _activations(model, _check_inputs(model, X))
    return float(-np.mean(np.sum(targets * log_softmax(logits, axis=1), axis=1)))


def param_gradient(model: ClassifierModel, X: np.ndarray, targets: np.ndarray) -> List[np.ndarray]:
    """Exact gradient of the mean soft cross-entropy, ordered like parameters()."""
    X = _check_inputs(model, X)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (X.shape[0], model.num_classes):
        raise ValueError(f"targets must have shape {(X.shape[0], model.num_classes)}")
    acts, logits = _activations(model, X)
    upstream = (softmax(logits, axis=1) - targets) / X.shape[0]
    grads, _ = _backward(model, acts, upstream)
    return grads


def log_prob_jacobian(model: ClassifierModel, x: np.ndarray, T: float = 1.0) -> np.ndarray:
    """K x D matrix whose row k is the input gradient of log f_k(x; T)."""
    x = _check_inputs(model, np.asarray(x, dtype=np.float64)[None, :])
    acts, logits = _activations(model, x)
    p = softmax_T(logits[0], T)
    K = model.num_classes
    # d log f_k / d z_j = (delta_kj - p_j) / T, one row per k
    upstream = (np.eye(K) - p[None, :]) / T
    expanded = [np.repeat(a, K, axis=0) for a in acts]
    _, dx = _backward(model, expanded, upstream, want_params=False)
    return dx


def input_gradient(model: ClassifierModel, x: np.ndarray, T: float, k: int) -> np.ndarray:
    if not 0 <= k < model.num_classes:
        raise ValueError(f"class {k} out of range")
    return log_prob_jacobian(model, x, T)[k]


def predict(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    _, logits = _activations(model, _check_inputs(model, X))
    return np.argmax(logits, axis=1)


def accuracy(model: ClassifierModel, X: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, X) == np.asarray(labels)))


def _targets(labels: np.ndarray, tree: TaxonomyTree, beta: Optional[float]) -> np.ndarray:
    soft = one_hot_matrix(tree.num_classes) if beta is None else soft_label_matrix(tree, beta)
    return soft.values[labels]


def train(model: ClassifierModel, train_ds, val_ds, tree: TaxonomyTree,
          config: TrainConfig) -> Tuple[ClassifierModel, List[Dict[str, float]]]:
    """Mini-batch SGD with momentum on the soft-label cross-entropy.

    Returns a copy holding the parameters of the best validation-loss epoch,
    plus the per-epoch history.
    """
    for name, ds in (("train", train_ds), ("val", val_ds)):
        if ds.tree.leaf_names != tree.leaf_names:
            raise ValueError(f"{name} dataset is not indexed against the given taxonomy")
    if model.num_classes != tree.num_classes:
        raise ValueError(f"model has {model.num_classes} outputs, taxonomy has {tree.num_classes} leaves")

    work = model.copy()
    params = work.parameters()
    velocity = [np.zeros_like(p) for p in params]
    X_train, X_val = train_ds.features, val_ds.features
    T_train = _targets(train_ds.labels, tree, config.beta)
    T_val = _targets(val_ds.labels, tree, config.beta)
    rng = np.random.default_rng(config.seed)
    N = X_train.shape[0]

    best_loss, best_epoch, best = math.inf, 0, work.copy()
    history: List[Dict[str, float]] = []
    mode = f"hier(beta={config.beta})" if config.hierarchical else "flat"
    logger.info(f"Training {mode}: N={N}, lr={config.learning_rate}, epochs={config.epochs}, seed={config.seed}")

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(N)
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            grads = param_gradient(work, X_train[idx], T_train[idx])
            for p, v, g in zip(params, velocity, grads):
                v *= config.momentum
                v += g + config.weight_decay * p
                p -= config.learning_rate * v

        train_loss = batch_loss(work, X_train, T_train) if _finite(params) else math.nan
        val_loss = batch_loss(work, X_val, T_val) if _finite(params) else math.nan
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            logger.error(f"❌ Non-finite loss at epoch {epoch} ({mode}, lr={config.learning_rate})")
            raise TrainingDivergedError(epoch, train_loss)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        logger.debug(f"epoch {epoch}: train={train_loss:.6f} val={val_loss:.6f}")

        if val_loss < best_loss:
            best_loss, best_epoch, best = val_loss, epoch, work.copy()

    best.trained = True
    logger.info(f"✅ Best validation loss {best_loss:.5f} at epoch {best_epoch}")
    return best, history


def _finite(params: Sequence[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(p)) for p in params)


def save_checkpoint(model: ClassifierModel, path: str, metadata: Optional[dict] = None,
                    extras: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Versioned .npz checkpoint: architecture, parameters, metadata, extra arrays."""
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "architecture": np.array(json.dumps(model.spec.to_dict())),
        "metadata": np.array(json.dumps(metadata or {})),
        "trained": np.array(model.trained),
    }
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{l}"] = W
        arrays[f"b{l}"] = b
    for key, value in (extras or {}).items():
        arrays[f"extra_{key}"] = np.asarray(value)
    # a file handle stops numpy from appending ".npz" to the name
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> Tuple[ClassifierModel, dict, Dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = json.loads(str(data["architecture"]))
        spec = ArchitectureSpec(
            input_dim=arch["input_dim"],
            output_dim=arch["output_dim"],
            hidden=tuple(arch["hidden"]),
            activation=arch["activation"],
        )
        n_layers = len(spec.layer_sizes) - 1
        model = ClassifierModel(
            spec=spec,
            weights=[data[f"W{l}"].copy() for l in range(n_layers)],
            biases=[data[f"b{l}"].copy() for l in range(n_layers)],
            trained=bool(data["trained"]),
        )
        metadata = json.loads(str(data["metadata"]))
        extras = {k[len("extra_"):]: data[k].copy() for k in data.files if k.startswith("extra_")}
    return model, metadata, extras
