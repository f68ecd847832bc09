"""Per-voxel FOD regressor: a neighbourhood MLP trained with Adam.

Input features are the lmax=2 SH coefficients of six b0-normalised
measurements, concatenated over a 3x3x3 neighbourhood (162 values). The
network is a plain ReLU MLP with inverted dropout on hidden layers and a
linear output of lmax=8 FOD coefficients. All parameters live in one flat
buffer so the optimizer update runs as a single fused loop.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .geometry import fit_sh
from .harmonize import b0_mean, six_direction_index

__all__ = [
    "EstimatorModel",
    "TrainConfig",
    "AdamState",
    "TrainingError",
    "TrainingData",
    "featurize",
    "forward",
    "loss_mse",
    "backward",
    "adam_step",
    "train",
    "fine_tune",
    "predict_volume",
    "training_data",
    "split_voxels",
]

N_FEATURES = 6 * 27


class TrainingError(RuntimeError):
    """Loss became non-finite."""

    def __init__(self, epoch: int, message: str = "training diverged"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class EstimatorModel:
    """MLP with weights stored as views into one flat parameter vector.

    Parameters
    ----------
    layer_dims : sequence of int
        Input size, hidden sizes, output size.
    dropout : float
        Drop probability on hidden activations during training.
    seed : int
        Seed of the Glorot-uniform initialisation.
    dtype : numpy dtype
        float64 for exact checks, float32 for fast training.
    """

    def __init__(self, layer_dims=(N_FEATURES, 256, 256, 45), dropout: float = 0.1,
                 seed: int = 0, dtype=np.float64, params: np.ndarray | None = None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError("layer_dims needs at least input and output sizes >= 1")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.layer_dims = dims
        self.dropout = float(dropout)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._shapes = [(a, b) for a, b in zip(dims[:-1], dims[1:])]
        size = sum(a * b + b for a, b in self._shapes)
        if params is None:
            self.params = np.zeros(size, dtype=self.dtype)
            self._init()
        else:
            params = np.asarray(params, dtype=self.dtype)
            if params.shape != (size,):
                raise ValueError(f"expected {size} parameters, got {params.shape}")
            self.params = params.copy()
        self._bind()

    def _bind(self):
        self.weights, self.biases = [], []
        off = 0
        for a, b in self._shapes:
            self.weights.append(self.params[off:off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.params[off:off + b])
            off += b

    def _init(self):
        rng = np.random.default_rng(self.seed)
        off = 0
        for a, b in self._shapes:
            lim = math.sqrt(6.0 / (a + b))
            self.params[off:off + a * b] = rng.uniform(-lim, lim, size=a * b)
            off += a * b + b  # biases start at zero

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "EstimatorModel":
        return EstimatorModel(self.layer_dims, self.dropout, self.seed, self.dtype, self.params)

    def set_params(self, params) -> None:
        self.params[:] = params

    def __eq__(self, other):
        return (isinstance(other, EstimatorModel) and self.layer_dims == other.layer_dims
                and self.dropout == other.dropout and np.array_equal(self.params, other.params))


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 5e-5
    weight_decay: float = 1e-3
    batch_size: int = 35
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        base = {
            "desk": dict(epochs=200, lr=5e-5, weight_decay=1e-3, batch_size=35),
            "paper": dict(epochs=1000, lr=5e-5, weight_decay=1e-3, batch_size=35),
            "finetune": dict(epochs=100, lr=5e-6, weight_decay=1e-3, batch_size=10),
        }
        if name not in base:
            raise KeyError(f"unknown training preset {name!r}")
        return cls(**{**base[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, model: EstimatorModel) -> "AdamState":
        return cls(np.zeros_like(model.params), np.zeros_like(model.params), 0)


# --- features -----------------------------------------------------------

def _neighbourhood(vol: np.ndarray) -> np.ndarray:
    """Concatenate each voxel's 3x3x3 neighbourhood, zero padded at the border."""
    nx, ny, nz, c = vol.shape
    pad = np.zeros((nx + 2, ny + 2, nz + 2, c), dtype=vol.dtype)
    pad[1:-1, 1:-1, 1:-1] = vol
    parts = [pad[dx:dx + nx, dy:dy + ny, dz:dz + nz]
             for dx in range(3) for dy in range(3) for dz in range(3)]
    return np.concatenate(parts, axis=-1)


def featurize(subject, six_dirs=None, shell: float = 1000.0) -> np.ndarray:
    """Neighbourhood SH features, shape (nx, ny, nz, 162).

    ``six_dirs`` are indices into ``subject.dirs`` (or a DirectionSet of
    six directions present in the protocol); by default the six optimal
    directions of ``shell`` are used.
    """
    if not np.any(subject.dirs.bvals == 0):
        raise ValueError("featurize needs a b=0 volume for normalisation")
    if six_dirs is None:
        idx = six_direction_index(subject.dirs, shell)
    elif hasattr(six_dirs, "vectors"):
        idx = _locate(subject.dirs, six_dirs)
    else:
        idx = np.asarray(six_dirs, dtype=int)
    if idx.size != 6:
        raise ValueError("featurize expects exactly six directions")
    s = subject.dwi[..., idx] / np.maximum(b0_mean(subject), 1e-12)[..., None]
    coeffs = fit_sh(s, subject.dirs.subset(idx), 2)
    return _neighbourhood(coeffs)


def _locate(dirs, six) -> np.ndarray:
    out = []
    for v, b in zip(six.vectors, six.bvals):
        hit = np.flatnonzero((np.abs(dirs.bvals - b) < 1e-6)
                             & (np.abs(dirs.vectors @ v) > 1 - 1e-9))
        if hit.size == 0:
            raise ValueError("a requested direction is not in the subject's protocol")
        out.append(hit[0])
    return np.array(out)


@dataclass
class TrainingData:
    """Feature/target rows plus the subject ids they came from."""

    X: np.ndarray
    Y: np.ndarray
    subject_ids: list = field(default_factory=list)

    def __len__(self):
        return self.X.shape[0]

    def subset(self, rows) -> "TrainingData":
        return TrainingData(self.X[rows], self.Y[rows], list(self.subject_ids))


def training_data(subjects, masks=None, targets=None, six_dirs=None, dtype=np.float64) -> TrainingData:
    """Stack masked voxels of several subjects.

    ``targets`` defaults to each subject's GT FOD; ``masks`` to the fibre
    region.
    """
    X, Y, ids = [], [], []
    for i, s in enumerate(subjects):
        m = s.wm_mask if masks is None else masks[i]
        t = s.gt_fod if targets is None else targets[i]
        X.append(featurize(s, six_dirs)[m])
        Y.append(t[m])
        ids.append(s.id)
    return TrainingData(np.concatenate(X).astype(dtype), np.concatenate(Y).astype(dtype), ids)


# --- network ------------------------------------------------------------

def forward(model: EstimatorModel, features, train_mode: bool = False, rng=None, cache=None):
    """Network output for a batch of feature rows.

    With ``train_mode`` hidden activations are dropped with probability
    ``model.dropout`` and the survivors scaled by ``1 / (1 - p)``. When a
    ``cache`` list is given, each hidden layer appends its output and the
    factor its upstream gradient gets multiplied by.
    """
    h = np.asarray(features, dtype=model.dtype)
    if h.shape[-1] != model.layer_dims[0]:
        raise ValueError(f"expected {model.layer_dims[0]} features, got {h.shape[-1]}")
    use_drop = train_mode and model.dropout > 0
    if use_drop and rng is None:
        rng = np.random.default_rng(model.seed)
    keep = 1.0 - model.dropout
    scale = model.dtype.type(1.0 / keep)
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W
        z += b
        if i == last:
            return z
        gate = (z > 0).astype(model.dtype)
        if use_drop:
            gate *= (rng.random(z.shape, dtype=model.dtype) < keep) * scale
        h = z * gate
        if cache is not None:
            cache.append((h, gate))
    return h


def loss_mse(pred, gt) -> float:
    """Mean over voxels and coefficients of the squared error."""
    d = np.asarray(pred, dtype=float) - np.asarray(gt, dtype=float)
    return float(np.mean(d * d))


def backward(model: EstimatorModel, features, gt, train_mode: bool = False, rng=None):
    """Loss and exact gradient of ``loss_mse`` w.r.t. the flat parameter vector."""
    X = np.asarray(features, dtype=model.dtype)
    Y = np.asarray(gt, dtype=model.dtype)
    cache: list = []
    pred = forward(model, X, train_mode, rng, cache)
    diff = pred - Y
    loss = float(np.mean(diff.astype(float) ** 2))
    grads = np.empty_like(model.params)
    gW, gb = _views(model, grads)
    delta = diff * model.dtype.type(2.0 / diff.size)
    for i in range(len(model.weights) - 1, -1, -1):
        a_in = X if i == 0 else cache[i - 1][0]
        np.matmul(a_in.T, delta, out=gW[i])
        np.sum(delta, axis=0, out=gb[i])
        if i > 0:
            delta = delta @ model.weights[i].T
            delta *= cache[i - 1][1]
    return loss, grads


def _views(model: EstimatorModel, flat: np.ndarray):
    gW, gb = [], []
    off = 0
    for a, b in model._shapes:
        gW.append(flat[off:off + a * b].reshape(a, b))
        off += a * b
        gb.append(flat[off:off + b])
        off += b
    return gW, gb


def adam_step(model: EstimatorModel, grads, state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam update followed by decoupled weight decay, in place."""
    state.step += 1
    kernels.adam_update(model.params, np.ascontiguousarray(grads, dtype=model.dtype),
                        state.m, state.v, float(config.lr), float(config.adam_beta1),
                        float(config.adam_beta2), float(config.adam_eps), int(state.step),
                        float(config.weight_decay))


def predict(model: EstimatorModel, X, batch: int = 4096) -> np.ndarray:
    X = np.asarray(X, dtype=model.dtype)
    out = np.empty((X.shape[0], model.layer_dims[-1]), dtype=model.dtype)
    for i in range(0, X.shape[0], batch):
        out[i:i + batch] = forward(model, X[i:i + batch])
    return out


def _mse(model, data: TrainingData) -> float:
    return loss_mse(predict(model, data.X), data.Y)


def train(model: EstimatorModel, train_set: TrainingData, val_set: TrainingData,
          config: TrainConfig, log=None):
    """Minibatch Adam over shuffled voxels with best-validation model selection.

    Returns ``(best_model, history)``; ``history`` holds per-epoch train and
    validation MSE, the selected epoch (1-based, 0 = initial weights) and
    the subject ids of both splits.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be nonempty")
    work = model.copy()
    state = AdamState.zeros_like(work)
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    X = np.asarray(train_set.X, dtype=work.dtype)
    Y = np.asarray(train_set.Y, dtype=work.dtype)
    best_val = _mse(work, val_set)
    history = {
        "initial_val": best_val,
        "train_loss": [],
        "val_loss": [],
        "best_epoch": 0,
        "best_val": best_val,
        "train_subjects": list(train_set.subject_ids),
        "val_subjects": list(val_set.subject_ids),
        "config": config.to_dict(),
    }
    best = work.params.copy()
    n = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            loss, grads = backward(work, X[rows], Y[rows], True, drop_rng)
            if not math.isfinite(loss):
                raise TrainingError(epoch)
            total += loss * rows.size
            adam_step(work, grads, state, config)
        val = _mse(work, val_set)
        if not math.isfinite(val):
            raise TrainingError(epoch, "validation loss became non-finite")
        history["train_loss"].append(total / n)
        history["val_loss"].append(val)
        if val < history["best_val"]:
            history["best_val"] = val
            history["best_epoch"] = epoch
            best = work.params.copy()
        if log is not None:
            log(epoch, total / n, val)
    out = model.copy()
    out.set_params(best)
    return out, history


def split_voxels(data: TrainingData, fraction: float = 0.1, seed: int = 0):
    """Random voxel holdout: returns ``(fit_part, holdout_part)``."""
    n = len(data)
    k = max(1, int(round(fraction * n)))
    if k >= n:
        raise ValueError("holdout would leave no training voxels")
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[k:])), data.subset(np.sort(perm[:k]))


def fine_tune(model: EstimatorModel, target_set: TrainingData, config: TrainConfig | None = None,
              holdout: float = 0.1):
    """Continue training on target voxels; 10% of them monitor selection.

    Returns ``(model, history)``.
    """
    config = config if config is not None else TrainConfig.preset("finetune")
    fit_part, val_part = split_voxels(target_set, holdout, config.seed)
    return train(model, fit_part, val_part, config)


def predict_volume(model: EstimatorModel, subject, mask=None, six_dirs=None) -> np.ndarray:
    """FOD coefficients for every masked voxel; zero elsewhere."""
    mask = subject.wm_mask if mask is None else np.asarray(mask, dtype=bool)
    feats = featurize(subject, six_dirs)
    out = np.zeros(subject.dims + (model.layer_dims[-1],))
    out[mask] = predict(model, feats[mask])
    return out
