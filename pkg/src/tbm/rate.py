"""Propulsion-speed regression: 1-D CNN blocks with channel attention and residuals."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn
from .errors import ConfigInvalid, DimMismatch, EmptyDataset, ShapeMismatch
from .metrics import mse, r_squared
from .nn import Parameter
from .preprocess import split_sizes
from .tensor import Tensor, as_tensor, make_op, no_grad

log = logging.getLogger(__name__)

PATIENCE = 10
MODULE_SETS = {
    "attention+residual": (True, True),
    "attention": (True, False),
    "residual": (False, True),
    "cnn": (False, False),
}


@dataclass
class RateModelConfig:
    window_len: int = 16
    channels: list[int] = field(default_factory=lambda: [32, 32, 32])
    kernel: int = 3
    attention_reduction: int = 8
    dropout_p: float = 0.1
    use_attention: bool = True
    use_residual: bool = True
    use_geology: bool = True
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.kernel < 1 or any(c < 1 for c in self.channels) or not self.channels:
            raise ConfigInvalid("kernel and channel widths must be >= 1")
        if self.window_len <= self.kernel:
            raise ConfigInvalid(f"window_len {self.window_len} must exceed kernel {self.kernel}")
        if self.window_len - len(self.channels) * (self.kernel - 1) < 1:
            raise ConfigInvalid("conv stack consumes the whole window")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigInvalid(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.attention_reduction < 1:
            raise ConfigInvalid("attention_reduction must be >= 1")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid("lr, epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RateModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class RateModel:
    def __init__(self, config: RateModelConfig, input_dim: int, params: dict[str, Parameter]):
        self.config = config
        self.input_dim = input_dim
        self.params = params
        self._check_shapes()

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def _check_shapes(self) -> None:
        expected = _param_shapes(self.config, self.input_dim)
        got = {name: p.shape for name, p in self.params.items()}
        if expected != got:
            raise ConfigInvalid(f"parameter shapes {got} do not match config {expected}")

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """x: [batch, input_dim, window_len] -> [batch, 1]."""
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != self.input_dim or x.shape[2] != cfg.window_len:
            raise DimMismatch(f"expected [batch, {self.input_dim}, {cfg.window_len}], got {x.shape}")
        p = {name: prm.tensor for name, prm in self.params.items()}
        h = x
        for i in range(len(cfg.channels)):
            y = nn.relu(nn.conv1d(h, p[f"conv{i}.w"], p[f"conv{i}.b"]))
            if cfg.use_attention:
                y = nn.channel_attention(y, p[f"att{i}.w1"], p[f"att{i}.w2"])
            if cfg.use_residual:
                skip = h[:, :, cfg.kernel - 1 :]  # align on the most recent steps
                if f"res{i}.w" in p:
                    skip = nn.conv1d(skip, p[f"res{i}.w"], p[f"res{i}.b"])
                y = y + skip
            h = y
        pooled = nn.dropout(h.mean(axis=2), cfg.dropout_p, training, rng)
        return nn.linear(pooled, p["head.w"], p["head.b"])


def _param_shapes(cfg: RateModelConfig, input_dim: int) -> dict[str, tuple]:
    shapes = {}
    c_in = input_dim
    for i, c_out in enumerate(cfg.channels):
        shapes[f"conv{i}.w"] = (c_out, c_in, cfg.kernel)
        shapes[f"conv{i}.b"] = (c_out,)
        if cfg.use_attention:
            shapes[f"att{i}.w1"] = (c_out, cfg.attention_reduction)
            shapes[f"att{i}.w2"] = (cfg.attention_reduction, c_out)
        if cfg.use_residual and c_in != c_out:
            shapes[f"res{i}.w"] = (c_out, c_in, 1)
            shapes[f"res{i}.b"] = (c_out,)
        c_in = c_out
    shapes["head.w"] = (c_in, 1)
    shapes["head.b"] = (1,)
    return shapes


def _fans(name: str, shape: tuple) -> tuple[int, int]:
    if len(shape) == 3:  # conv [c_out, c_in, k]
        return shape[1] * shape[2], shape[0] * shape[2]
    return shape[0], shape[1]


def build_rate_model(config: RateModelConfig, input_dim: int, seed: int | None = None) -> RateModel:
    config.validate()
    if input_dim < 1:
        raise ConfigInvalid(f"input_dim must be >= 1, got {input_dim}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in _param_shapes(config, input_dim).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = nn.glorot_uniform(rng, shape, *_fans(name, shape))
        params[name] = Parameter(data, name)
    return RateModel(config, input_dim, params)


def smooth_l1_loss(pred, target) -> Tensor:
    """Mean over the batch of 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (x = pred - target)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    x = pred.data - target.data
    small = np.abs(x) < 1.0
    n = x.size
    value = np.where(small, 0.5 * x * x, np.abs(x) - 0.5).mean()
    slope = np.where(small, x, np.sign(x)) / n

    def back(g):
        return g * slope, -g * slope

    return make_op(np.asarray(value), (pred, target), back)


# -- data -----------------------------------------------------------------------

@dataclass
class WindowSet:
    x: np.ndarray  # [n, features, window_len]
    y: np.ndarray  # [n]

    def __len__(self) -> int:
        return len(self.y)


def make_windows(features: np.ndarray, targets: np.ndarray, window_len: int) -> np.ndarray:
    """[n - window_len + 1, features, window_len] trailing windows; window i ends at row i + window_len - 1."""
    if len(features) < window_len:
        raise EmptyDataset(f"{len(features)} rows cannot fill a window of {window_len}")
    return sliding_window_view(features, window_len, axis=0)


def window_splits(features: np.ndarray, targets: np.ndarray, window_len: int) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Chronological 7:2:1 split over samples, windowed.

    A window belongs to the split of its last (current) row; earlier rows only
    serve as input context, which is always available at prediction time.
    """
    n_train, n_valid, _ = split_sizes(len(features))
    wins = make_windows(features, targets, window_len)
    ends = np.arange(window_len - 1, len(features))
    bounds = [(0, n_train), (n_train, n_train + n_valid), (n_train + n_valid, len(features))]
    out = []
    for lo, hi in bounds:
        sel = (ends >= lo) & (ends < hi)
        out.append(WindowSet(np.ascontiguousarray(wins[sel]), targets[ends[sel]].copy()))
    return tuple(out)


# -- training --------------------------------------------------------------------

@dataclass
class TrainingReport:
    train_loss: list[float]
    valid_loss: list[float]
    best_epoch: int
    best_valid: float


def predict_rate(model: RateModel, windows, batch_size: int = 1024) -> np.ndarray:
    """Dropout-free forward pass, returned as a 1-D array."""
    x = windows.data if isinstance(windows, Tensor) else np.asarray(windows, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != model.input_dim:
        raise DimMismatch(f"expected [batch, {model.input_dim}, {model.config.window_len}], got {x.shape}")
    out = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            out.append(model.forward(x[lo : lo + batch_size], training=False).data[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


def _eval_loss(model: RateModel, data: WindowSet) -> float:
    pred = predict_rate(model, data.x)
    with no_grad():
        return float(smooth_l1_loss(Tensor._wrap(pred), Tensor._wrap(data.y)).data)


def train_rate_model(model: RateModel, train: WindowSet, valid: WindowSet) -> TrainingReport:
    """Adam on Smooth-L1 with early stopping on validation loss.

    Training stops after ``PATIENCE`` epochs without a validation improvement
    and the best-epoch parameters are restored.
    """
    if len(train) == 0 or len(valid) == 0:
        raise EmptyDataset("train and valid sets must be non-empty")
    for data in (train, valid):
        if data.x.shape[1] != model.input_dim:
            raise DimMismatch(f"dataset has {data.x.shape[1]} features, model expects {model.input_dim}")
    cfg = model.config
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.parameters()
    best = (np.inf, -1, [p.data.copy() for p in params])
    report = TrainingReport([], [], -1, np.inf)
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            pred = model.forward(train.x[idx], training=True, rng=rng)
            loss = smooth_l1_loss(pred, Tensor._wrap(train.y[idx].reshape(-1, 1)))
            loss.backward()
            nn.adam_step(params, lr=cfg.lr)
            total += float(loss.data) * len(idx)
        report.train_loss.append(total / len(train))
        v = _eval_loss(model, valid)
        report.valid_loss.append(v)
        log.debug("epoch %d train %.6f valid %.6f", epoch + 1, report.train_loss[-1], v)
        if v < best[0]:
            best = (v, epoch, [p.data.copy() for p in params])
            stale = 0
        else:
            stale += 1
            if stale >= PATIENCE:
                break
    for p, data in zip(params, best[2]):
        p.tensor.data[...] = data
    report.best_epoch = best[1] + 1
    report.best_valid = best[0]
    return report


def evaluate(model: RateModel, data: WindowSet) -> dict:
    pred = predict_rate(model, data.x)
    return {"r2": r_squared(data.y, pred), "mse": mse(data.y, pred)}


# -- ablation ---------------------------------------------------------------------

def select_columns(features: np.ndarray, columns: list[int] | None) -> np.ndarray:
    return features if columns is None else features[:, columns]


def run_ablation(
    base_config: RateModelConfig,
    features: np.ndarray,
    targets: np.ndarray,
    excavation_columns: list[int],
    cells=None,
) -> list[dict]:
    """Train every (geology, module set) cell with identical seeds; score on the test split.

    ``features`` holds every fused column; geology-off cells see only
    ``excavation_columns``.  ``cells`` optionally restricts the grid to
    ``(geology, modules)`` pairs.
    """
    grid = [(geo, mods) for geo in (True, False) for mods in MODULE_SETS]
    if cells is not None:
        grid = [c for c in grid if c in set(cells)]
    rows = []
    for geology, modules in grid:
        att, res = MODULE_SETS[modules]
        cfg = replace(base_config, use_attention=att, use_residual=res, use_geology=geology)
        cols = None if geology else list(excavation_columns)
        feats = select_columns(features, cols)
        train, valid, test = window_splits(feats, targets, cfg.window_len)
        model = build_rate_model(cfg, feats.shape[1])
        report = train_rate_model(model, train, valid)
        scores = evaluate(model, test)
        log.info("ablation geology=%s modules=%s r2=%.4f mse=%.5f", geology, modules, scores["r2"], scores["mse"])
        rows.append({"geology": geology, "modules": modules, "r2": scores["r2"], "mse": scores["mse"], "best_epoch": report.best_epoch})
    return rows
