"""Two-head LSTM variational autoencoder for window-level anomaly detection.

The excavation and geology windows each pass through their own LSTM; the
final hidden states are concatenated and mapped to the mean and log-variance
of a Gaussian posterior.  The decoder reconstructs the excavation window
only.  Training runs a plain autoencoder first to initialise the encoder,
then the VAE on KL + BCE.  A window is anomalous when its reconstruction
score exceeds a quantile of the scores on held-out normal windows.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigInvalid, EmptyDataset, EmptyScores, RangeViolation, ShapeMismatch
from .nn import LstmWeights, Parameter
from .tensor import Tensor, as_tensor, clip, concat, exp, make_op, no_grad, reshape, sigmoid

log = logging.getLogger(__name__)

LOG_VAR_BOUND = 10.0
BCE_EPS = 1e-7


@dataclass
class VaeModelConfig:
    seq_len: int = 32
    lstm_hidden: int = 64
    latent_dim: int = 16
    decoder_hidden: int = 64
    pretrain_epochs: int = 10
    train_epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 32
    seed: int = 0
    threshold_quantile: float = 0.99
    train_stride: int = 8
    recon_reduction: str = "sum"
    score: str = "excess"

    def validate(self) -> None:
        if min(self.seq_len, self.lstm_hidden, self.latent_dim, self.decoder_hidden) < 1:
            raise ConfigInvalid("sizes must be >= 1")
        if self.latent_dim > self.lstm_hidden:
            raise ConfigInvalid(f"latent_dim {self.latent_dim} exceeds lstm_hidden {self.lstm_hidden}")
        if not 0.0 < self.threshold_quantile < 1.0:
            raise ConfigInvalid(f"threshold_quantile must lie in (0, 1), got {self.threshold_quantile}")
        if self.lr <= 0 or self.batch_size < 1 or self.train_stride < 1:
            raise ConfigInvalid("lr, batch_size and train_stride must be positive")
        if self.recon_reduction not in ("sum", "mean"):
            raise ConfigInvalid(f"recon_reduction must be 'sum' or 'mean', got {self.recon_reduction!r}")
        if self.score not in ("excess", "bce"):
            raise ConfigInvalid(f"score must be 'excess' or 'bce', got {self.score!r}")
        if self.pretrain_epochs < 0 or self.train_epochs < 0:
            raise ConfigInvalid("epoch counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VaeModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class LatentDistribution:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ShapeMismatch(f"mu {self.mu.shape} vs log_var {self.log_var.shape}")


@dataclass(frozen=True)
class AnomalyVerdict:
    window_index: int
    score: float
    threshold: float
    is_anomaly: bool
    start_timestamp: int = 0


ENCODER_PREFIXES = ("lstm_exc.", "lstm_geo.", "mu.")


def _param_shapes(cfg: VaeModelConfig, d_exc: int, d_geo: int) -> dict[str, tuple]:
    h, z = cfg.lstm_hidden, cfg.latent_dim
    shapes = {}
    for head, d in (("lstm_exc", d_exc), ("lstm_geo", d_geo)):
        shapes[f"{head}.w_input"] = (d, 4 * h)
        shapes[f"{head}.w_hidden"] = (h, 4 * h)
        shapes[f"{head}.bias"] = (4 * h,)
    shapes["mu.w"] = (2 * h, z)
    shapes["mu.b"] = (z,)
    shapes["log_var.w"] = (2 * h, z)
    shapes["log_var.b"] = (z,)
    shapes["dec1.w"] = (z, cfg.decoder_hidden)
    shapes["dec1.b"] = (cfg.decoder_hidden,)
    shapes["dec2.w"] = (cfg.decoder_hidden, cfg.seq_len * d_exc)
    shapes["dec2.b"] = (cfg.seq_len * d_exc,)
    return shapes


class VaeModel:
    def __init__(self, config: VaeModelConfig, d_exc: int, d_geo: int, params: dict[str, Parameter]):
        self.config = config
        self.d_exc = d_exc
        self.d_geo = d_geo
        self.params = params
        expected = _param_shapes(config, d_exc, d_geo)
        got = {name: p.shape for name, p in params.items()}
        if expected != got:
            raise ConfigInvalid(f"parameter shapes {got} do not match config {expected}")

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def t(self, name: str) -> Tensor:
        return self.params[name].tensor

    def lstm(self, head: str) -> LstmWeights:
        return LstmWeights(self.t(f"{head}.w_input"), self.t(f"{head}.w_hidden"), self.t(f"{head}.bias"))


def build_vae(config: VaeModelConfig, d_exc: int, d_geo: int, seed: int | None = None) -> VaeModel:
    config.validate()
    if d_exc < 1 or d_geo < 1:
        raise ConfigInvalid(f"feature dims must be >= 1, got {d_exc} and {d_geo}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in _param_shapes(config, d_exc, d_geo).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        elif name.endswith("w_hidden") or name.endswith("w_input"):
            data = nn.glorot_uniform(rng, shape, shape[0], shape[1] // 4)
        else:
            data = nn.glorot_uniform(rng, shape, shape[0], shape[1])
        params[name] = Parameter(data, name)
    return VaeModel(config, d_exc, d_geo, params)


# -- forward pieces --------------------------------------------------------------

def _batched(x, d: int, seq_len: int, what: str) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (seq_len, d):
        raise ShapeMismatch(f"{what} window must be [.., {seq_len}, {d}], got {x.shape}")
    return x, single


def _hidden(model: VaeModel, window_exc, window_geo) -> tuple[Tensor, bool]:
    cfg = model.config
    xe, single = _batched(window_exc, model.d_exc, cfg.seq_len, "excavation")
    xg, single_g = _batched(window_geo, model.d_geo, cfg.seq_len, "geology")
    if single != single_g or xe.shape[0] != xg.shape[0]:
        raise ShapeMismatch(f"excavation {xe.shape} and geology {xg.shape} windows are not aligned")
    he = nn.lstm_last_hidden(xe, model.lstm("lstm_exc"))
    hg = nn.lstm_last_hidden(xg, model.lstm("lstm_geo"))
    return concat([he, hg], axis=1), single


def encode(window_exc, window_geo, model: VaeModel) -> LatentDistribution:
    """Posterior parameters for one window ([seq_len, d]) or a batch ([batch, seq_len, d])."""
    h, single = _hidden(model, window_exc, window_geo)
    mu = nn.linear(h, model.t("mu.w"), model.t("mu.b"))
    log_var = clip(nn.linear(h, model.t("log_var.w"), model.t("log_var.b")), -LOG_VAR_BOUND, LOG_VAR_BOUND)
    if single:
        mu, log_var = mu[0], log_var[0]
    return LatentDistribution(mu, log_var)


def reparameterize(dist: LatentDistribution, rng: np.random.Generator) -> Tensor:
    """z = mu + exp(log_var / 2) * eps with eps drawn from ``rng``."""
    eps = Tensor._wrap(rng.standard_normal(dist.mu.shape))
    return dist.mu + exp(dist.log_var * 0.5) * eps


def decode(z, model: VaeModel) -> Tensor:
    """[latent] -> [seq_len, d_exc], or batched [batch, latent] -> [batch, seq_len, d_exc]."""
    z = as_tensor(z)
    single = z.ndim == 1
    if single:
        z = reshape(z, (1, z.shape[0]))
    hidden = nn.relu(nn.linear(z, model.t("dec1.w"), model.t("dec1.b")))
    out = sigmoid(nn.linear(hidden, model.t("dec2.w"), model.t("dec2.b")))
    shape = (model.config.seq_len, model.d_exc)
    return reshape(out, shape if single else (z.shape[0],) + shape)


# -- losses ----------------------------------------------------------------------

def kl_loss(dist: LatentDistribution) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, 1)) summed over latent dims, averaged over the batch.

    Written with expm1 so that exp(v) - 1 - v never rounds below zero.
    """
    mu, lv = dist.mu, dist.log_var
    per_dim = 0.5 * (np.expm1(lv.data) - lv.data + mu.data * mu.data)
    batch = per_dim.shape[0] if per_dim.ndim > 1 else 1
    value = per_dim.sum() / batch

    def back(g):
        return g * mu.data / batch, g * 0.5 * np.expm1(lv.data) / batch

    return make_op(np.asarray(value), (mu, lv), back)


def bce_loss(x_hat, x, weights=None) -> Tensor:
    """Mean over elements of -w [x log x_hat + (1 - x) log(1 - x_hat)].

    ``weights`` broadcast along the last (feature) axis; predictions are
    clamped to [1e-7, 1 - 1e-7].
    """
    x_hat = as_tensor(x_hat)
    target = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x_hat.shape != target.shape:
        raise ShapeMismatch(f"prediction {x_hat.shape} vs target {target.shape}")
    if target.size and (np.nanmin(target) < 0.0 or np.nanmax(target) > 1.0 or np.isnan(target).any()):
        raise RangeViolation("BCE targets must lie in [0, 1]")
    w = np.ones(target.shape[-1:]) if weights is None else np.asarray(weights, dtype=np.float64)
    p = np.clip(x_hat.data, BCE_EPS, 1.0 - BCE_EPS)
    n = target.size
    value = float(np.mean(-w * (target * np.log(p) + (1.0 - target) * np.log1p(-p))))
    inside = (x_hat.data >= BCE_EPS) & (x_hat.data <= 1.0 - BCE_EPS)
    slope = np.where(inside, -w * (target / p - (1.0 - target) / (1.0 - p)) / n, 0.0)
    return make_op(np.asarray(value), (x_hat,), lambda g: (g * slope,))


def total_loss(recon, kl) -> Tensor:
    return as_tensor(recon) + as_tensor(kl)


def window_recon_loss(x_hat, x, config: VaeModelConfig) -> Tensor:
    """Training reconstruction term: element-mean BCE, scaled to a per-window sum unless configured otherwise."""
    loss = bce_loss(x_hat, x)
    if config.recon_reduction == "sum":
        loss = loss * float(np.prod(x_hat.shape[-2:]))
    return loss


# -- training ---------------------------------------------------------------------

def training_windows(rows_exc: np.ndarray, rows_geo: np.ndarray, seq_len: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Overlapping [n, seq_len, d] windows starting every ``stride`` rows."""
    if len(rows_exc) != len(rows_geo):
        raise ShapeMismatch(f"{len(rows_exc)} excavation rows vs {len(rows_geo)} geology rows")
    starts = np.arange(0, len(rows_exc) - seq_len + 1, stride)
    if len(starts) == 0:
        raise EmptyDataset(f"{len(rows_exc)} rows cannot fill a window of {seq_len}")
    idx = starts[:, None] + np.arange(seq_len)[None, :]
    return rows_exc[idx], rows_geo[idx]


def _check_inputs(xe: np.ndarray, xg: np.ndarray) -> None:
    if len(xe) == 0:
        raise EmptyDataset("no training windows")
    if len(xe) != len(xg):
        raise ShapeMismatch(f"{len(xe)} excavation windows vs {len(xg)} geology windows")
    for arr in (xe, xg):
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise RangeViolation("windows must be min-max normalised to [0, 1]")


@dataclass
class VaeTrainingReport:
    pretrain_loss: list[float] = field(default_factory=list)
    recon_loss: list[float] = field(default_factory=list)
    kl_loss: list[float] = field(default_factory=list)
    total_loss: list[float] = field(default_factory=list)


def _epochs(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    for epoch in range(epochs):
        order = rng.permutation(n)
        yield epoch, [order[lo : lo + batch_size] for lo in range(0, n, batch_size)]


def pretrain_lstm_ae(config: VaeModelConfig, windows_exc, windows_geo, losses: list | None = None) -> dict[str, np.ndarray]:
    """Train a deterministic autoencoder (encoder -> mu -> decoder) on BCE.

    Returns the encoder parameters (both LSTMs and the mean head) for
    initialising the VAE.
    """
    xe, xg = np.asarray(windows_exc, dtype=np.float64), np.asarray(windows_geo, dtype=np.float64)
    _check_inputs(xe, xg)
    model = build_vae(config, xe.shape[2], xg.shape[2])
    params = [p for name, p in model.params.items() if not name.startswith("log_var.")]
    rng = np.random.default_rng(config.seed + 2)
    for epoch, batches in _epochs(len(xe), config.batch_size, config.pretrain_epochs, rng):
        total = 0.0
        for idx in batches:
            dist = encode(xe[idx], xg[idx], model)
            loss = window_recon_loss(decode(dist.mu, model), xe[idx], config)
            loss.backward()
            nn.adam_step(params, lr=config.lr)
            total += float(loss.data) * len(idx)
        if losses is not None:
            losses.append(total / len(xe))
        log.debug("pretrain epoch %d bce %.6f", epoch + 1, total / len(xe))
    return {name: p.data.copy() for name, p in model.params.items() if name.startswith(ENCODER_PREFIXES)}


def train_vae(
    config: VaeModelConfig,
    windows_exc,
    windows_geo,
    encoder: dict[str, np.ndarray] | None = None,
) -> tuple[VaeModel, VaeTrainingReport]:
    """Adam on KL + BCE over normal windows.

    ``encoder`` holds pretrained encoder parameters; when omitted the
    autoencoder pretraining runs first.
    """
    xe, xg = np.asarray(windows_exc, dtype=np.float64), np.asarray(windows_geo, dtype=np.float64)
    _check_inputs(xe, xg)
    report = VaeTrainingReport()
    if encoder is None:
        encoder = pretrain_lstm_ae(config, xe, xg, losses=report.pretrain_loss)
    model = build_vae(config, xe.shape[2], xg.shape[2], seed=config.seed + 1)
    for name, data in encoder.items():
        if model.params[name].shape != data.shape:
            raise ShapeMismatch(f"pretrained {name} has shape {data.shape}, expected {model.params[name].shape}")
        model.params[name].tensor.data[...] = data
    params = model.parameters()
    rng = np.random.default_rng(config.seed + 3)
    for epoch, batches in _epochs(len(xe), config.batch_size, config.train_epochs, rng):
        sums = np.zeros(3)
        for idx in batches:
            dist = encode(xe[idx], xg[idx], model)
            z = reparameterize(dist, rng)
            recon = window_recon_loss(decode(z, model), xe[idx], config)
            kl = kl_loss(dist)
            loss = total_loss(recon, kl)
            loss.backward()
            nn.adam_step(params, lr=config.lr)
            sums += np.array([float(recon.data), float(kl.data), float(loss.data)]) * len(idx)
        recon_v, kl_v, total_v = sums / len(xe)
        report.recon_loss.append(recon_v)
        report.kl_loss.append(kl_v)
        report.total_loss.append(total_v)
        log.debug("vae epoch %d bce %.6f kl %.6f", epoch + 1, recon_v, kl_v)
    return model, report


# -- scoring ----------------------------------------------------------------------

def score_windows(model: VaeModel, windows_exc, windows_geo, batch_size: int = 256) -> np.ndarray:
    """Per-window reconstruction score of decode(mu) against the input (no sampling).

    With ``score="bce"`` this is the mean BCE.  The default ``"excess"``
    subtracts the BCE of the input against itself, i.e. the mean Bernoulli
    KL divergence.  Plain BCE is bounded below by the entropy of the target,
    which is largest at 0.5, so a value driven to 0 or 1 can score lower
    than a normal mid-range value; the excess is zero exactly when the
    reconstruction matches and grows with any deviation.
    """
    xe, xg = np.asarray(windows_exc, dtype=np.float64), np.asarray(windows_geo, dtype=np.float64)
    if xe.ndim != 3 or xg.ndim != 3 or len(xe) != len(xg):
        raise ShapeMismatch(f"expected aligned [n, seq_len, d] windows, got {xe.shape} and {xg.shape}")
    excess = model.config.score == "excess"
    out = []
    with no_grad():
        for lo in range(0, len(xe), batch_size):
            e, g = xe[lo : lo + batch_size], xg[lo : lo + batch_size]
            p = np.clip(decode(encode(e, g, model).mu, model).data, BCE_EPS, 1.0 - BCE_EPS)
            bce = _bce(e, p)
            if excess:
                bce = np.maximum(bce - _bce(e, np.clip(e, BCE_EPS, 1.0 - BCE_EPS)), 0.0)
            out.append(bce.reshape(len(e), -1).mean(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def _bce(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    return -(x * np.log(p) + (1.0 - x) * np.log1p(-p))


def calibrate_threshold(scores, q: float) -> float:
    """Nearest-rank quantile: the sorted score at index ceil(q n) - 1."""
    s = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    if len(s) == 0:
        raise EmptyScores("cannot calibrate a threshold without scores")
    if not 0.0 < q < 1.0:
        raise ConfigInvalid(f"quantile must lie in (0, 1), got {q}")
    # round away float noise such as 0.29 * 100 = 28.999999999999996
    rank = math.ceil(round(q * len(s), 9))
    return float(s[max(rank, 1) - 1])


def verdicts(scores, threshold: float, start_timestamps=None) -> list[AnomalyVerdict]:
    scores = np.asarray(scores, dtype=np.float64)
    ts = np.zeros(len(scores), dtype=np.int64) if start_timestamps is None else np.asarray(start_timestamps)
    return [
        AnomalyVerdict(i, float(s), float(threshold), bool(s > threshold), int(ts[i]))
        for i, s in enumerate(scores)
    ]


def detect(model: VaeModel, threshold: float, windows_exc, windows_geo, start_timestamps=None) -> list[AnomalyVerdict]:
    return verdicts(score_windows(model, windows_exc, windows_geo), threshold, start_timestamps)
