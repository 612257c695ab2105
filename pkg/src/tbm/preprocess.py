"""Cleaning, normalisation and fusion of geology and excavation data.

Two pipelines are assembled from the primitives below:

* rate prediction: embed -> merge -> fill -> despike -> z-score -> keep Stable rows
* anomaly detection: keep Stable rows -> fill -> despike -> smooth -> box-cox -> min-max

Series-level functions take and return 1-D float arrays with NaN marking gaps.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    AllMissing,
    MissingGeology,
    NonPositiveValue,
    SchemaMismatch,
    TooFewSamples,
    WindowTooLarge,
    ZeroRange,
    ZeroVariance,
)
from .records import (
    EXCAVATION_FEATURES,
    GEOLOGY_NUMERIC,
    GEOLOGY_TEXT,
    ExcavationRecord,
    FusedSample,
    GeologyRecord,
    Phase,
    excavation_matrix,
    fmt,
)
from .word2vec import TextEmbedding, embed_category, tokenize, train_word2vec

DESPIKE_WINDOW = 11
DESPIKE_K = 5.0
MAD_FLOOR = 1e-9
BOXCOX_GRID = np.round(np.arange(-200, 201) * 0.01, 2)
SPLIT_RATIOS = (7, 2, 1)


# -- series primitives -------------------------------------------------------

def fill_missing(series) -> np.ndarray:
    """Linear interpolation across interior gaps, nearest value at the ends."""
    x = np.asarray(series, dtype=np.float64)
    known = ~np.isnan(x)
    if not known.any():
        raise AllMissing("series has no observed values")
    if known.all():
        return x.copy()
    idx = np.arange(len(x))
    return np.interp(idx, idx[known], x[known])


def _centered_windows(x: np.ndarray, window: int) -> np.ndarray:
    """[n, window] view of centered windows, NaN-padded where truncated at the edges."""
    half = window // 2
    padded = np.concatenate([np.full(half, np.nan), x, np.full(half, np.nan)])
    return sliding_window_view(padded, window)


def rolling_median_mad(series, window: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(series, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd positive integer, got {window}")
    if window > len(x):
        raise WindowTooLarge(f"window {window} longer than series of length {len(x)}")
    win = _centered_windows(x, window)
    med = np.nanmedian(win, axis=1)
    mad = np.nanmedian(np.abs(win - med[:, None]), axis=1)
    return med, mad


def remove_discrete_points(series, window: int = DESPIKE_WINDOW, k: float = DESPIKE_K) -> np.ndarray:
    """Mark points farther than k rolling MADs from the rolling median as gaps, then refill."""
    x = np.asarray(series, dtype=np.float64)
    med, mad = rolling_median_mad(x, window)
    with np.errstate(invalid="ignore"):
        outlier = np.abs(x - med) > k * np.maximum(mad, MAD_FLOOR)
    cleaned = x.copy()
    cleaned[outlier] = np.nan
    return fill_missing(cleaned)


def window_smooth(series, window: int) -> np.ndarray:
    """Centered moving average; windows are truncated near the boundaries."""
    x = np.asarray(series, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd positive integer, got {window}")
    if window > len(x):
        raise WindowTooLarge(f"window {window} longer than series of length {len(x)}")
    if window == 1:
        return x.copy()
    return np.nanmean(_centered_windows(x, window), axis=1)


def zscore_normalize(series) -> tuple[np.ndarray, float, float]:
    x = np.asarray(series, dtype=np.float64)
    if len(x) < 2:
        raise ZeroVariance("need at least two values for a sample standard deviation")
    mean = float(x.mean())
    std = float(x.std(ddof=1))
    if std == 0.0:
        raise ZeroVariance("constant series")
    return (x - mean) / std, mean, std


def minmax_normalize(series) -> tuple[np.ndarray, float, float]:
    x = np.asarray(series, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        raise ZeroRange("constant series")
    return (x - lo) / (hi - lo), lo, hi


def boxcox_transform(series, lam: float) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if np.any(x <= 0):
        raise NonPositiveValue("box-cox needs strictly positive values")
    if lam == 0.0:
        return np.log(x)
    return (x**lam - 1.0) / lam


def boxcox_loglik(series, lam: float) -> float:
    """Profile log-likelihood of a normal model for the transformed data."""
    x = np.asarray(series, dtype=np.float64)
    y = boxcox_transform(x, lam)
    var = y.var()
    if var <= 0:
        return -math.inf
    return (lam - 1.0) * float(np.log(x).sum()) - 0.5 * len(x) * math.log(var)


def boxcox(series, lam: float | None = None) -> tuple[np.ndarray, float]:
    """Box-cox transform with lambda fitted on the grid [-2, 2] (step 0.01) unless given."""
    x = np.asarray(series, dtype=np.float64)
    if np.any(x <= 0):
        raise NonPositiveValue("box-cox needs strictly positive values")
    if lam is None:
        lls = [boxcox_loglik(x, float(l)) for l in BOXCOX_GRID]
        lam = float(BOXCOX_GRID[int(np.argmax(lls))])
    return boxcox_transform(x, lam), lam


def filter_operating_segments(records: list[ExcavationRecord]) -> list[ExcavationRecord]:
    return [r for r in records if r.phase == Phase.STABLE]


def split_sizes(n: int, ratios=SPLIT_RATIOS) -> tuple[int, int, int]:
    if n < 10:
        raise TooFewSamples(f"need at least 10 samples to split, got {n}")
    total = sum(ratios)
    n_valid = n * ratios[1] // total
    n_test = n * ratios[2] // total
    return n - n_valid - n_test, n_valid, n_test


def split_dataset(samples: list, ratios=SPLIT_RATIOS, seed: int | None = None):
    """Chronological train/valid/test split; ``seed`` is unused because nothing is shuffled."""
    n_train, n_valid, _ = split_sizes(len(samples), ratios)
    return (
        samples[:n_train],
        samples[n_train : n_train + n_valid],
        samples[n_train + n_valid :],
    )


# -- fusion --------------------------------------------------------------------

def geology_corpus(geo: list[GeologyRecord]) -> list[list[str]]:
    return [tokenize(f"{g.plasticity} {g.density}") for g in geo]


def geology_vector(g: GeologyRecord, emb: TextEmbedding) -> np.ndarray:
    numeric = np.array([float(getattr(g, name)) for name in GEOLOGY_NUMERIC])
    text = [embed_category(getattr(g, name), emb) for name in GEOLOGY_TEXT]
    return np.concatenate([numeric, *text])


def feature_names(emb_dim: int) -> list[str]:
    names = list(EXCAVATION_FEATURES) + list(GEOLOGY_NUMERIC)
    for name in GEOLOGY_TEXT:
        names += [f"{name}_emb{i}" for i in range(emb_dim)]
    return names


def merge_geology_excavation(
    geo: list[GeologyRecord], exc: list[ExcavationRecord], emb: TextEmbedding
) -> list[FusedSample]:
    """Join each excavation row with its ring's geology; target is the next row's speed.

    Rows are grouped by ring in order of appearance and sorted by timestamp
    within a ring.  The last row of every ring has no successor and yields no
    sample.
    """
    by_ring = {g.ring: g for g in geo}
    rings: dict[int, list[ExcavationRecord]] = {}
    for r in exc:
        if r.ring not in by_ring:
            raise MissingGeology(r.ring)
        rings.setdefault(r.ring, []).append(r)
    geo_vecs = {ring: geology_vector(by_ring[ring], emb) for ring in rings}
    out = []
    for ring, rows in rings.items():
        rows = sorted(rows, key=lambda r: r.timestamp)
        for cur, nxt in zip(rows, rows[1:]):
            out.append(
                FusedSample(
                    features=np.concatenate([np.array(cur.values(), dtype=np.float64), geo_vecs[ring]]),
                    target=nxt.propulsion_speed,
                    ring=ring,
                    timestamp=cur.timestamp,
                    phase=cur.phase,
                )
            )
    return out


def _fill_column(col: np.ndarray) -> np.ndarray:
    return fill_missing(col) if np.isnan(col).any() else col


# -- pipelines -----------------------------------------------------------------

@dataclass
class Manifest:
    """Everything needed to replay a preprocessing run bit for bit."""

    task: str
    columns: list[str]
    feature_names: list[str]
    emb_dim: int
    stats: dict = field(default_factory=dict)
    geology_columns: list[int] = field(default_factory=list)
    excavation_columns: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "columns": self.columns,
            "feature_names": self.feature_names,
            "emb_dim": self.emb_dim,
            "stats": self.stats,
            "geology_columns": self.geology_columns,
            "excavation_columns": self.excavation_columns,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def prepare_rate_dataset(
    geo: list[GeologyRecord],
    exc: list[ExcavationRecord],
    emb_dim: int = 4,
    w2v_epochs: int = 50,
    seed: int = 0,
    despike_window: int = DESPIKE_WINDOW,
    despike_k: float = DESPIKE_K,
) -> tuple[list[FusedSample], Manifest]:
    """Rate-task chain: embed, merge, fill, despike, z-score (train-fit), drop non-Stable rows.

    Normalisation statistics are fitted on the rows that form the training
    split after the phase filter, so valid/test rows never inform them.
    """
    emb = train_word2vec(geology_corpus(geo), dim=emb_dim, epochs=w2v_epochs, seed=seed)
    samples = merge_geology_excavation(geo, exc, emb)
    if not samples:
        raise TooFewSamples("merge produced no samples")
    feats = np.stack([s.features for s in samples])
    target = np.array([s.target for s in samples])
    n_exc = len(EXCAVATION_FEATURES)

    for j in range(feats.shape[1]):
        feats[:, j] = _fill_column(feats[:, j])
    target = _fill_column(target)
    if len(samples) >= despike_window:
        for j in range(n_exc):
            feats[:, j] = remove_discrete_points(feats[:, j], despike_window, despike_k)
        target = remove_discrete_points(target, despike_window, despike_k)

    stable = np.array([s.phase == Phase.STABLE for s in samples])
    n_train, _, _ = split_sizes(int(stable.sum()))
    train_rows = np.flatnonzero(stable)[:n_train]

    names = feature_names(emb.dim)
    means, stds = [], []
    for j in range(feats.shape[1]):
        mu, sd = _fit_zscore(feats[train_rows, j])
        feats[:, j] = (feats[:, j] - mu) / sd
        means.append(mu)
        stds.append(sd)
    t_mu, t_sd = _fit_zscore(target[train_rows])
    target = (target - t_mu) / t_sd

    out = [
        FusedSample(features=feats[i].copy(), target=float(target[i]), ring=s.ring, timestamp=s.timestamp, phase=s.phase)
        for i, s in enumerate(samples)
        if stable[i]
    ]
    manifest = Manifest(
        task="rate",
        columns=["ring", "target"] + [f"f{i}" for i in range(feats.shape[1])],
        feature_names=names,
        emb_dim=emb.dim,
        stats={"feature_mean": means, "feature_std": stds, "target_mean": t_mu, "target_std": t_sd},
        geology_columns=list(range(n_exc, feats.shape[1])),
        excavation_columns=list(range(n_exc)),
        extra={"embedding": emb.to_dict(), "despike": {"window": despike_window, "k": despike_k}, "seed": seed},
    )
    return out, manifest


def _fit_zscore(col: np.ndarray) -> tuple[float, float]:
    """Sample mean/std of a training column; constant columns are only centred."""
    try:
        _, mu, sd = zscore_normalize(col)
    except ZeroVariance:
        mu, sd = float(col.mean()), 1.0
    return mu, sd


@dataclass
class AnomalyDataset:
    excavation: np.ndarray  # [rows, d_exc] in [0, 1]
    geology: np.ndarray  # [rows, d_geo] in [0, 1]
    rings: np.ndarray
    timestamps: np.ndarray
    manifest: Manifest

    def windows(self, seq_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Non-overlapping [n, seq_len, d] windows; a trailing partial window is dropped."""
        n = len(self.excavation) // seq_len
        cut = n * seq_len
        return (
            self.excavation[:cut].reshape(n, seq_len, -1),
            self.geology[:cut].reshape(n, seq_len, -1),
            self.timestamps[:cut:seq_len],
        )


def prepare_anomaly_dataset(
    geo: list[GeologyRecord],
    exc: list[ExcavationRecord],
    fit_rows: int,
    emb_dim: int = 4,
    w2v_epochs: int = 50,
    seed: int = 0,
    smooth_window: int = 3,
    despike_window: int = DESPIKE_WINDOW,
    despike_k: float = DESPIKE_K,
) -> AnomalyDataset:
    """Anomaly-task chain over the Stable rows.

    ``fit_rows`` is the number of leading Stable rows that form the normal
    training segment.  Outlier removal cleans only that segment; the rows
    after it keep their outliers because those are what the detector must
    see.  Every row is smoothed, box-cox transformed with the lambda fitted on
    the normal segment, then min-max scaled with the normal segment's bounds.
    Values outside the fitted range are clamped to it before the transforms,
    which keeps box-cox defined and (both transforms being increasing) is the
    same as clipping the scaled output to [0, 1].
    """
    stable = filter_operating_segments(exc)
    if not stable:
        raise TooFewSamples("no Stable-phase rows")
    by_ring = {g.ring: g for g in geo}
    for r in stable:
        if r.ring not in by_ring:
            raise MissingGeology(r.ring)
    fit_rows = min(fit_rows, len(stable))
    emb = train_word2vec(geology_corpus(geo), dim=emb_dim, epochs=w2v_epochs, seed=seed)
    x = excavation_matrix(stable)
    geo_cache = {ring: geology_vector(g, emb) for ring, g in by_ring.items()}
    g = np.stack([geo_cache[r.ring] for r in stable])

    stats = {"excavation": [], "geology": []}
    for j in range(x.shape[1]):
        col = fill_missing(x[:, j])
        if fit_rows >= despike_window:
            col[:fit_rows] = remove_discrete_points(col[:fit_rows], despike_window, despike_k)
        lo, hi = float(col[:fit_rows].min()), float(col[:fit_rows].max())
        col = np.clip(col, lo, hi)
        if smooth_window > 1 and len(col) >= smooth_window:
            col = window_smooth(col, smooth_window)
        entry = {"clamp": [lo, hi]}
        if lo > 0:
            _, lam = boxcox(col[:fit_rows])
            col = boxcox_transform(col, lam)
            entry["lambda"] = lam
        x[:, j], entry["min"], entry["max"] = _apply_minmax(col, col[:fit_rows])
        stats["excavation"].append(entry)
    for j in range(g.shape[1]):
        col = g[:, j]
        g[:, j], lo, hi = _apply_minmax(col, col[:fit_rows])
        stats["geology"].append({"min": lo, "max": hi})

    d_exc = x.shape[1]
    manifest = Manifest(
        task="anomaly",
        columns=["window", "ring", "timestamp"] + [f"f{i}" for i in range(d_exc + g.shape[1])],
        feature_names=list(EXCAVATION_FEATURES) + feature_names(emb.dim)[len(EXCAVATION_FEATURES) :],
        emb_dim=emb.dim,
        stats=stats,
        geology_columns=list(range(d_exc, d_exc + g.shape[1])),
        excavation_columns=list(range(d_exc)),
        extra={
            "embedding": emb.to_dict(),
            "fit_rows": fit_rows,
            "smooth_window": smooth_window,
            "despike": {"window": despike_window, "k": despike_k},
            "seed": seed,
        },
    )
    return AnomalyDataset(
        excavation=x,
        geology=g,
        rings=np.array([r.ring for r in stable]),
        timestamps=np.array([r.timestamp for r in stable]),
        manifest=manifest,
    )


def _apply_minmax(col: np.ndarray, fit: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(fit.min()), float(fit.max())
    if hi == lo:
        # constant on the fit segment: map it to the middle of the range
        return np.clip(col - lo + 0.5, 0.0, 1.0), lo, hi
    return np.clip((col - lo) / (hi - lo), 0.0, 1.0), lo, hi


# -- fused dataset files ---------------------------------------------------------

def write_rate_csv(path, samples: list[FusedSample]) -> None:
    n_feat = len(samples[0].features) if samples else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ring", "target"] + [f"f{i}" for i in range(n_feat)])
        for s in samples:
            w.writerow([s.ring, fmt(float(s.target))] + [fmt(float(v)) for v in s.features])


def read_rate_csv(path) -> list[FusedSample]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for col in ("ring", "target"):
            if col not in header:
                raise SchemaMismatch(col, path)
        return [
            FusedSample(features=np.array(row[2:], dtype=np.float64), target=float(row[1]), ring=int(row[0]))
            for row in reader
        ]


def write_anomaly_csv(path, data: AnomalyDataset, seq_len: int) -> None:
    feats = np.concatenate([data.excavation, data.geology], axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "ring", "timestamp"] + [f"f{i}" for i in range(feats.shape[1])])
        for i, row in enumerate(feats):
            w.writerow([i // seq_len, int(data.rings[i]), int(data.timestamps[i])] + [fmt(float(v)) for v in row])


def read_anomaly_csv(path, manifest: Manifest) -> AnomalyDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for col in ("window", "ring", "timestamp"):
            if col not in header:
                raise SchemaMismatch(col, path)
        rows = [r for r in reader]
    arr = np.array([r[3:] for r in rows], dtype=np.float64).reshape(len(rows), -1)
    return AnomalyDataset(
        excavation=arr[:, manifest.excavation_columns],
        geology=arr[:, manifest.geology_columns],
        rings=np.array([int(r[1]) for r in rows]),
        timestamps=np.array([int(r[2]) for r in rows]),
        manifest=manifest,
    )


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w") as fh:
        fh.write(manifest.dumps())


def read_manifest(path) -> Manifest:
    with open(path) as fh:
        return Manifest.from_dict(json.load(fh))
