"""Geology-driven synthetic telemetry with labelled fault injection.

Speed model (mm/min) for a ring with strength ``ucs`` and blow count ``spt``::

    level = SPEED_A * exp(-ucs / SPEED_U0) + SPEED_B * spt / SPT_NORM
    speed_t = level + u_t,   u_t = PHI * u_{t-1} + noise_sigma * e_t

The AR(1) state ``u`` runs continuously across rings.  The first 10% of each
ring is the Rising phase, during which the speed ramps linearly up to the
ring's level.  The remaining channels are smooth functions of speed and
ucs, each with white measurement noise proportional to ``noise_sigma``::

    cutter_speed        = 1.2 + 0.3 * exp(-ucs / 50)                 (+ 0.005 * sigma * e)
    cutter_torque       = 1500 + 25 * ucs + 10 * speed               (+ 20 * sigma * e)
    total_propulsion    = 30000 + 150 * ucs + 100 * speed            (+ 200 * sigma * e)
    cutter_power        = torque * cutter_speed * 2 pi / 60
    displacement        = advance since the ring start, speed * dt / 60 per row
    propulsion_pressure = total_propulsion / 620                     (+ 0.5 * sigma * e)
    propulsion_thrust   = 0.23 * total_propulsion                    (+ 50 * sigma * e)
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyGeology, FaultOutOfBounds, NoRegimes
from .records import (
    EXCAVATION_FEATURES,
    ExcavationRecord,
    GeologyRecord,
    Phase,
    excavation_matrix,
    replace_values,
)

SPEED_A = 60.0
SPEED_U0 = 50.0
SPEED_B = -6.0
SPT_NORM = 50.0
PHI = 0.8
RISING_FRACTION = 0.1
DT_SECONDS = 10


@dataclass(frozen=True)
class GeologyRegime:
    name: str
    ucs_range: tuple[float, float]
    permeability_range: tuple[float, float]
    penetration_range: tuple[float, float]
    plasticity: str
    density: str
    rock_level: int

    def __post_init__(self):
        for rng_ in (self.ucs_range, self.permeability_range, self.penetration_range):
            if rng_[0] > rng_[1]:
                raise ValueError(f"regime {self.name}: range {rng_} has low > high")


DEFAULT_REGIMES = (
    GeologyRegime("soft clay", (5.0, 15.0), (1e-3, 1e-2), (4.0, 12.0), "Soft plastic", "Loose", 5),
    GeologyRegime("silty sand", (15.0, 30.0), (1e-4, 1e-3), (12.0, 25.0), "Hard plastic", "Medium dense", 4),
    GeologyRegime("gravel", (30.0, 50.0), (1e-2, 5e-2), (25.0, 40.0), "Non plastic", "Dense", 3),
    GeologyRegime("weathered rock", (50.0, 80.0), (1e-6, 1e-5), (40.0, 50.0), "Non plastic", "Very dense", 2),
)


def gen_geology(
    rings: int,
    regimes=DEFAULT_REGIMES,
    change_prob: float = 0.1,
    seed: int = 0,
) -> list[GeologyRecord]:
    """Rings 1..rings; the regime follows a Markov chain starting in regime 0."""
    regimes = list(regimes)
    if not regimes:
        raise NoRegimes("at least one geology regime is required")
    if not 0.0 <= change_prob <= 1.0:
        raise ValueError(f"change_prob must lie in [0, 1], got {change_prob}")
    rng = np.random.default_rng(seed)
    state = 0
    out = []
    for ring in range(1, rings + 1):
        if ring > 1 and len(regimes) > 1 and rng.random() < change_prob:
            others = [i for i in range(len(regimes)) if i != state]
            state = others[int(rng.integers(len(others)))]
        reg = regimes[state]
        lo = float(rng.uniform(0.3, 0.5))
        out.append(
            GeologyRecord(
                ring=ring,
                plasticity=reg.plasticity,
                density=reg.density,
                ucs=float(rng.uniform(*reg.ucs_range)),
                permeability=float(rng.uniform(*reg.permeability_range)),
                rock_level=reg.rock_level,
                layer_number=state + 1,
                accounting=float(rng.uniform(0.0, 0.05)),
                integrity_low=lo,
                integrity_high=lo + float(rng.uniform(0.05, 0.2)),
                standard_penetration=float(rng.uniform(*reg.penetration_range)),
            )
        )
    return out


def speed_level(ucs: float, spt: float) -> float:
    return SPEED_A * math.exp(-ucs / SPEED_U0) + SPEED_B * spt / SPT_NORM


def gen_excavation(
    geo: list[GeologyRecord],
    rows_per_ring: int = 50,
    noise_sigma: float = 0.6,
    seed: int = 0,
) -> list[ExcavationRecord]:
    if not geo:
        raise EmptyGeology("no geology records to drive the generator")
    if rows_per_ring < 2:
        raise ValueError(f"rows_per_ring must be >= 2, got {rows_per_ring}")
    rng = np.random.default_rng(seed)
    n_rise = max(1, math.ceil(RISING_FRACTION * rows_per_ring))
    u = 0.0
    t = 0
    out = []
    for g in geo:
        level = speed_level(g.ucs, g.standard_penetration)
        cut_speed = 1.2 + 0.3 * math.exp(-g.ucs / 50.0)
        disp = 0.0
        e = rng.standard_normal((rows_per_ring, 6))
        for k in range(rows_per_ring):
            u = PHI * u + noise_sigma * e[k, 0]
            rising = k < n_rise
            base = level * (k + 1) / (n_rise + 1) if rising else level
            speed = max(0.0, base + u)
            cs = max(0.0, cut_speed + 0.005 * noise_sigma * e[k, 1])
            torque = max(0.0, 1500.0 + 25.0 * g.ucs + 10.0 * speed + 20.0 * noise_sigma * e[k, 2])
            total = max(0.0, 30000.0 + 150.0 * g.ucs + 100.0 * speed + 200.0 * noise_sigma * e[k, 3])
            disp += speed * DT_SECONDS / 60.0
            out.append(
                ExcavationRecord(
                    timestamp=t,
                    ring=g.ring,
                    propulsion_speed=speed,
                    cutter_speed=cs,
                    cutter_torque=torque,
                    total_propulsion=total,
                    cutter_power=torque * cs * 2.0 * math.pi / 60.0,
                    displacement=disp,
                    propulsion_pressure=max(0.0, total / 620.0 + 0.5 * noise_sigma * e[k, 4]),
                    propulsion_thrust=max(0.0, 0.23 * total + 50.0 * noise_sigma * e[k, 5]),
                    phase=Phase.RISING if rising else Phase.STABLE,
                )
            )
            t += DT_SECONDS
    return out


# -- faults --------------------------------------------------------------------

class FaultKind(str, enum.Enum):
    SPIKE = "Spike"
    DRIFT = "Drift"
    STUCK = "StuckSensor"
    DROPOUT = "Dropout"


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    channel: str
    start_window: int
    duration: int
    magnitude: float = 0.0

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError(f"fault duration must be >= 1, got {self.duration}")
        if self.channel not in EXCAVATION_FEATURES:
            raise ValueError(f"unknown excavation channel {self.channel!r}")
        object.__setattr__(self, "kind", FaultKind(self.kind))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


def inject_faults(
    records: list[ExcavationRecord],
    faults: list[FaultSpec],
    window_len: int = 32,
) -> tuple[list[ExcavationRecord], list[int]]:
    """Apply faults to the Stable-phase rows and return the labelled windows.

    Windows are consecutive non-overlapping blocks of ``window_len`` Stable
    rows, the same blocks the detector scores.  A window is labelled when any
    of its values changed, so labels are exact by construction.

    Spike adds ``magnitude`` channel standard deviations at the centre row of
    every covered window; Drift adds a ramp rising to ``magnitude`` standard
    deviations over the covered rows; StuckSensor holds the channel at the
    value just before the fault; Dropout zeroes the channel.
    """
    stable_idx = [i for i, r in enumerate(records) if r.phase == Phase.STABLE]
    n_windows = len(stable_idx) // window_len
    if not faults:
        return list(records), []
    x = excavation_matrix([records[i] for i in stable_idx])
    orig = x.copy()
    std = x.std(axis=0)
    for f in faults:
        if f.start_window < 0 or f.start_window + f.duration > n_windows:
            raise FaultOutOfBounds(
                f"fault windows [{f.start_window}, {f.start_window + f.duration}) outside 0..{n_windows}"
            )
        c = EXCAVATION_FEATURES.index(f.channel)
        lo, hi = f.start_window * window_len, (f.start_window + f.duration) * window_len
        if f.kind is FaultKind.SPIKE:
            centres = np.arange(lo, hi, window_len) + window_len // 2
            x[centres, c] += f.magnitude * std[c]
        elif f.kind is FaultKind.DRIFT:
            n = hi - lo
            x[lo:hi, c] += f.magnitude * std[c] * np.arange(1, n + 1) / n
        elif f.kind is FaultKind.STUCK:
            x[lo:hi, c] = x[lo - 1, c] if lo > 0 else x[lo, c]
        elif f.kind is FaultKind.DROPOUT:
            x[lo:hi, c] = 0.0
    x = np.maximum(x, 0.0)
    changed_rows = np.any(x != orig, axis=1)
    labels = sorted(
        {int(i // window_len) for i in np.flatnonzero(changed_rows) if i // window_len < n_windows}
    )
    out = list(records)
    for row, i in enumerate(stable_idx):
        if changed_rows[row]:
            out[i] = replace_values(records[i], x[row])
    return out, labels


FAULT_KINDS = (FaultKind.DRIFT, FaultKind.DROPOUT, FaultKind.SPIKE, FaultKind.STUCK)
FAULT_MAGNITUDE = {FaultKind.SPIKE: 25.0, FaultKind.DRIFT: 8.0, FaultKind.STUCK: 0.0, FaultKind.DROPOUT: 0.0}


def plan_faults(
    n_windows: int,
    count: int = 114,
    first_window: int = 0,
    seed: int = 0,
    kinds=FAULT_KINDS,
    channels=EXCAVATION_FEATURES,
) -> list[FaultSpec]:
    """``count`` single-window faults at distinct random windows in [first_window, n_windows)."""
    available = n_windows - first_window
    if count > available:
        raise FaultOutOfBounds(f"cannot place {count} faults in {available} windows")
    rng = np.random.default_rng(seed)
    windows = np.sort(rng.choice(np.arange(first_window, n_windows), size=count, replace=False))
    kinds = [FaultKind(k) for k in kinds]
    return [
        FaultSpec(
            kind=kinds[i % len(kinds)],
            channel=channels[int(rng.integers(len(channels)))],
            start_window=int(w),
            duration=1,
            magnitude=FAULT_MAGNITUDE[kinds[i % len(kinds)]],
        )
        for i, w in enumerate(windows)
    ]


def labels_json(labels: list[int], faults: list[FaultSpec], **extra) -> str:
    doc = {"fault_windows": labels, "faults": [f.to_dict() for f in faults]}
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
