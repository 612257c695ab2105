"""Geology and excavation record types and their CSV schemas."""
from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import SchemaMismatch


class Phase(str, enum.Enum):
    RISING = "Rising"
    STABLE = "Stable"
    ASSEMBLY = "Assembly"
    MAINTENANCE = "Maintenance"
    STOPPED = "Stopped"


@dataclass(frozen=True)
class GeologyRecord:
    ring: int
    plasticity: str
    density: str
    ucs: float  # MPa
    permeability: float  # m/s
    rock_level: int
    layer_number: int
    accounting: float
    integrity_low: float
    integrity_high: float
    standard_penetration: float

    def __post_init__(self):
        if self.ring < 1:
            raise ValueError(f"ring must be positive, got {self.ring}")
        if self.integrity_low > self.integrity_high:
            raise ValueError(f"ring {self.ring}: integrity range {self.integrity_low} > {self.integrity_high}")
        if not 0.0 <= self.accounting <= 1.0:
            raise ValueError(f"ring {self.ring}: accounting {self.accounting} outside [0, 1]")
        if self.ucs < 0 or self.standard_penetration < 0:
            raise ValueError(f"ring {self.ring}: negative ucs or standard penetration")


# numeric geology features in the order they enter the fused vector
GEOLOGY_NUMERIC = (
    "ucs",
    "permeability",
    "rock_level",
    "layer_number",
    "accounting",
    "integrity_low",
    "integrity_high",
    "standard_penetration",
)
GEOLOGY_TEXT = ("plasticity", "density")

EXCAVATION_FEATURES = (
    "propulsion_speed",
    "cutter_speed",
    "cutter_torque",
    "total_propulsion",
    "cutter_power",
    "displacement",
    "propulsion_pressure",
    "propulsion_thrust",
)


@dataclass(frozen=True)
class ExcavationRecord:
    timestamp: int
    ring: int
    propulsion_speed: float  # mm/min
    cutter_speed: float  # rpm
    cutter_torque: float  # kN*m
    total_propulsion: float  # kN
    cutter_power: float  # kW
    displacement: float  # mm
    propulsion_pressure: float  # bar
    propulsion_thrust: float  # kN
    phase: Phase = Phase.STABLE

    def values(self) -> list[float]:
        return [getattr(self, name) for name in EXCAVATION_FEATURES]


@dataclass
class FusedSample:
    features: np.ndarray
    target: float
    ring: int
    timestamp: int = 0
    phase: Phase = Phase.STABLE


# -- CSV ---------------------------------------------------------------------

GEOLOGY_COLUMNS = {
    "ring": "ring",
    "plasticity": "plasticity",
    "density": "density",
    "unconfined_compressive_strength": "ucs",
    "permeability_coefficient": "permeability",
    "surrounding_rock_level": "rock_level",
    "layer_number": "layer_number",
    "accounting": "accounting",
    "integrity_factor": None,
    "standard_penetration": "standard_penetration",
}
EXCAVATION_COLUMNS = ("timestamp", "ring") + EXCAVATION_FEATURES + ("phase",)

_RANGE = re.compile(r"^\s*([-+0-9.eE]+)\s*(?:to|-|~)\s*([-+0-9.eE]+)\s*$")


def parse_range(text: str) -> tuple[float, float]:
    """Parse integrity-factor text such as ``"0.36 to 0.51"``; a bare number is a point range."""
    m = _RANGE.match(text)
    if m:
        lo, hi = float(m.group(1)), float(m.group(2))
    else:
        lo = hi = float(text)
    return lo, hi


def format_range(lo: float, hi: float) -> str:
    return f"{lo!r} to {hi!r}"


def fmt(x) -> str:
    """Shortest round-tripping text for a value; NaN becomes an empty cell."""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _num(text: str) -> float:
    return float("nan") if text.strip() == "" else float(text)


def _check_header(header, required, path):
    for col in required:
        if col not in header:
            raise SchemaMismatch(col, path)


def read_geology_csv(path) -> list[GeologyRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames or [], GEOLOGY_COLUMNS, path)
        out = []
        for row in reader:
            lo, hi = parse_range(row["integrity_factor"])
            out.append(
                GeologyRecord(
                    ring=int(row["ring"]),
                    plasticity=row["plasticity"],
                    density=row["density"],
                    ucs=float(row["unconfined_compressive_strength"]),
                    permeability=float(row["permeability_coefficient"]),
                    rock_level=int(row["surrounding_rock_level"]),
                    layer_number=int(row["layer_number"]),
                    accounting=float(row["accounting"]),
                    integrity_low=lo,
                    integrity_high=hi,
                    standard_penetration=float(row["standard_penetration"]),
                )
            )
    return out


def write_geology_csv(path, records: list[GeologyRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GEOLOGY_COLUMNS)
        for r in records:
            w.writerow(
                [
                    r.ring,
                    r.plasticity,
                    r.density,
                    fmt(r.ucs),
                    fmt(r.permeability),
                    r.rock_level,
                    r.layer_number,
                    fmt(r.accounting),
                    format_range(r.integrity_low, r.integrity_high),
                    fmt(r.standard_penetration),
                ]
            )


def read_excavation_csv(path) -> list[ExcavationRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames or [], EXCAVATION_COLUMNS, path)
        return [
            ExcavationRecord(
                timestamp=int(row["timestamp"]),
                ring=int(row["ring"]),
                phase=Phase(row["phase"]),
                **{name: _num(row[name]) for name in EXCAVATION_FEATURES},
            )
            for row in reader
        ]


def write_excavation_csv(path, records: list[ExcavationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXCAVATION_COLUMNS)
        for r in records:
            w.writerow([r.timestamp, r.ring] + [fmt(v) for v in r.values()] + [r.phase.value])


def excavation_matrix(records: list[ExcavationRecord]) -> np.ndarray:
    """[rows, 8] float matrix of the Table II features, NaN for gaps."""
    return np.array([r.values() for r in records], dtype=np.float64).reshape(len(records), len(EXCAVATION_FEATURES))


def replace_values(record: ExcavationRecord, values) -> ExcavationRecord:
    kwargs = {f.name: getattr(record, f.name) for f in fields(record)}
    kwargs.update({name: float(v) for name, v in zip(EXCAVATION_FEATURES, values)})
    return ExcavationRecord(**kwargs)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
