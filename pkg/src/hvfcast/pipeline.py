"""Temporal pairing, horizon binning, patient-level splits, input encoding.

Fields are paired per (patient, eye) into every ordered earlier->later
combination.  The gap between the two tests falls into one of ten 0.5-year
horizon bins centered at 1.0 .. 5.5 years; gaps under 0.75 years or over
5.5 years are excluded.  Splitting is strictly patient-level: 20% of
patients are held out for testing and the rest are partitioned round-robin
into 10 cross-validation folds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date
from itertools import combinations, product

import numpy as np

from .domain import (
    EYE_FROM_WIRE,
    EYE_TO_WIRE,
    GRID_COLS,
    GRID_ROWS,
    LEFT,
    RIGHT,
    VisualField,
    valid_mask_array,
)

BIN_CENTERS = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5)
BIN_HALF_WIDTH = 0.25
DELTA_MIN = 0.75  # inclusive lower edge of the first bin
DELTA_MAX = 5.5  # inclusive upper edge of the last bin
DAYS_PER_YEAR = 365.25

N_FOLDS = 10
MIN_PATIENTS = 20

TEST_INDEX_CAP = 20  # test_index feature saturates here
AGE_SCALE = 100.0


class PipelineError(ValueError):
    pass


def years_between(earlier: date, later: date) -> float:
    return (later - earlier).days / DAYS_PER_YEAR


@dataclass
class FieldPair:
    """Ordered (input, target) pair of same-patient, same-eye fields."""

    input: VisualField
    target: VisualField
    delta_years: float


def make_pairs(fields: list[VisualField]) -> list[FieldPair]:
    """All ordered earlier->later pairs within each (patient, eye) series."""
    by_eye: dict[tuple[str, str], list[VisualField]] = {}
    for f in fields:
        by_eye.setdefault((f.patient_id, f.eye), []).append(f)

    pairs = []
    for key in sorted(by_eye):
        series = sorted(by_eye[key], key=lambda f: f.test_date)
        for a, b in combinations(series, 2):
            pairs.append(FieldPair(input=a, target=b, delta_years=years_between(a.test_date, b.test_date)))
    return pairs


def assign_bin(delta) -> float | None:
    """Horizon bin center for a time gap, or None when excluded.

    Bin c covers [c - 0.25, c + 0.25) except the last bin, which closes at
    5.5; gaps below 0.75 or above 5.5 years belong to no bin.
    """
    if isinstance(delta, FieldPair):
        delta = delta.delta_years
    if delta < DELTA_MIN or delta > DELTA_MAX:
        return None
    if delta >= DELTA_MAX - BIN_HALF_WIDTH:
        return BIN_CENTERS[-1]
    idx = int((delta - (BIN_CENTERS[0] - BIN_HALF_WIDTH)) / 0.5)
    return BIN_CENTERS[idx]


def bin_pairs(pairs: list[FieldPair]) -> tuple[dict[float, list[FieldPair]], list[FieldPair]]:
    """Partition pairs into their bins; second element is the excluded list."""
    binned: dict[float, list[FieldPair]] = {c: [] for c in BIN_CENTERS}
    excluded = []
    for p in pairs:
        center = assign_bin(p.delta_years)
        if center is None:
            excluded.append(p)
        else:
            binned[center].append(p)
    return binned, excluded


# ---------------------------------------------------------------------------
# Patient-level splitting


@dataclass(frozen=True)
class SplitPlan:
    """Held-out test patients plus 10 disjoint cross-validation folds."""

    test_patients: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    seed: int
    ratio: float = 0.8

    def fold_of(self) -> dict[str, int]:
        return {pid: i for i, fold in enumerate(self.folds) for pid in fold}

    def train_patients(self) -> tuple[str, ...]:
        return tuple(pid for fold in self.folds for pid in fold)

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": self.ratio,
            "test_patients": sorted(self.test_patients),
            "folds": [sorted(fold) for fold in self.folds],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SplitPlan":
        return cls(
            test_patients=tuple(d["test_patients"]),
            folds=tuple(tuple(fold) for fold in d["folds"]),
            seed=d["seed"],
            ratio=d.get("ratio", 0.8),
        )


def split_patients(fields, ratio: float = 0.8, seed: int = 0, n_folds: int = N_FOLDS) -> SplitPlan:
    """Seeded patient-level split: ~80% train+validation (10 folds), rest test."""
    if fields and isinstance(next(iter(fields)), VisualField):
        patient_ids = sorted({f.patient_id for f in fields})
    else:
        patient_ids = sorted(set(fields))
    n = len(patient_ids)
    if n < MIN_PATIENTS:
        raise PipelineError(f"need at least {MIN_PATIENTS} patients, got {n}")

    rng = np.random.default_rng(seed)
    order = [patient_ids[i] for i in rng.permutation(n)]
    n_train = int(np.ceil(ratio * n))
    if n_train < n_folds:
        raise PipelineError(
            f"too few patients for {n_folds} nonempty folds ({n_train} in train split)"
        )
    train, test = order[:n_train], order[n_train:]
    folds = tuple(tuple(train[i::n_folds]) for i in range(n_folds))
    return SplitPlan(test_patients=tuple(test), folds=folds, seed=seed, ratio=ratio)


# ---------------------------------------------------------------------------
# Input/target encoding


@dataclass(frozen=True)
class FeatureCombo:
    """Which clinical context channels accompany the raw field channel."""

    age: bool = False
    gender: bool = False
    eye: bool = False
    test_index: bool = False

    FLAGS = ("age", "gender", "eye", "test_index")

    def channels(self) -> int:
        return 1 + self.age + 2 * self.gender + 2 * self.eye + self.test_index

    @property
    def name(self) -> str:
        on = [f for f in self.FLAGS if getattr(self, f)]
        return "+".join(on) if on else "none"

    @classmethod
    def parse(cls, name: str) -> "FeatureCombo":
        if name == "none":
            return cls()
        flags = name.split("+")
        unknown = [f for f in flags if f not in cls.FLAGS]
        if unknown:
            raise PipelineError(f"unknown feature flags {unknown} in combo {name!r}")
        return cls(**{f: True for f in flags})

    @classmethod
    def all_combos(cls) -> list["FeatureCombo"]:
        """All 16 combinations, in a fixed order (age varies slowest)."""
        return [
            cls(age=a, gender=g, eye=e, test_index=t)
            for a, g, e, t in product((False, True), repeat=4)
        ]


def encode_input(f: VisualField, combo: FeatureCombo) -> np.ndarray:
    """(channels, 8, 9) sample: dB grid first, then constant context faces.

    Channel order is fixed: age (age/100), gender one-hot (M, F), eye
    one-hot (right, left), capped test index (min(n, 20)/20).
    """
    faces = [f.to_grid()]

    def face(value: float) -> np.ndarray:
        return np.full((GRID_ROWS, GRID_COLS), value, dtype=np.float64)

    if combo.age:
        faces.append(face(f.age_years / AGE_SCALE))
    if combo.gender:
        faces.append(face(1.0 if f.gender == "M" else 0.0))
        faces.append(face(1.0 if f.gender == "F" else 0.0))
    if combo.eye:
        faces.append(face(1.0 if f.eye == RIGHT else 0.0))
        faces.append(face(1.0 if f.eye == LEFT else 0.0))
    if combo.test_index:
        faces.append(face(min(f.test_index, TEST_INDEX_CAP) / TEST_INDEX_CAP))
    return np.stack(faces)


def encode_target(f: VisualField) -> tuple[np.ndarray, np.ndarray]:
    """((1, 8, 9) dB grid, (8, 9) boolean mask of the 54 valid cells)."""
    return f.to_grid()[None, :, :], np.array(valid_mask_array())


def encode_pairs(pairs: list[FieldPair], combo: FeatureCombo) -> tuple[np.ndarray, np.ndarray]:
    """Stack pairs into (N, C, 8, 9) inputs and (N, 1, 8, 9) targets."""
    if not pairs:
        c = combo.channels()
        return (
            np.zeros((0, c, GRID_ROWS, GRID_COLS)),
            np.zeros((0, 1, GRID_ROWS, GRID_COLS)),
        )
    xs = np.stack([encode_input(p.input, combo) for p in pairs])
    ys = np.stack([encode_target(p.target)[0] for p in pairs])
    return xs, ys


# ---------------------------------------------------------------------------
# Pair files (JSON lines referencing dataset records)


def _ref(f: VisualField) -> dict:
    return {"patient_id": f.patient_id, "eye": EYE_TO_WIRE[f.eye], "test_index": f.test_index}


def write_pairs(path, binned: dict[float, list[FieldPair]]) -> int:
    """One line per binned pair; returns the number of lines written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for center in BIN_CENTERS:
            for p in binned.get(center, []):
                fh.write(
                    json.dumps(
                        {
                            "bin": center,
                            "input_ref": _ref(p.input),
                            "target_ref": _ref(p.target),
                            "delta": round(p.delta_years, 6),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                n += 1
    return n


def read_pairs(path, fields: list[VisualField]) -> dict[float, list[FieldPair]]:
    """Resolve a pair file against its dataset; raises on dangling refs."""
    index = {(f.patient_id, f.eye, f.test_index): f for f in fields}
    binned: dict[float, list[FieldPair]] = {c: [] for c in BIN_CENTERS}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            pair_fields = []
            for key in ("input_ref", "target_ref"):
                ref = obj[key]
                k = (ref["patient_id"], EYE_FROM_WIRE[ref["eye"]], ref["test_index"])
                if k not in index:
                    raise PipelineError(f"line {lineno}: {key} {ref} not in dataset")
                pair_fields.append(index[k])
            a, b = pair_fields
            if obj["bin"] not in binned:
                raise PipelineError(f"line {lineno}: unknown bin {obj['bin']!r}")
            binned[obj["bin"]].append(
                FieldPair(input=a, target=b, delta_years=years_between(a.test_date, b.test_date))
            )
    return binned


def pairs_for_patients(
    binned: dict[float, list[FieldPair]], patients
) -> dict[float, list[FieldPair]]:
    wanted = set(patients)
    return {
        center: [p for p in pairs if p.input.patient_id in wanted]
        for center, pairs in binned.items()
    }
