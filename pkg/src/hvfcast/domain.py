"""24-2 visual field grid: layout masks, field records, and mean deviation.

A single 24-2 test measures 54 sensitivity values (in dB) laid out on an
8-row by 9-column grid; the remaining 18 grid cells are never measured.
Row lengths are 4-6-8-9-9-8-6-4.  Two of the 54 cells sit on the physiologic
blind spot; they are excluded from mean deviation but kept in the training
mask, because masking follows grid validity rather than clinical meaning.

Cell coordinates in degrees use 6-degree spacing with centers at odd
multiples of 3.  The two eyes share the same valid cell set; only the
blind-spot column mirrors (column 7 for right eyes, column 1 for left).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date
from functools import lru_cache

import numpy as np

GRID_ROWS = 8
GRID_COLS = 9
NUM_VALID_CELLS = 54
NUM_MD_CELLS = 52  # valid cells minus the two blind-spot cells
DB_MIN = 0.0
DB_MAX = 50.0

RIGHT = "right"
LEFT = "left"
EYES = (RIGHT, LEFT)
GENDERS = ("M", "F")

# Wire form used in dataset files ("OD" = right eye, "OS" = left eye).
EYE_FROM_WIRE = {"OD": RIGHT, "OS": LEFT}
EYE_TO_WIRE = {RIGHT: "OD", LEFT: "OS"}

# Inclusive (first_col, last_col) span of measured cells per grid row.
ROW_SPANS = ((2, 5), (1, 6), (0, 7), (0, 8), (0, 8), (0, 7), (1, 6), (2, 5))

BLIND_SPOT = {RIGHT: ((3, 7), (4, 7)), LEFT: ((3, 1), (4, 1))}

Cell = tuple[int, int]


class DomainError(ValueError):
    """A visual-field value or record violates a domain rule."""


class RecordError(DomainError):
    """A serialized record cannot be parsed into a valid field."""


@lru_cache(maxsize=None)
def mask_cells() -> tuple[Cell, ...]:
    """The 54 valid cells in row-major order (shared by both eyes)."""
    cells = []
    for row, (lo, hi) in enumerate(ROW_SPANS):
        for col in range(lo, hi + 1):
            cells.append((row, col))
    return tuple(cells)


@lru_cache(maxsize=None)
def valid_mask_array() -> np.ndarray:
    """Boolean (8, 9) array, True at the 54 measured cells. Read-only."""
    arr = np.zeros((GRID_ROWS, GRID_COLS), dtype=bool)
    for row, col in mask_cells():
        arr[row, col] = True
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Mask24x2:
    """Eye-specific 24-2 layout: valid cells plus the blind-spot pair."""

    eye: str
    valid: frozenset[Cell]
    blind_spot: frozenset[Cell]

    def md_cells(self) -> tuple[Cell, ...]:
        """Valid cells excluding the blind spot, row-major."""
        return tuple(c for c in mask_cells() if c not in self.blind_spot)


@lru_cache(maxsize=None)
def build_mask(eye: str) -> Mask24x2:
    """Canonical layout mask for one eye."""
    if eye not in EYES:
        raise DomainError(f"unknown eye {eye!r}; expected one of {EYES}")
    return Mask24x2(
        eye=eye,
        valid=frozenset(mask_cells()),
        blind_spot=frozenset(BLIND_SPOT[eye]),
    )


def cell_degrees(cell: Cell, eye: str) -> tuple[float, float]:
    """Degree coordinates (x, y) of a cell center for the given eye.

    Rows run superior (+21) to inferior (-21).  The x axis mirrors between
    eyes so that the blind-spot cell lands at temporal +/-15 degrees.
    """
    row, col = cell
    y = 21.0 - 6.0 * row
    if eye == RIGHT:
        x = 6.0 * col - 27.0
    elif eye == LEFT:
        x = 6.0 * col - 21.0
    else:
        raise DomainError(f"unknown eye {eye!r}")
    return x, y


def eccentricity(cell: Cell, eye: str) -> float:
    """Distance of a cell center from fixation, in degrees."""
    x, y = cell_degrees(cell, eye)
    return float(np.hypot(x, y))


@dataclass
class VisualField:
    """One 24-2 test: 54 dB values plus the clinical context of the test."""

    patient_id: str
    eye: str
    gender: str
    age_years: float
    test_date: date
    test_index: int
    values: dict[Cell, float]

    def to_grid(self) -> np.ndarray:
        """(8, 9) float64 grid; unmeasured cells are 0.0."""
        grid = np.zeros((GRID_ROWS, GRID_COLS), dtype=np.float64)
        for cell, v in self.values.items():
            grid[cell] = v
        return grid

    def values_row_major(self) -> list[float]:
        return [self.values[c] for c in mask_cells()]


@dataclass
class NormativeSurface:
    """Expected normal sensitivity per valid cell, for one age and eye."""

    expected: dict[Cell, float]


def validate_field(f: VisualField) -> list[str]:
    """Return a list of violation messages; empty means the field is valid."""
    violations = []
    if not isinstance(f.patient_id, str) or not f.patient_id:
        violations.append("patient_id must be a nonempty string")
    if f.eye not in EYES:
        violations.append(f"eye {f.eye!r} not in {EYES}")
    if f.gender not in GENDERS:
        violations.append(f"gender {f.gender!r} not in {GENDERS}")
    if not (isinstance(f.age_years, (int, float)) and f.age_years >= 0):
        violations.append(f"age_years {f.age_years!r} must be >= 0")
    if not (isinstance(f.test_index, int) and f.test_index >= 1):
        violations.append(f"test_index {f.test_index!r} must be an integer >= 1")

    expected_cells = set(mask_cells())
    got_cells = set(f.values)
    for cell in sorted(expected_cells - got_cells):
        violations.append(f"missing cell {cell}")
    for cell in sorted(got_cells - expected_cells):
        violations.append(f"unexpected cell {cell}")
    for cell in sorted(got_cells & expected_cells):
        v = f.values[cell]
        if not np.isfinite(v) or not (DB_MIN <= v <= DB_MAX):
            violations.append(f"value {v!r} at {cell} out of range [{DB_MIN:g}, {DB_MAX:g}]")
        elif round(v, 2) != v:
            violations.append(f"value {v!r} at {cell} not stored to two decimals")
    return violations


def mean_deviation(f: VisualField, normative: NormativeSurface) -> float:
    """Unweighted mean of (measured - expected) over the 52 non-blind cells."""
    return mean_deviation_values(f.values, normative, f.eye)


def mean_deviation_values(
    values: dict[Cell, float], normative: NormativeSurface, eye: str
) -> float:
    """mean_deviation on a bare cell->dB map (no record validation)."""
    mask = build_mask(eye)
    total = 0.0
    for cell in mask.md_cells():
        if cell not in normative.expected:
            raise DomainError(f"normative incomplete: missing cell {cell}")
        total += values[cell] - normative.expected[cell]
    return total / NUM_MD_CELLS


def parse_record(line: str) -> VisualField:
    """Parse one JSON-line dataset record into a validated VisualField."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise RecordError(f"malformed JSON: {e}") from e
    if not isinstance(obj, dict):
        raise RecordError("record is not a JSON object")

    for key in ("patient_id", "eye", "gender", "age", "test_date", "test_index", "values"):
        if key not in obj:
            raise RecordError(f"missing key {key!r}")

    eye_wire = obj["eye"]
    if eye_wire not in EYE_FROM_WIRE:
        raise RecordError(f"bad value for key 'eye': {eye_wire!r} (expected OD or OS)")
    vals = obj["values"]
    if not isinstance(vals, list) or len(vals) != NUM_VALID_CELLS:
        n = len(vals) if isinstance(vals, list) else "non-list"
        raise RecordError(f"values length {n} != {NUM_VALID_CELLS}")
    try:
        test_date = date.fromisoformat(obj["test_date"])
    except (TypeError, ValueError) as e:
        raise RecordError(f"bad value for key 'test_date': {obj['test_date']!r}") from e
    if not isinstance(obj["test_index"], int):
        raise RecordError(f"bad value for key 'test_index': {obj['test_index']!r}")

    field = VisualField(
        patient_id=obj["patient_id"],
        eye=EYE_FROM_WIRE[eye_wire],
        gender=obj["gender"],
        age_years=float(obj["age"]),
        test_date=test_date,
        test_index=obj["test_index"],
        values={cell: float(v) for cell, v in zip(mask_cells(), vals)},
    )
    violations = validate_field(field)
    if violations:
        raise RecordError("invalid record: " + "; ".join(violations))
    return field


def serialize_record(f: VisualField) -> str:
    """One JSON line per the dataset schema; dB values printed with 2 decimals."""
    violations = validate_field(f)
    if violations:
        raise DomainError("refusing to serialize invalid field: " + "; ".join(violations))
    values = ", ".join(f"{f.values[c]:.2f}" for c in mask_cells())
    parts = [
        f'"patient_id": {json.dumps(f.patient_id)}',
        f'"eye": {json.dumps(EYE_TO_WIRE[f.eye])}',
        f'"gender": {json.dumps(f.gender)}',
        f'"age": {json.dumps(f.age_years)}',
        f'"test_date": {json.dumps(f.test_date.isoformat())}',
        f'"test_index": {f.test_index}',
        f'"values": [{values}]',
    ]
    return "{" + ", ".join(parts) + "}"


def load_dataset(path) -> list[VisualField]:
    """Read a JSON-lines dataset file. Raises RecordError with line context."""
    fields = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                fields.append(parse_record(line))
            except RecordError as e:
                raise RecordError(f"line {lineno}: {e}") from e
    return fields


def save_dataset(fields, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields:
            fh.write(serialize_record(f) + "\n")
