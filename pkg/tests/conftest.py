"""Shared fixtures and small data builders for the test suite."""

from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pytest

from hvfcast.domain import GENDERS, RIGHT, VisualField, mask_cells
from hvfcast import synthsim


def random_values(rng: np.random.Generator) -> dict:
    """54 valid two-decimal dB values."""
    return {c: float(rng.integers(0, 5001)) / 100.0 for c in mask_cells()}


def make_field(
    rng: np.random.Generator | None = None,
    patient_id: str = "P0001",
    eye: str = RIGHT,
    gender: str = "F",
    age_years: float = 60.0,
    test_date: date = date(2015, 3, 2),
    test_index: int = 1,
    values: dict | None = None,
) -> VisualField:
    if values is None:
        values = random_values(rng or np.random.default_rng(0))
    return VisualField(
        patient_id=patient_id,
        eye=eye,
        gender=gender,
        age_years=age_years,
        test_date=test_date,
        test_index=test_index,
        values=values,
    )


def make_series(rng: np.random.Generator, patient_id: str, eye: str, year_offsets) -> list[VisualField]:
    """One eye's series with tests at the given year offsets from a base date."""
    base = date(2012, 5, 14)
    gender = GENDERS[int(rng.integers(0, 2))]
    fields = []
    for i, off in enumerate(sorted(year_offsets), start=1):
        fields.append(
            make_field(
                rng,
                patient_id=patient_id,
                eye=eye,
                gender=gender,
                age_years=55.0 + off,
                test_date=base + timedelta(days=int(round(off * 365.25))),
                test_index=i,
            )
        )
    return fields


@pytest.fixture(scope="session")
def small_cohort():
    """Noisy 36-patient cohort whose 1.0-year bin covers every fold of the
    seed-17 split (the selection phases require that)."""
    cfg = synthsim.CohortConfig(
        patients=36,
        tests_per_eye=(3, 6),
        followup_years=(1.5, 5.4),
        noise=True,
        seed=424242,
    )
    fields, meta = synthsim.generate_cohort(cfg)
    return cfg, fields, meta
