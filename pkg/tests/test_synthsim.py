"""Simulator tests: normative surface, archetypes, noise, reproducibility."""

import io
import math

import numpy as np
import pytest

from hvfcast import synthsim
from hvfcast.domain import (
    LEFT,
    RIGHT,
    mask_cells,
    mean_deviation,
    serialize_record,
    validate_field,
)
from hvfcast.synthsim import (
    ARCHETYPES,
    CohortConfig,
    SimError,
    add_noise,
    generate_cohort,
    noise_sd,
    normative_sensitivity,
    normative_surface,
    progress_field,
)


class TestNormative:
    def test_reference_cell_at_reference_age(self):
        # cell (3, 5) sits at (3, 3) degrees for a right eye: ecc = sqrt(18)
        got = normative_sensitivity(45.0, (3, 5), RIGHT)
        assert got == pytest.approx(34.0 - 0.15 * math.sqrt(18), abs=1e-12)
        assert round(got, 2) == 33.36

    def test_aging_slope(self):
        young = normative_sensitivity(45.0, (3, 5), RIGHT)
        old = normative_sensitivity(95.0, (3, 5), RIGHT)
        assert young - old == pytest.approx(3.0, abs=1e-12)

    def test_clamped_to_0_40(self):
        for age in (0.0, 45.0, 300.0):
            for cell in mask_cells():
                v = normative_sensitivity(age, cell, LEFT)
                assert 0.0 <= v <= 40.0

    def test_surface_covers_mask(self):
        surf = normative_surface(60.0, RIGHT)
        assert set(surf.expected) == set(mask_cells())


class TestArchetypes:
    def test_all_seven_present(self):
        assert set(ARCHETYPES) == set(synthsim.ARCHETYPE_NAMES)

    def test_affected_cells_are_valid(self):
        valid = set(mask_cells())
        for arch in ARCHETYPES.values():
            for eye in (RIGHT, LEFT):
                cells = [c for c, _ in arch.affected(eye)]
                assert set(cells) <= valid
                assert len(set(cells)) == len(cells)

    def test_hemianopia_never_progresses(self):
        arch = ARCHETYPES["stable_hemianopia"]
        for eye in (RIGHT, LEFT):
            assert all(mult == 0.0 for _, mult in arch.affected(eye))
        assert arch.depth_db > 0

    def test_normal_is_empty(self):
        assert ARCHETYPES["normal"].affected(RIGHT) == ()


class TestProgression:
    def test_t_zero_is_baseline(self):
        baseline = {c: 30.0 for c in mask_cells()}
        out = progress_field(baseline, ARCHETYPES["superior_arcuate"], RIGHT, 1.0, 0.0)
        assert out == baseline

    def test_linear_decay(self):
        baseline = {c: 30.0 for c in mask_cells()}
        arch = ARCHETYPES["diffuse"]  # multiplier 1 everywhere
        out = progress_field(baseline, arch, RIGHT, 1.5, 2.0)
        for c in mask_cells():
            assert out[c] == pytest.approx(27.0, abs=1e-12)

    def test_stable_defect_constant_in_time(self):
        baseline = {c: 25.0 for c in mask_cells()}
        arch = ARCHETYPES["stable_hemianopia"]
        early = progress_field(baseline, arch, RIGHT, 1.0, 0.5)
        late = progress_field(baseline, arch, RIGHT, 1.0, 5.0)
        assert early == late == baseline

    def test_unaffected_cells_unchanged(self):
        baseline = {c: 30.0 for c in mask_cells()}
        arch = ARCHETYPES["paracentral"]
        out = progress_field(baseline, arch, RIGHT, 2.0, 3.0)
        affected = {c for c, _ in arch.affected(RIGHT)}
        for c in mask_cells():
            if c not in affected:
                assert out[c] == 30.0

    def test_clamped_at_zero(self):
        baseline = {c: 1.0 for c in mask_cells()}
        out = progress_field(baseline, ARCHETYPES["diffuse"], RIGHT, 3.0, 5.0)
        assert all(v == 0.0 for v in out.values())


class TestNoise:
    def test_sd_formula(self):
        assert noise_sd(np.array([34.0]))[0] == 1.0
        assert noise_sd(np.array([0.0]))[0] == pytest.approx(5.08, abs=1e-12)
        assert noise_sd(np.array([40.0]))[0] == 1.0  # floor

    def test_sample_sd_matches_formula(self):
        rng = np.random.default_rng(99)
        value = 25.0
        draws = add_noise(np.full(10_000, value), rng)
        assert draws.std(ddof=1) == pytest.approx(noise_sd(np.array([value]))[0], rel=0.10)

    def test_output_clamped_and_rounded(self):
        rng = np.random.default_rng(100)
        out = add_noise(np.full(1000, 1.0), rng)
        assert out.min() >= 0.0 and out.max() <= 50.0
        assert np.all(out == np.round(out, 2))

    def test_dict_form(self):
        rng = np.random.default_rng(101)
        values = {c: 20.0 for c in mask_cells()}
        out = add_noise(values, rng)
        assert set(out) == set(values)
        assert all(v == round(v, 2) for v in out.values())


class TestGenerateCohort:
    def test_reproducible_byte_for_byte(self):
        cfg = CohortConfig(patients=12, seed=7, tests_per_eye=(2, 4))
        a, _ = generate_cohort(cfg)
        b, _ = generate_cohort(CohortConfig(patients=12, seed=7, tests_per_eye=(2, 4)))
        assert serialize(a) == serialize(b)
        c, _ = generate_cohort(CohortConfig(patients=12, seed=8, tests_per_eye=(2, 4)))
        assert serialize(a) != serialize(c)

    def test_every_field_validates(self, small_cohort):
        _, fields, _ = small_cohort
        for f in fields:
            assert validate_field(f) == []

    def test_noiseless_normal_eye_matches_normative(self):
        cfg = CohortConfig(
            patients=6, archetype_mix={"normal": 1.0}, noise=False, seed=5, tests_per_eye=(2, 3)
        )
        fields, _ = generate_cohort(cfg)
        for f in fields:
            surf = normative_surface(f.age_years, f.eye)
            for c in mask_cells():
                assert f.values[c] == pytest.approx(surf.expected[c], abs=0.005 + 1e-12)
            assert abs(mean_deviation(f, surf)) <= 0.01

    def test_noiseless_progressive_series_monotone(self):
        cfg = CohortConfig(
            patients=10,
            archetype_mix={"diffuse": 0.4, "superior_arcuate": 0.6},
            noise=False,
            seed=6,
            tests_per_eye=(3, 5),
        )
        fields, _ = generate_cohort(cfg)
        by_eye = {}
        for f in fields:
            by_eye.setdefault((f.patient_id, f.eye), []).append(f)
        for series in by_eye.values():
            series.sort(key=lambda f: f.test_date)
            for a, b in zip(series, series[1:]):
                for c in mask_cells():
                    assert b.values[c] <= a.values[c] + 1e-9

    def test_test_index_strictly_increasing_with_date(self, small_cohort):
        _, fields, _ = small_cohort
        by_patient = {}
        for f in fields:
            by_patient.setdefault(f.patient_id, []).append(f)
        for series in by_patient.values():
            series.sort(key=lambda f: f.test_index)
            assert [f.test_index for f in series] == list(range(1, len(series) + 1))
            dates = [f.test_date for f in series]
            assert all(a < b for a, b in zip(dates, dates[1:]))

    def test_meta_records_ground_truth(self, small_cohort):
        cfg, fields, meta = small_cohort
        assert meta["config"]["seed"] == cfg.seed
        assert len(meta["patients"]) == cfg.patients
        patient_ids = {f.patient_id for f in fields}
        for entry in meta["patients"]:
            assert entry["patient_id"] in patient_ids
            for eye_info in entry["eyes"].values():
                assert eye_info["archetype"] in ARCHETYPES
                assert eye_info["rate_db_per_year"] >= 0

    def test_bad_config_rejected(self):
        with pytest.raises(SimError):
            CohortConfig(patients=0).validate()
        with pytest.raises(SimError):
            CohortConfig(archetype_mix={"unknown": 1.0}).validate()
        with pytest.raises(SimError):
            CohortConfig(archetype_mix={"normal": 0.0}).validate()
        with pytest.raises(SimError):
            CohortConfig(tests_per_eye=(3, 2)).validate()


def serialize(fields) -> str:
    buf = io.StringIO()
    for f in fields:
        buf.write(serialize_record(f) + "\n")
    return buf.getvalue()
