import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covcaps.data import (
    ClinicalFeatures,
    PatientRecord,
    PhantomConfig,
    area_resize,
    area_weights,
    generate_phantom,
    load_dataset,
    load_patient,
    preprocess_record,
    preprocess_slice,
    write_dataset,
)
from covcaps.errors import ConfigurationError, DataError


def _clinical(**kw):
    base = dict(sex="female", age=40.0, weight=70.0)
    base.update(kw)
    return ClinicalFeatures(**base)


def _record(pid="p1", label="normal", n=2, side=4, **kw):
    rng = np.random.default_rng(0)
    return PatientRecord(pid, label, _clinical(), rng.random((n, side, side)),
                         np.ones((n, side, side), np.uint8), **kw)


class TestClinicalFeatures:
    def test_raw_vector_order(self):
        c = _clinical(sex="male", age=61.0, weight=80.0, fever=True, fatigue=True)
        np.testing.assert_array_equal(c.raw_vector(), [1, 61, 80, 0, 1, 0, 0, 1])

    def test_round_trip(self):
        c = _clinical(cough=True)
        assert ClinicalFeatures.from_dict(c.to_dict()) == c

    @pytest.mark.parametrize("bad", [dict(sex="x"), dict(age=-1.0), dict(weight=0.0)])
    def test_validation(self, bad):
        with pytest.raises(DataError):
            _clinical(**bad)

    def test_unknown_field(self):
        with pytest.raises(DataError, match="unknown"):
            ClinicalFeatures.from_dict({"sex": "male", "age": 1, "weight": 2, "smoker": True})


class TestPatientRecord:
    def test_mask_shape_mismatch_names_both(self):
        with pytest.raises(DataError, match=r"2 slices.*3 masks"):
            PatientRecord("p", "covid", _clinical(), np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))

    def test_non_binary_mask(self):
        with pytest.raises(DataError):
            PatientRecord("p", "covid", _clinical(), np.zeros((1, 4, 4)), np.full((1, 4, 4), 2))

    def test_severity_only_for_covid(self):
        with pytest.raises(DataError):
            _record(label="cap", severity=2)

    def test_label_index(self):
        assert [_record(label=x).label_index for x in ("covid", "cap", "normal")] == [0, 1, 2]


class TestDiskFormat:
    def test_round_trip(self, tmp_path):
        recs = [_record("a", "covid", severity=3, infected=[True, False]), _record("b")]
        write_dataset(recs, tmp_path)
        assert load_dataset(tmp_path) == recs

    def test_raw_layout_is_little_endian_float32(self, tmp_path):
        rec = _record("a", side=3)
        write_dataset([rec], tmp_path)
        raw = (tmp_path / "a" / "slice_1.raw").read_bytes()
        np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(3, 3), rec.slices[1])

    def test_empty_manifest(self, tmp_path):
        write_dataset([], tmp_path)
        assert load_dataset(tmp_path) == []

    def test_missing_mask_file_names_path(self, tmp_path):
        write_dataset([_record("a")], tmp_path)
        (tmp_path / "a" / "mask_1.raw").unlink()
        with pytest.raises(DataError, match="a"):
            load_dataset(tmp_path)

    def test_truncated_slice(self, tmp_path):
        write_dataset([_record("a")], tmp_path)
        path = tmp_path / "a" / "slice_0.raw"
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(DataError, match="slice_0.raw"):
            load_patient(tmp_path / "a")

    def test_unknown_meta_field(self, tmp_path):
        write_dataset([_record("a")], tmp_path)
        meta = json.loads((tmp_path / "a" / "meta.json").read_text())
        meta["extra"] = 1
        (tmp_path / "a" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(DataError, match="extra"):
            load_patient(tmp_path / "a")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            load_dataset(tmp_path)


class TestPreprocessing:
    def test_integer_factor_is_block_mean(self, rng):
        g = rng.random((8, 8))
        np.testing.assert_allclose(area_resize(g, 4), g.reshape(4, 2, 4, 2).mean(axis=(1, 3)))

    def test_area_weights_rows_sum_to_one(self):
        np.testing.assert_allclose(area_weights(7, 3).sum(axis=1), 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_area_resize_preserves_mean(self, src, dst, seed):
        g = np.random.default_rng(seed).random((src, src))
        assert area_resize(g, dst).mean() == pytest.approx(g.mean())

    def test_mask_and_rescale(self):
        grid = np.array([[5.0, 1.0], [3.0, 100.0]])
        mask = np.array([[1, 1], [1, 0]])
        np.testing.assert_allclose(preprocess_slice(grid, mask, 2), [[1.0, 0.0], [0.5, 0.0]])

    def test_constant_lung_maps_to_zero(self):
        out = preprocess_slice(np.full((2, 2), 7.0), np.ones((2, 2), int), 2)
        np.testing.assert_array_equal(out, 0)

    def test_range_after_resize(self, tiny_phantom):
        x = preprocess_record(tiny_phantom.records[0], 16)
        assert x.shape == (10, 16, 16)
        assert x.min() >= 0 and x.max() <= 1

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            preprocess_slice(np.zeros((2, 2)), np.zeros((3, 3)), 2)


class TestPhantom:
    def test_deterministic(self):
        cfg = PhantomConfig(patients_per_class=2, slices_per_patient=10, side=32,
                            blob_sigma=(1.0, 2.0), consolidation_radius=(3.0, 4.0))
        a, b = generate_phantom(cfg), generate_phantom(cfg)
        assert a.records == b.records

    def test_seed_changes_data(self, tiny_phantom):
        other = generate_phantom(PhantomConfig(**{**tiny_phantom.config.__dict__, "seed": 5}))
        assert other.records != tiny_phantom.records

    def test_class_balance_and_labels(self, tiny_phantom):
        labels = [r.label for r in tiny_phantom.records]
        assert sorted(labels) == sorted(["covid", "cap", "normal"] * 2)
        for r in tiny_phantom.records:
            if r.label == "normal":
                assert not r.infected.any() and r.severity is None
            else:
                assert r.infected.sum() >= tiny_phantom.config.candidate_count
            if r.label == "covid":
                assert 1 <= r.severity <= 4

    def test_lesions_only_on_infected_slices(self, tiny_phantom):
        for r in tiny_phantom.records:
            lesion = tiny_phantom.lesions[r.id]
            np.testing.assert_array_equal(lesion.any(axis=(1, 2)), r.infected)
            assert not (lesion & (r.masks == 0)).any()

    def test_lesions_are_brighter_than_lung(self, tiny_phantom):
        for r in tiny_phantom.records:
            lesion = tiny_phantom.lesions[r.id]
            if lesion.any():
                lung_only = (r.masks == 1) & ~lesion
                assert r.slices[lesion].mean() > r.slices[lung_only].mean() + 0.1

    def test_subtle_fraction(self):
        cfg = PhantomConfig(patients_per_class=10, slices_per_patient=10, side=32,
                            blob_sigma=(1.0, 2.0), consolidation_radius=(3.0, 4.0),
                            subtle_fraction=0.3)
        ds = generate_phantom(cfg)
        few = [r for r in ds.records if r.label == "covid" and r.infected.sum() <= 2]
        assert len(few) == 3
        assert all(r.severity == 1 for r in few)

    def test_clinical_signal_direction(self):
        ds = generate_phantom(PhantomConfig(patients_per_class=60, slices_per_patient=10,
                                            side=32, blob_sigma=(1.0, 2.0),
                                            consolidation_radius=(3.0, 4.0),
                                            clinical_strength=1.0))
        age = {c: np.mean([r.clinical.age for r in ds.records if r.label == c])
               for c in ("covid", "cap", "normal")}
        assert age["cap"] > age["covid"] > age["normal"]

    def test_writes_to_disk(self, tmp_path, tiny_phantom):
        generate_phantom(tiny_phantom.config, tmp_path)
        assert load_dataset(tmp_path) == tiny_phantom.records

    @pytest.mark.parametrize("kw", [dict(side=16), dict(slices_per_patient=5),
                                    dict(subtle_fraction=1.5), dict(blob_sigma=(3.0, 1.0)),
                                    dict(patients_per_class=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            PhantomConfig(**kw)
