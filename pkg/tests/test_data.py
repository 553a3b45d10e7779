import numpy as np
import pytest

from structseg import data as D
from structseg.errors import InvalidInput, ShapeError


class TestGenerateSyntheticVolume:
    def test_deterministic(self):
        a = D.generate_synthetic_volume(42, 3, (6, 48, 48))
        b = D.generate_synthetic_volume(42, 3, (6, 48, 48))
        assert np.array_equal(a.intensities, b.intensities)
        assert np.array_equal(a.labels, b.labels)

    def test_labels_bounded(self):
        vol = D.generate_synthetic_volume(1, 4, (6, 48, 48))
        assert vol.labels.min() >= 0
        assert vol.labels.max() <= 4

    def test_class_presence_frequency(self):
        counts = np.zeros(3)
        n = 50
        for seed in range(n):
            labels = D.generate_synthetic_volume(seed, 3, (8, 48, 48)).labels
            for c in range(1, 4):
                counts[c - 1] += (labels == c).any()
        assert (counts / n >= 0.9).all()

    def test_num_classes_validated(self):
        with pytest.raises(InvalidInput):
            D.generate_synthetic_volume(0, 0)
        with pytest.raises(InvalidInput):
            D.generate_synthetic_volume(0, 9)


class TestSliceReassemble:
    def test_slice_count_and_content(self):
        vol = D.generate_synthetic_volume(5, 2, (8, 32, 32))
        slices = D.slice_volume(vol)
        assert len(slices) == 8
        for k, (img, lab) in enumerate(slices):
            assert np.array_equal(img.pixels, vol.intensities[k])
            assert np.array_equal(lab, vol.labels[k])

    def test_round_trip_identity(self):
        vol = D.generate_synthetic_volume(6, 3, (5, 24, 24))
        label_slices = [lab for _, lab in D.slice_volume(vol)]
        out = D.reassemble_volume(label_slices, expected_depth=5)
        assert np.array_equal(out, vol.labels)

    def test_wrong_depth(self):
        with pytest.raises(ShapeError):
            D.reassemble_volume([np.zeros((4, 4))] * 3, expected_depth=5)

    def test_resized_back_to_source(self):
        preds = [np.random.default_rng(k).integers(0, 3, (224, 224)) for k in range(4)]
        out = D.reassemble_volume(preds, 4, slice_shape=(96, 96))
        assert out.shape == (4, 96, 96)
        assert np.issubdtype(out.dtype, np.integer)
        assert set(np.unique(out)) <= {0, 1, 2}

    def test_empty_axis(self):
        vol = D.generate_synthetic_volume(1, 1, (2, 16, 16))
        vol.intensities = vol.intensities[:0]
        vol.labels = vol.labels[:0]
        with pytest.raises(ShapeError):
            D.slice_volume(vol)


class TestMakeSplit:
    def test_80_20(self):
        split = D.make_split([f"v{i}" for i in range(10)], seed=0)
        assert len(split.train_ids) == 8
        assert len(split.val_ids) == 2

    def test_deterministic(self):
        ids = [f"v{i}" for i in range(20)]
        assert D.make_split(ids, 3).train_ids == D.make_split(ids, 3).train_ids

    def test_disjoint_covering(self):
        ids = [f"v{i}" for i in range(13)]
        split = D.make_split(ids, 1)
        assert set(split.train_ids) | set(split.val_ids) == set(ids)
        assert set(split.train_ids) & set(split.val_ids) == set()

    def test_distinct_across_seeds(self):
        ids = [f"v{i}" for i in range(20)]
        trains = {tuple(sorted(D.make_split(ids, s).train_ids)) for s in range(5)}
        assert len(trains) >= 2

    def test_too_few(self):
        with pytest.raises(InvalidInput):
            D.make_split(["only"], 0)


class TestDatasetIO:
    def test_write_load_round_trip(self, tmp_path):
        ds = D.generate_dataset(tmp_path / "ds", num_train=3, num_test=1,
                               num_classes=2, shape=(4, 32, 32), seed=9)
        assert len(ds.ids("train")) == 3
        assert len(ds.ids("test")) == 1
        vol = ds.load(ds.ids("train")[0])
        ref = D.generate_synthetic_volume(9 * 100003 + 0, 2, (4, 32, 32))
        assert np.allclose(vol.intensities, ref.intensities, atol=1e-6)
        assert np.array_equal(vol.labels, ref.labels)

    def test_generation_idempotent(self, tmp_path):
        a = D.generate_dataset(tmp_path / "a", 2, 1, 2, (3, 24, 24), seed=4)
        b = D.generate_dataset(tmp_path / "b", 2, 1, 2, (3, 24, 24), seed=4)
        va = a.load("vol_0000")
        vb = b.load("vol_0000")
        assert np.array_equal(va.intensities, vb.intensities)
        assert np.array_equal(va.labels, vb.labels)

    def test_manifest_schema(self, tmp_path):
        D.generate_dataset(tmp_path / "ds", 2, 1, 2, (3, 24, 24), seed=0)
        import json
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert set(manifest) == {"class_names", "volumes"}
        for entry in manifest["volumes"]:
            assert set(entry) == {"volume_id", "split", "image_path", "label_path"}
