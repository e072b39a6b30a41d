import statistics
import struct

import numpy as np
import pytest

from milkit.datasets import (
    DISCARD,
    BagFormatError,
    Manifest,
    ManifestRow,
    MedianThreshold,
    SplitPlan,
    TertileThreshold,
    binarize_median,
    binarize_tertile,
    quantile,
    read_bag,
    read_manifest,
    stratified_split,
    subsample_bag,
    synth_generate,
    write_bag,
    write_dataset,
    write_manifest,
)
from milkit.mil import TileBag


def manifest_of(labels, wsis_per_patient=1):
    rows = [ManifestRow(f"p{i:03d}", f"p{i:03d}_{j}", f"bags/p{i:03d}_{j}.bin", None, y)
            for i, y in enumerate(labels) for j in range(wsis_per_patient)]
    return Manifest(rows)


class TestBagIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        bag = TileBag("p", "w", rng.normal(size=(7, 13)))
        write_bag(bag, tmp_path / "b.bin")
        back = read_bag(tmp_path / "b.bin", "p", "w")
        np.testing.assert_array_equal(back.features, bag.features.astype(np.float32).astype(np.float64))

    def test_layout(self, tmp_path):
        bag = TileBag("p", "w", np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        write_bag(bag, tmp_path / "b.bin")
        buf = (tmp_path / "b.bin").read_bytes()
        assert buf[:4] == b"SMLB"
        assert struct.unpack_from("<HII", buf, 4) == (1, 2, 3)
        # tile-major: tile 0 = (1, 4), tile 1 = (2, 5), ...
        np.testing.assert_array_equal(np.frombuffer(buf[14:], "<f4"), [1, 4, 2, 5, 3, 6])

    def test_padding_not_written(self, tmp_path):
        feats = np.zeros((2, 5))
        feats[:, :3] = 1
        write_bag(TileBag("p", "w", feats, real_tile_count=3), tmp_path / "b.bin")
        assert read_bag(tmp_path / "b.bin").real_tile_count == 3

    def test_bad_magic(self, tmp_path):
        write_bag(TileBag("p", "w", np.ones((2, 2))), tmp_path / "b.bin")
        buf = bytearray((tmp_path / "b.bin").read_bytes())
        buf[0:4] = b"XXXX"
        (tmp_path / "b.bin").write_bytes(bytes(buf))
        with pytest.raises(BagFormatError, match="magic"):
            read_bag(tmp_path / "b.bin")

    def test_truncated(self, tmp_path):
        write_bag(TileBag("p", "w", np.ones((2, 2))), tmp_path / "b.bin")
        (tmp_path / "b.bin").write_bytes((tmp_path / "b.bin").read_bytes()[:-1])
        with pytest.raises(BagFormatError):
            read_bag(tmp_path / "b.bin")

    def test_empty_rejected(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"SMLB" + struct.pack("<HII", 1, 4, 0))
        with pytest.raises(BagFormatError, match="no tiles"):
            read_bag(tmp_path / "b.bin")

    def test_dimension_overflow(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"SMLB" + struct.pack("<HII", 1, 0xFFFFFFFF, 0xFFFFFFFF))
        with pytest.raises(BagFormatError, match="range"):
            read_bag(tmp_path / "b.bin")


class TestManifest:
    def test_roundtrip(self, tmp_path):
        m = Manifest([ManifestRow("a", "a1", "bags/a1.bin", 30, 1), ManifestRow("a", "a2", "bags/a2.bin", 30, 1),
                      ManifestRow("b", "b1", "bags/b1.bin", None, None)])
        write_manifest(m, tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "patient_id,wsi_id,bag_path,raw_score,label"
        back = read_manifest(tmp_path / "m.csv")
        assert back.rows == m.rows and back.patients == ["a", "b"]
        assert back.resolve(back.rows[0]) == tmp_path / "bags/a1.bin"

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            Manifest([ManifestRow("a", "a1", "x"), ManifestRow("a", "a1", "y")])

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("patient,wsi\n")
        with pytest.raises(ValueError):
            read_manifest(tmp_path / "m.csv")


class TestBinarize:
    def test_median_example(self):
        assert MedianThreshold.fit([0, 10, 20, 30]).median == 15
        np.testing.assert_array_equal(binarize_median([0, 10, 20, 30]), [0, 0, 1, 1])

    def test_median_strict(self):
        np.testing.assert_array_equal(binarize_median([21, 21, 21]), [0, 0, 0])
        np.testing.assert_array_equal(MedianThreshold(21).apply([20, 21, 22]), [0, 0, 1])

    def test_tertile_one_to_nine(self):
        labels = binarize_tertile(range(1, 10))
        np.testing.assert_array_equal(labels, [0, 0, 0, DISCARD, DISCARD, DISCARD, 1, 1, 1])

    def test_tertile_all_equal(self):
        np.testing.assert_array_equal(binarize_tertile([5, 5, 5, 5]), [1, 1, 1, 1])

    def test_tertile_discard_fraction(self):
        scores = np.random.default_rng(0).random(10000)
        assert abs(np.mean(binarize_tertile(scores) == DISCARD) - 1 / 3) < 0.02

    def test_discard_iff_strictly_between(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            s = rng.integers(0, 50, size=int(rng.integers(3, 40)))
            thr = TertileThreshold.fit(s)
            out = thr.apply(s)
            between = (s > thr.lower) & (s < thr.upper)
            np.testing.assert_array_equal(out == DISCARD, between)

    def test_quantile_matches_statistics(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            s = rng.integers(0, 100, size=int(rng.integers(2, 30))).tolist()
            cuts = statistics.quantiles(s, n=100, method="inclusive")
            assert quantile(s, 0.33) == pytest.approx(cuts[32], abs=1e-9)
            assert quantile(s, 0.66) == pytest.approx(cuts[65], abs=1e-9)
            assert quantile(s, 0.5) == pytest.approx(statistics.median(s), abs=1e-12)

    def test_thresholds_fit_on_train_only(self):
        thr = MedianThreshold.fit([1, 2, 3, 4])
        np.testing.assert_array_equal(thr.apply([100, 0]), [1, 0])

    def test_empty(self):
        with pytest.raises(ValueError):
            binarize_median([])
        with pytest.raises(ValueError):
            binarize_tertile([])


class TestSplit:
    def test_balanced_folds(self):
        labels = [i % 2 for i in range(20)]
        plan = stratified_split(manifest_of(labels), test_fraction=0.0, k=5, seed=0)
        assert plan.test_patients == []
        lab = {f"p{i:03d}": y for i, y in enumerate(labels)}
        for train, val in plan.folds:
            assert len(val) == 4 and sum(lab[p] for p in val) == 2
            assert len(train) == 16

    def test_test_size(self):
        rng = np.random.default_rng(0)
        plan = stratified_split(manifest_of(rng.integers(0, 2, 940).tolist()), 0.25, 5, seed=1)
        assert abs(len(plan.test_patients) - 235) <= 3

    def test_invariants(self):
        rng = np.random.default_rng(1)
        m = manifest_of(rng.integers(0, 2, 57).tolist(), wsis_per_patient=2)
        plan = stratified_split(m, 0.25, 5, seed=3)
        everyone = set(m.patients)
        test = set(plan.test_patients)
        for train, val in plan.folds:
            assert not (set(train) & set(val))
            assert not ((set(train) | set(val)) & test)
            assert set(train) | set(val) == everyone - test
        vals = [p for _, v in plan.folds for p in v]
        assert sorted(vals) == sorted(everyone - test)

    def test_stratified_proportions(self):
        labels = [1] * 30 + [0] * 70
        plan = stratified_split(manifest_of(labels), 0.2, 5, seed=0)
        lab = {f"p{i:03d}": y for i, y in enumerate(labels)}
        assert sum(lab[p] for p in plan.test_patients) == 6

    def test_deterministic(self):
        m = manifest_of([i % 2 for i in range(30)])
        assert stratified_split(m, 0.25, 3, seed=5) == stratified_split(m, 0.25, 3, seed=5)
        assert stratified_split(m, 0.25, 3, seed=5) != stratified_split(m, 0.25, 3, seed=6)

    def test_small_stratum(self):
        with pytest.raises(ValueError, match="fewer than k"):
            stratified_split(manifest_of([1, 1, 0, 0, 0, 0, 0, 0]), 0.0, 3)

    def test_json_roundtrip(self, tmp_path):
        plan = stratified_split(manifest_of([i % 2 for i in range(20)]), 0.25, 2, seed=0)
        plan.save(tmp_path / "s.json")
        assert SplitPlan.load(tmp_path / "s.json") == plan

    def test_leak_detected(self):
        with pytest.raises(ValueError):
            SplitPlan(["a"], [(["a", "b"], ["c"])]).validate()


class TestSubsample:
    def test_large_bag(self):
        rng = np.random.default_rng(0)
        bag = TileBag("p", "slide-7", rng.normal(size=(3, 800)))
        sub = subsample_bag(bag, 500, seed=1)
        assert sub.real_tile_count == 500
        cols = {tuple(c) for c in bag.features.T}
        assert all(tuple(c) in cols for c in sub.features.T)
        assert len({tuple(c) for c in sub.features.T}) == 500

    def test_small_bag_unchanged(self):
        bag = TileBag("p", "w", np.ones((3, 300)))
        assert subsample_bag(bag, 500) is bag

    def test_fixed(self):
        rng = np.random.default_rng(1)
        bag = TileBag("p", "slide-7", rng.normal(size=(3, 800)))
        a = subsample_bag(bag, 500, seed=4)
        b = subsample_bag(TileBag("q", "slide-7", bag.features.copy()), 500, seed=4)
        np.testing.assert_array_equal(a.features, b.features)
        c = subsample_bag(TileBag("p", "slide-8", bag.features.copy()), 500, seed=4)
        assert not np.array_equal(a.features, c.features)


class TestSynth:
    def test_variance_task_noise_free(self):
        bags, labels, truth = synth_generate("variance_signal", 40, (10, 30), 4, noise=0.0, seed=0, variance_ratio=4.0)
        means = np.array([b.real_features[0].mean() for b in bags])
        assert np.max(np.abs(means)) < 1e-9
        var = np.array([b.real_features[0].var() for b in bags])
        np.testing.assert_allclose(var[labels == 1], 4.0, rtol=1e-9)
        np.testing.assert_allclose(var[labels == 0], 1.0, rtol=1e-9)

    def test_mean_task_noise_free(self):
        bags, labels, _ = synth_generate("mean_signal", 40, (10, 30), 4, noise=0.0, seed=0)
        means = np.array([b.real_features[0].mean() for b in bags])
        assert means[labels == 1].min() > means[labels == 0].max()

    def test_balance_and_shape(self):
        bags, labels, truth = synth_generate("mean_signal", 50, (5, 9), 6, seed=3)
        assert labels.sum() == 25
        assert all(b.dim == 6 and 5 <= b.real_tile_count <= 9 for b in bags)
        assert [t.label for t in truth] == labels.tolist()

    def test_deterministic(self):
        a = synth_generate("variance_signal", 10, (5, 9), 3, seed=7)
        b = synth_generate("variance_signal", 10, (5, 9), 3, seed=7)
        for x, y in zip(a[0], b[0]):
            np.testing.assert_array_equal(x.features, y.features)

    def test_bad_task(self):
        with pytest.raises(ValueError):
            synth_generate("median_signal")

    def test_write_dataset(self, tmp_path):
        bags, labels, _ = synth_generate("mean_signal", 6, (3, 5), 2, seed=0)
        m = write_dataset(tmp_path, bags, labels)
        back = read_manifest(tmp_path / "manifest.csv")
        assert [r.label for r in back.rows] == labels.tolist()
        np.testing.assert_allclose(back.load_bag(back.rows[0]).features, bags[0].features, rtol=1e-6)
        assert m.rows == back.rows
