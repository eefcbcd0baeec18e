import itertools
import struct

import numpy as np
import pytest
from scipy import stats

from sparselab.data import (PALETTE, BiasedDatasetSpec, DataFormatError,
                            build_dataset, colorize, glyph_templates, load_dataset,
                            load_idx, make_unbiased_test, save_dataset,
                            synth_glyphs)


def _write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, *images.shape))
        f.write(images.astype(np.uint8).tobytes())


def _write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


class TestIdx:
    def test_roundtrip_two_images(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(2, 28, 28)).astype(np.uint8)
        labels = np.array([3, 7], dtype=np.uint8)
        ip, lp = tmp_path / "img", tmp_path / "lab"
        _write_idx_images(ip, images)
        _write_idx_labels(lp, labels)
        got_images, got_labels = load_idx(ip, lp)
        np.testing.assert_allclose(got_images, images / 255.0, atol=1e-7)
        np.testing.assert_array_equal(got_labels, [3, 7])
        assert got_images.min() >= 0.0 and got_images.max() <= 1.0

    def test_bad_magic_rejected(self, tmp_path):
        ip, lp = tmp_path / "img", tmp_path / "lab"
        with open(ip, "wb") as f:
            f.write(struct.pack(">IIII", 0x00000802, 1, 28, 28))
            f.write(bytes(28 * 28))
        _write_idx_labels(lp, np.array([1], dtype=np.uint8))
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(ip, lp)

    def test_count_mismatch_rejected(self, tmp_path):
        ip, lp = tmp_path / "img", tmp_path / "lab"
        _write_idx_images(ip, np.zeros((3, 28, 28), dtype=np.uint8))
        _write_idx_labels(lp, np.zeros(2, dtype=np.uint8))
        with pytest.raises(DataFormatError, match="mismatch"):
            load_idx(ip, lp)

    def test_truncated_payload_reports_offset(self, tmp_path):
        ip, lp = tmp_path / "img", tmp_path / "lab"
        with open(ip, "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, 2, 28, 28))
            f.write(bytes(28 * 28))  # one image missing
        _write_idx_labels(lp, np.zeros(2, dtype=np.uint8))
        with pytest.raises(DataFormatError, match="offset"):
            load_idx(ip, lp)


class TestGlyphs:
    def test_zero_jitter_equals_template(self):
        images, labels = synth_glyphs(1, seed=0, jitter=0, noise_sigma=0.0)
        templates = glyph_templates()
        for img, lab in zip(images, labels):
            np.testing.assert_array_equal(img, templates[lab])

    def test_templates_pairwise_distinct(self):
        t = glyph_templates().reshape(10, -1)
        for a, b in itertools.combinations(range(10), 2):
            assert (t[a] != t[b]).any()

    def test_same_seed_same_dataset(self):
        a = synth_glyphs(20, seed=5)
        b = synth_glyphs(20, seed=5)
        np.testing.assert_array_equal(a[0], b[0])

    def test_pixel_range(self):
        images, _ = synth_glyphs(30, seed=1)
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_template_matching_oracle(self):
        # the oracle scans the known +-2px jitter range for each template
        images, labels = synth_glyphs(50, seed=2)
        flat = images.reshape(len(images), -1)
        templates = glyph_templates()
        best = np.full(len(images), np.inf)
        preds = np.zeros(len(images), dtype=int)
        for dy, dx in itertools.product(range(-2, 3), repeat=2):
            shifted = np.roll(np.roll(templates, dy, axis=1), dx, axis=2)
            d = ((flat[:, None, :] - shifted.reshape(10, -1)[None]) ** 2).sum(-1)
            m, am = d.min(axis=1), d.argmin(axis=1)
            upd = m < best
            preds[upd] = am[upd]
            best[upd] = m[upd]
        assert (preds == labels).mean() >= 0.99


class TestColorize:
    def _gray(self, n=1000, seed=0):
        return synth_glyphs(n // 10, seed=seed)

    def test_exact_conflicting_count(self):
        gray, labels = self._gray(1000)
        ds = colorize(gray, labels, 0.01, seed=1)
        assert ds.n_conflicting == 10
        assert len(ds) == 1000

    def test_zero_conflicting_rejected(self):
        gray, labels = self._gray(20)
        with pytest.raises(DataFormatError, match="zero"):
            colorize(gray, labels, 0.001, seed=1)

    def test_aligned_color_equals_label_palette(self):
        gray, labels = self._gray(200, seed=3)
        ds = colorize(gray, labels, 0.05, seed=2)
        for i in np.flatnonzero(ds.aligned)[:20]:
            ex = ds[i]
            assert ex.group == "aligned"
            assert ex.bias_attr == ex.label
            fg = gray[i] > 0.1
            np.testing.assert_allclose(
                ex.image[:, fg], gray[i][fg] * PALETTE[ex.label][:, None],
                atol=1e-6)
            np.testing.assert_array_equal(ex.image[:, ~fg], 0.0)

    def test_conflicting_colors_never_match_label(self):
        gray, labels = self._gray(500, seed=4)
        ds = colorize(gray, labels, 0.2, seed=3)
        bad = ~ds.aligned
        assert (ds.colors[bad] != ds.labels[bad]).all()

    def test_label_color_joint_is_diagonal_for_aligned(self):
        gray, labels = self._gray(500, seed=5)
        ds = colorize(gray, labels, 0.01, seed=4)
        joint = np.zeros((10, 10), dtype=int)
        for lab, col in zip(ds.labels[ds.aligned], ds.colors[ds.aligned]):
            joint[lab, col] += 1
        assert np.all(joint == np.diag(np.diag(joint)))

    def test_pixels_stay_in_unit_range(self):
        gray, labels = self._gray(300, seed=6)
        ds = colorize(gray, labels, 0.1, seed=5)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


class TestUnbiasedTest:
    def test_color_marginal_uniform(self):
        gray, labels = synth_glyphs(1000, seed=7)
        ds = make_unbiased_test(gray, labels, seed=6)
        counts = np.bincount(ds.colors, minlength=10)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_full_label_color_coverage(self):
        gray, labels = synth_glyphs(1000, seed=8)
        ds = make_unbiased_test(gray, labels, seed=7)
        joint = np.zeros((10, 10), dtype=int)
        for lab, col in zip(ds.labels, ds.colors):
            joint[lab, col] += 1
        assert (joint > 0).all()

    def test_determinism(self):
        gray, labels = synth_glyphs(50, seed=9)
        a = make_unbiased_test(gray, labels, seed=8)
        b = make_unbiased_test(gray, labels, seed=8)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.colors, b.colors)

    def test_group_tags_consistent(self):
        gray, labels = synth_glyphs(200, seed=10)
        ds = make_unbiased_test(gray, labels, seed=9)
        np.testing.assert_array_equal(ds.aligned, ds.colors == ds.labels)


class TestDatasetAssembly:
    def test_build_is_pure_function_of_spec(self):
        spec = BiasedDatasetSpec(n_train=500, n_test=200, conflict_ratio=0.02,
                                 seed=11)
        a_train, a_test = build_dataset(spec)
        b_train, b_test = build_dataset(spec)
        np.testing.assert_array_equal(a_train.images, b_train.images)
        np.testing.assert_array_equal(a_test.colors, b_test.colors)

    def test_train_conflicting_fraction_exact(self):
        spec = BiasedDatasetSpec(n_train=1000, n_test=100, conflict_ratio=0.013,
                                 seed=12)
        train, _ = build_dataset(spec)
        assert train.n_conflicting == round(0.013 * 1000)

    def test_blob_roundtrip(self, tmp_path):
        spec = BiasedDatasetSpec(n_train=100, n_test=50, conflict_ratio=0.05,
                                 seed=13)
        train, _ = build_dataset(spec)
        path = tmp_path / "train.bin"
        save_dataset(train, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.images, train.images)
        np.testing.assert_array_equal(back.labels, train.labels)
        np.testing.assert_array_equal(back.colors, train.colors)
        np.testing.assert_array_equal(back.aligned, train.aligned)

    def test_blob_rejects_truncation(self, tmp_path):
        spec = BiasedDatasetSpec(n_train=50, n_test=50, conflict_ratio=0.1, seed=1)
        train, _ = build_dataset(spec)
        path = tmp_path / "t.bin"
        save_dataset(train, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(DataFormatError, match="bytes"):
            load_dataset(path)

    def test_idx_source(self, tmp_path):
        rng = np.random.default_rng(3)
        for stem, n in (("train", 200), ("t10k", 100)):
            images = rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8)
            labels = rng.integers(0, 10, size=n).astype(np.uint8)
            _write_idx_images(tmp_path / f"{stem}-images-idx3-ubyte", images)
            _write_idx_labels(tmp_path / f"{stem}-labels-idx1-ubyte", labels)
        spec = BiasedDatasetSpec(source="idx_files", idx_dir=str(tmp_path),
                                 n_train=150, n_test=80, conflict_ratio=0.1,
                                 seed=14)
        train, test = build_dataset(spec)
        assert len(train) == 150 and len(test) == 80
        assert train.images.shape == (150, 3, 28, 28)
