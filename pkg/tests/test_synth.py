import filecmp

import numpy as np
import pytest

from aide import metrics
from aide.core import Quality, SeededRng, ValidationError, load_manifest, load_split
from aide.synth import NoiseParams, SceneParams, build_benchmark, corrupt_label, generate_scene, scene_preset
from conftest import disk


def _trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_trees_equal(a / d, b / d) for d in cmp.common_dirs)


class TestScenes:
    def test_deterministic(self):
        a = generate_scene(scene_preset("A"), SeededRng(4))
        b = generate_scene(scene_preset("A"), SeededRng(4))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        c = generate_scene(scene_preset("A"), SeededRng(5))
        assert not np.array_equal(a[0], c[0])

    def test_plain_scene_is_a_threshold_of_its_mask(self):
        params = scene_preset("A", confounders=0, texture=0.0)
        for seed in range(10):
            image, mask = generate_scene(params, SeededRng(seed))
            assert image.shape == (1, 64, 64) and image.dtype == np.float32
            assert np.array_equal((image[0] > 0.4).astype(np.uint8), mask)

    def test_domain_b_inverts_contrast(self):
        image, mask = generate_scene(scene_preset("B", confounders=0, texture=0.0), SeededRng(0))
        assert image[0][mask == 1].mean() < image[0][mask == 0].mean()

    def test_mask_area_and_range(self):
        params = scene_preset("A", shapes=("disk", "ellipse", "blob"))
        for seed in range(100):
            image, mask = generate_scene(params, SeededRng(seed))
            assert 0 < mask.sum() <= 0.5 * mask.size
            assert image.min() >= 0 and image.max() <= 1

    @pytest.mark.parametrize("size", [16, 32, 128])
    def test_other_sizes(self, size):
        image, mask = generate_scene(scene_preset("A", size=size), SeededRng(0))
        assert image.shape == (1, size, size) and mask.any()

    def test_parameter_validation(self):
        with pytest.raises(ValidationError):
            SceneParams(size=40)
        with pytest.raises(ValidationError):
            SceneParams(shapes=("square",))
        with pytest.raises(ValidationError):
            SceneParams(size=16, radius=(8.0, 15.0))
        with pytest.raises(ValidationError):
            scene_preset("C")


class TestNoise:
    @pytest.mark.parametrize("mode", ["dilate", "erode", "translate", "drop_region", "add_blob"])
    def test_zero_magnitude_is_identity(self, mode):
        truth = disk(32, 16, 16, 6)
        out, achieved = corrupt_label(truth, NoiseParams(mode, 0), SeededRng(0))
        assert np.array_equal(out, truth) and achieved == 1.0

    def test_dilating_a_disk_grows_its_radius(self):
        out, achieved = corrupt_label(disk(40, 20, 20, 10), NoiseParams("dilate", 2), SeededRng(0))
        # pixels within distance 2 of a radius-10 disk form (to the pixel) the radius-12 disk
        assert metrics.dsc(out, disk(40, 20, 20, 12)) >= 0.99
        assert achieved == pytest.approx(2 * disk(40, 20, 20, 10).sum() / (out.sum() + disk(40, 20, 20, 10).sum()))

    def test_erode_and_translate(self):
        truth = disk(32, 16, 16, 6)
        eroded, _ = corrupt_label(truth, NoiseParams("erode", 2), SeededRng(0))
        assert eroded.sum() < truth.sum() and not (eroded & ~truth.astype(bool)).any()
        moved, _ = corrupt_label(truth, NoiseParams("translate", 3), SeededRng(1))
        assert moved.sum() == truth.sum() and not np.array_equal(moved, truth)

    def test_drop_region_covering_everything(self):
        out, achieved = corrupt_label(disk(16, 8, 8, 3), NoiseParams("drop_region", 16), SeededRng(0))
        assert out.sum() == 0 and achieved == 0.0

    def test_add_blob_only_adds(self):
        truth = disk(32, 16, 16, 5)
        out, _ = corrupt_label(truth, NoiseParams("add_blob", 4), SeededRng(3))
        assert (out >= truth).all()

    def test_reported_dsc_matches(self, gen):
        for mode in ("dilate", "erode", "translate", "drop_region", "add_blob"):
            truth = disk(32, 16, 16, gen.uniform(4, 9))
            out, achieved = corrupt_label(truth, NoiseParams(mode, int(gen.integers(1, 5))), SeededRng(7))
            assert achieved == metrics.dsc(out, truth)

    def test_dilation_degrades_monotonically(self, gen):
        for _ in range(50):
            truth = disk(48, *gen.integers(18, 30, size=2), gen.uniform(3, 10))
            vals = [corrupt_label(truth, NoiseParams("dilate", k), SeededRng(0))[1] for k in range(5)]
            assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_apply_probability_zero(self):
        truth = disk(16, 8, 8, 4)
        out, _ = corrupt_label(truth, NoiseParams("dilate", 3, apply_probability=0.0), SeededRng(0))
        assert np.array_equal(out, truth)

    def test_replace_with_model(self):
        truth = disk(16, 8, 8, 4)
        out, _ = corrupt_label(truth, NoiseParams("replace_with_model", 0), SeededRng(0),
                               image=np.zeros((1, 16, 16)), predictor=lambda im: np.zeros((16, 16)))
        assert out.sum() == 0
        with pytest.raises(ValidationError):
            corrupt_label(truth, NoiseParams("replace_with_model", 0), SeededRng(0))

    def test_noise_validation(self):
        with pytest.raises(ValidationError):
            NoiseParams("blur", 1)
        with pytest.raises(ValidationError):
            NoiseParams("dilate", -1)
        with pytest.raises(ValidationError):
            NoiseParams("dilate", 1, 1.5)


class TestBenchmark:
    def _build(self, root, **kw):
        args = dict(n_train=20, n_test=4, hq_fraction=0.1, noise=NoiseParams("dilate", 2),
                    scene=scene_preset("A", size=32), seed=3)
        args.update(kw)
        return build_benchmark(root, **args)

    def test_split_counts(self, tmp_path):
        paths = build_benchmark(tmp_path, 100, 5, 0.1, [NoiseParams("dilate", 3), NoiseParams("erode", 3)],
                                scene_preset("A", size=32), seed=0)
        train = load_split(paths["train"])
        qualities = [s.label.quality for s in train]
        assert qualities.count(Quality.HQ) == 10 and qualities.count(Quality.LQ) == 90
        assert len(load_split(paths["test"])) == 5

    def test_fixed_seed_gives_identical_trees(self, tmp_path):
        self._build(tmp_path / "a")
        self._build(tmp_path / "b")
        self._build(tmp_path / "c", seed=4)
        assert _trees_equal(tmp_path / "a", tmp_path / "b")
        assert not _trees_equal(tmp_path / "a", tmp_path / "c")

    def test_truth_stays_out_of_training_inputs(self, tmp_path):
        paths = self._build(tmp_path)
        train_files = {p.name for p in paths["train"].rglob("*") if p.is_file()}
        assert train_files == {"manifest.json", "image_0.pgm", "label.pgm"}
        assert all(s.truth is None for s in load_split(paths["train"]))
        with_truth = load_split(paths["train"], with_truth=True)
        lq = [s for s in with_truth if s.label.quality is Quality.LQ]
        assert all(s.truth is not None for s in with_truth)
        assert np.mean([metrics.dsc(s.label.mask, s.truth) for s in lq]) < 1.0
        hq = [s for s in with_truth if s.label.quality is Quality.HQ]
        assert all(np.array_equal(s.label.mask, s.truth) for s in hq)
        # test labels are the truth masks; no sidecar needed
        assert all(e.truth is None for e in load_manifest(paths["test"]).samples)

    def test_unlabeled_pool(self, tmp_path):
        paths = self._build(tmp_path, unlabeled=True)
        assert len(load_split(paths["train"])) == 2
        pool = load_split(paths["unlabeled"], with_truth=True)
        assert len(pool) == 18 and all(s.label is None and s.truth is not None for s in pool)

    def test_domains_do_not_share_ids(self, tmp_path):
        a = self._build(tmp_path / "a")
        b = self._build(tmp_path / "b", scene=scene_preset("B", size=32))
        ids_a = {s.id for s in load_split(a["train"])}
        ids_b = {s.id for s in load_split(b["train"])}
        assert not ids_a & ids_b

    def test_argument_validation(self, tmp_path):
        with pytest.raises(ValidationError):
            self._build(tmp_path, hq_fraction=0.0)
        with pytest.raises(ValidationError):
            self._build(tmp_path, noise=[])
