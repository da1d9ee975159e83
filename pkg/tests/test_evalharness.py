import numpy as np
import pytest

from lightdistill import evalharness as ev
from lightdistill.envmap import EnvMap
from lightdistill.errors import DataValidationError
from lightdistill.imagehdr import HdrImage

from conftest import smooth_random_envmap


def constant_env(value, height=32):
    return EnvMap(HdrImage(np.full((height, 2 * height, 3), value, dtype=np.float32)))


class TestRenderSphere:
    def test_diffuse_constant_identity(self):
        env = constant_env(0.8, height=64)
        img = ev.render_sphere(env, ev.MaterialSphere("gray-diffuse"), size=128)
        normals, visible = ev._sphere_normals(128)
        values = img[visible]
        # cosine integral over the hemisphere is pi, cancelling albedo/pi
        assert np.abs(values - 0.5 * 0.8).max() / (0.5 * 0.8) < 0.01

    def test_mirror_single_highlight(self):
        H = 64
        data = np.zeros((H, 2 * H, 3), dtype=np.float32)
        data[40, 100] = 50.0
        env = EnvMap(HdrImage(data))
        img = ev.render_sphere(env, ev.MaterialSphere("silver-mirror"), size=128)
        bright = img.sum(axis=2) > 1.0
        ys, xs = np.nonzero(bright)
        assert len(ys) > 0
        # a single lit texel produces one compact highlight region
        assert ys.max() - ys.min() <= 4
        assert xs.max() - xs.min() <= 4

    def test_matte_converges_to_mirror(self):
        env = smooth_random_envmap(11, 64)
        mirror = ev.render_sphere(env, ev.MaterialSphere("silver-mirror"), size=96)
        sharp = ev.render_sphere_phong(env, exponent=1e4, size=96)
        rel = np.linalg.norm(sharp - mirror) / np.linalg.norm(mirror)
        assert rel < 0.05

    def test_matte_constant_is_tinted(self):
        env = constant_env(1.0, height=32)
        img = ev.render_sphere(env, ev.MaterialSphere("silver-matte"), size=64)
        normals, visible = ev._sphere_normals(64)
        assert np.allclose(img[visible], 0.9, atol=1e-3)

    def test_unknown_material(self):
        with pytest.raises(DataValidationError):
            ev.MaterialSphere("velvet")

    def test_diffuse_invariant_to_symmetric_env_rotation(self):
        # an env map symmetric under a 180-degree rotation about the view axis
        # (d -> (-dx, -dy, dz), i.e. flipping both grid axes) must produce a
        # diffuse sphere image equal to its own 180-degree rotation
        rng = np.random.default_rng(12)
        data = rng.uniform(0.1, 1.5, size=(32, 64, 3))
        data = 0.5 * (data + data[::-1, ::-1])
        env = EnvMap(HdrImage(data.astype(np.float32)))
        img = ev.render_sphere(env, ev.MaterialSphere("gray-diffuse"), size=64)
        rotated = np.rot90(img, 2, axes=(0, 1))
        assert np.abs(img - rotated).max() < 1e-4


class TestSiRmse:
    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        gt = rng.uniform(0.1, 2.0, size=(16, 16, 3))
        for c in (0.1, 1.0, 10.0):
            assert ev.si_rmse(c * gt, gt) < 1e-9

    def test_identical(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(size=(8, 8, 3))
        assert ev.si_rmse(gt, gt) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form_matches_grid_search(self):
        rng = np.random.default_rng(2)
        pred = rng.uniform(0.05, 1.5, size=(12, 12, 3))
        gt = rng.uniform(0.05, 1.5, size=(12, 12, 3))
        value, alpha = ev.si_rmse_with_alpha(pred, gt)
        alphas = np.linspace(0.0, 10.0, 10_000)
        p = pred.ravel()
        g = gt.ravel()
        rmses = np.sqrt(((alphas[:, None] * p[None, :] - g[None, :]) ** 2).mean(axis=1))
        assert value <= rmses.min() + 1e-4
        assert abs(alphas[rmses.argmin()] - alpha) < 2e-3

    def test_all_zero_pred(self):
        gt = np.ones((4, 4, 3))
        assert ev.si_rmse(np.zeros((4, 4, 3)), gt) == pytest.approx(1.0)

    def test_never_exceeds_plain_rmse(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pred = rng.uniform(0, 2, size=(6, 6, 3))
            gt = rng.uniform(0, 2, size=(6, 6, 3))
            rmse = float(np.sqrt(((pred - gt) ** 2).mean()))
            assert ev.si_rmse(pred, gt) <= rmse + 1e-12

    def test_nonzero_outside_each_invariance(self):
        rng = np.random.default_rng(8)
        gt = rng.uniform(0.1, 1.0, size=(8, 8, 3))
        other = rng.uniform(0.1, 1.0, size=(8, 8, 3))
        assert ev.si_rmse(other, gt) > 1e-3  # not a scalar multiple
        assert ev.angular_error(other, gt) > 1e-2  # not collinear per pixel
        assert ev.normalized_rmse(other, gt) > 1e-3  # not affinely related


class TestAngularError:
    def test_identical_zero(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0.1, 1, size=(8, 8, 3))
        assert ev.angular_error(img, img) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_channels_90deg(self):
        pred = np.zeros((4, 4, 3))
        gt = np.zeros((4, 4, 3))
        pred[..., 1] = 1.0  # green
        gt[..., 0] = 1.0  # red
        assert ev.angular_error(pred, gt) == pytest.approx(90.0, abs=1e-6)

    def test_gray_scalings_collinear(self):
        pred = np.full((4, 4, 3), 0.2)
        gt = np.full((4, 4, 3), 0.9)
        assert ev.angular_error(pred, gt) == pytest.approx(0.0, abs=1e-6)

    def test_zero_pixels_skipped(self):
        pred = np.zeros((2, 2, 3))
        gt = np.zeros((2, 2, 3))
        pred[0, 0] = [1, 0, 0]
        gt[0, 0] = [0, 1, 0]
        gt[1, 1] = [1, 1, 1]  # pred zero here: skipped
        assert ev.angular_error(pred, gt) == pytest.approx(90.0, abs=1e-6)


class TestNormalizedRmse:
    def test_identical_zero(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(size=(8, 8, 3))
        assert ev.normalized_rmse(img, img) == pytest.approx(0.0, abs=1e-12)

    def test_affine_remap_invariant(self):
        rng = np.random.default_rng(6)
        gt = rng.uniform(0, 3, size=(16, 16, 3))
        pred = 2.5 * gt + 0.7
        assert ev.normalized_rmse(pred, gt) <= 1e-6

    def test_constant_image_maps_to_zero(self):
        const = np.full((4, 4, 3), 0.5)
        gt = np.linspace(0, 1, 48).reshape(4, 4, 3)
        value = ev.normalized_rmse(const, gt)
        expected = float(np.sqrt((ev._percentile_normalize(gt) ** 2).mean()))
        assert value == pytest.approx(expected)

    def test_percentiles_match_sort_oracle(self):
        rng = np.random.default_rng(7)
        img = rng.normal(size=(20, 20, 3))
        flat = np.sort(img.ravel())
        n = flat.size
        for q in (0.1, 99.9):
            rank = q / 100 * (n - 1)
            lo = int(np.floor(rank))
            frac = rank - lo
            oracle = flat[lo] * (1 - frac) + flat[min(lo + 1, n - 1)] * frac
            assert ev._percentile_sorted(flat, q) == pytest.approx(oracle, rel=1e-12)
            assert np.percentile(img.ravel(), q) == pytest.approx(oracle, rel=1e-9)


class TestEvaluate:
    def test_identical_envs_all_zero(self):
        envs = [smooth_random_envmap(s, 32) for s in range(2)]
        report = ev.evaluate(envs, envs, sphere_size=64)
        for m in ev.MATERIALS:
            assert report.per_material[m]["si_rmse"] == pytest.approx(0.0, abs=1e-9)
            assert report.per_material[m]["angular_error_deg"] == pytest.approx(0.0, abs=1e-4)
            assert report.per_material[m]["normalized_rmse"] == pytest.approx(0.0, abs=1e-9)

    def test_permutation_invariant_means(self):
        preds = [smooth_random_envmap(s, 32) for s in (0, 1, 2)]
        gts = [smooth_random_envmap(s + 10, 32) for s in (0, 1, 2)]
        a = ev.evaluate(preds, gts, sphere_size=64)
        b = ev.evaluate(preds[::-1], gts[::-1], sphere_size=64)
        for m in ev.MATERIALS:
            for key in ("si_rmse", "angular_error_deg", "normalized_rmse"):
                assert a.per_material[m][key] == pytest.approx(b.per_material[m][key],
                                                               rel=1e-12)

    def test_jobs_parallel_identical(self):
        preds = [smooth_random_envmap(s, 32) for s in (3, 4)]
        gts = [smooth_random_envmap(s + 20, 32) for s in (3, 4)]
        a = ev.evaluate(preds, gts, sphere_size=64, jobs=1)
        b = ev.evaluate(preds, gts, sphere_size=64, jobs=2)
        assert a.to_json() == b.to_json()

    def test_regression_fixture(self):
        # frozen output of this implementation on a fixed env pair
        pred = smooth_random_envmap(100, 32)
        gt = smooth_random_envmap(200, 32)
        report = ev.evaluate([pred], [gt], sphere_size=64)
        frozen = {
            "gray-diffuse": (0.040231482408660174, 2.2234591124586176, 0.07380211759911082),
            "silver-matte": (0.3001320390506395, 13.879523653368405, 0.18686358094965969),
            "silver-mirror": (0.41418649947221226, 17.436576908411233, 0.2239239750029711),
        }
        for m, (si, ang, nr) in frozen.items():
            vals = report.per_material[m]
            assert vals["si_rmse"] == pytest.approx(si, rel=1e-6)
            assert vals["angular_error_deg"] == pytest.approx(ang, rel=1e-6)
            assert vals["normalized_rmse"] == pytest.approx(nr, rel=1e-6)
