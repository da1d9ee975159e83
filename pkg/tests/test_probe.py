import numpy as np
import pytest
from scipy.optimize import brentq

from lightdistill import envmap as em
from lightdistill import probe as pr
from lightdistill.errors import DataValidationError

from conftest import random_unit_vectors, smooth_random_envmap


def make_camera(size=512, f=512.0) -> pr.Camera:
    return pr.Camera(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size)


def far_depth(cam: pr.Camera, value=1e5) -> pr.DepthMap:
    return pr.DepthMap(np.full((cam.height, cam.width), value))


class TestTypesAndSizing:
    def test_camera_validation(self):
        with pytest.raises(DataValidationError):
            pr.Camera(fx=0, fy=1, cx=1, cy=1, width=4, height=4)
        with pytest.raises(DataValidationError):
            pr.Camera(fx=1, fy=1, cx=9, cy=1, width=4, height=4)

    def test_ball_validation(self):
        with pytest.raises(DataValidationError):
            pr.Ball(center=np.array([0, 0, 0.2]), radius=0.25)
        with pytest.raises(DataValidationError):
            pr.Ball(center=np.array([0, 0, 1.0]), radius=-0.1)

    def test_size_ball_formula(self):
        cam = make_camera()
        r = pr.size_ball(cam, np.array([0.0, 0.0, 2.0]))
        assert r == pytest.approx(64 * 2 / 512)

    def test_size_ball_linear_in_depth(self):
        cam = make_camera()
        r1 = pr.size_ball(cam, np.array([0.1, -0.2, 2.0]))
        r2 = pr.size_ball(cam, np.array([0.1, -0.2, 4.0]))
        assert r2 == pytest.approx(2 * r1)

    def test_size_ball_behind_camera(self):
        with pytest.raises(DataValidationError):
            pr.size_ball(make_camera(), np.array([0.0, 0.0, -1.0]))

    def test_reflection_involution(self):
        rng = np.random.default_rng(0)
        v = random_unit_vectors(rng, 500)
        n = random_unit_vectors(rng, 500)
        back = pr.reflect(pr.reflect(v, n), n)
        assert np.abs(back - v).max() < 1e-12


class TestMaskAndDepth:
    def test_no_balls(self):
        cam = make_camera(64)
        bg = pr.DepthMap(np.full((64, 64), 3.0))
        mask, depth = pr.project_mask_and_depth(pr.ProbeSet((), cam, bg))
        assert not mask.any()
        assert np.array_equal(depth.data, bg.data)

    def test_on_axis_disc_radius(self):
        cam = make_camera()
        ball = pr.Ball(center=np.array([0.0, 0.0, 2.0]), radius=0.25)
        mask, depth = pr.project_mask_and_depth(pr.ProbeSet((ball,), cam, far_depth(cam)))
        ys, xs = np.nonzero(mask)
        # exact silhouette radius: fx * tan(asin(r / dist))
        r_exact = 512 * np.tan(np.arcsin(0.25 / 2.0))
        assert abs((xs.max() - xs.min() + 1) / 2 - r_exact) < 1.0
        assert abs((ys.max() - ys.min() + 1) / 2 - r_exact) < 1.0
        cx, cy = xs.mean(), ys.mean()
        assert abs(cx - 255.5) < 1.0 and abs(cy - 255.5) < 1.0
        assert depth.data[256, 256] == pytest.approx(1.75, abs=1e-3)

    def test_ball_behind_wall_hidden(self):
        cam = make_camera(64)
        bg = pr.DepthMap(np.full((64, 64), 1.0))  # wall in front of the ball
        ball = pr.Ball(center=np.array([0.0, 0.0, 3.0]), radius=0.3)
        mask, depth = pr.project_mask_and_depth(pr.ProbeSet((ball,), cam, bg))
        assert not mask.any()
        assert np.array_equal(depth.data, bg.data)

    def test_mask_equals_disc_union_minus_occlusion(self):
        cam = pr.Camera(fx=256, fy=256, cx=128, cy=128, width=256, height=256)
        bg = np.full((256, 256), 10.0)
        bg[:, :96] = 1.2  # left strip occludes anything deeper
        balls = (
            pr.Ball(center=np.array([-0.6, 0.1, 2.0]), radius=0.3),
            pr.Ball(center=np.array([0.4, -0.2, 3.0]), radius=0.45),
        )
        probes = pr.ProbeSet(balls, cam, pr.DepthMap(bg))
        mask, _ = pr.project_mask_and_depth(probes)

        # oracle: per-ball analytic disc test against each pixel's center ray
        uu, vv = np.meshgrid(np.arange(256) + 0.5, np.arange(256) + 0.5)
        dirs = cam.ray_dirs(uu.ravel(), vv.ravel())
        expected = np.zeros(256 * 256, dtype=bool)
        for b in balls:
            dist = np.linalg.norm(b.center)
            cosang = dirs @ (b.center / dist)
            hit = np.arccos(np.clip(cosang, -1, 1)) <= np.arcsin(b.radius / dist)
            tball = dist * cosang - np.sqrt(
                np.clip((dist * cosang) ** 2 - (dist**2 - b.radius**2), 0, None)
            )
            z = tball * dirs[:, 2]
            expected |= hit & (z < bg.ravel())
        assert np.array_equal(mask.ravel(), expected)


class TestRenderBall:
    def test_constant_env(self):
        cam = make_camera()
        ball = pr.Ball(center=np.array([0.2, -0.1, 2.0]), radius=0.25)
        env = np.full((32, 64, 3), 0.7)
        sprite = pr.render_ball_grid(env, ball, cam, supersample=2)
        covered = sprite.alpha > 0
        assert covered.any()
        assert np.abs(sprite.rgb[covered] - 0.7).max() < 1e-9

    def test_center_pixel_sees_backward(self):
        cam = make_camera()
        ball = pr.Ball(center=np.array([0.0, 0.0, 2.0]), radius=0.25)
        env = np.zeros((64, 128, 3))
        # -Z direction: theta = pi/2, phi = pi -> u = 0 (wrapped), v = H/2: light the
        # seam texels around u=0 at the equator
        env[31:33, 0] = 10.0
        env[31:33, -1] = 10.0
        sprite = pr.render_ball_grid(env, ball, cam, supersample=4)
        cx, cy = int(256 - sprite.x0), int(256 - sprite.y0)
        assert sprite.rgb[cy, cx].max() > 1.0  # center reflects straight back at -Z

    def test_highlight_positions_match_numeric_solve(self):
        cam = make_camera()
        center = np.array([0.25, -0.15, 2.2])
        dist = float(np.linalg.norm(center))
        radius = 0.3
        ball = pr.Ball(center=center, radius=radius)
        H = 256
        lights = [
            np.array([0.1, 0.7, 0.65]),
            np.array([0.8, 0.1, -0.5]),
            np.array([-0.5, -0.3, 0.7]),
            np.array([0.2, -0.7, -0.4]),
        ]
        lights = [l / np.linalg.norm(l) for l in lights]
        env = np.zeros((H, 2 * H, 3))
        for light in lights:
            u, v = em.dir_to_pixel(light, H)
            iv, iu = int(v), int(u) % (2 * H)
            env[iv - 1 : iv + 2, iu - 1 : iu + 2] = 400.0  # 3x3 block for robustness
        sprite = pr.render_ball_grid(env, ball, cam, supersample=4)

        axis = center / dist
        for light in lights:
            # independent 1-D solve for the surface angle whose reflection hits the light
            beta = float(np.arccos(np.clip(axis @ light, -1, 1)))
            if beta <= np.arcsin(radius / dist) + 1e-3:
                continue

            def angle_err(gamma):
                return pr._unwrap_angle_of(np.array([gamma]), dist, radius)[0] - beta

            gamma = brentq(angle_err, 0.0, np.arccos(radius / dist), xtol=1e-12)
            perp = light - (light @ axis) * axis
            m = perp / np.linalg.norm(perp) if np.linalg.norm(perp) > 1e-12 else axis
            n = -np.cos(gamma) * axis + np.sin(gamma) * m
            surf = center + radius * n
            u_pred, v_pred = cam.project(surf)

            # brightest sprite pixel near the prediction (several lights coexist,
            # so search a local window rather than the global argmax)
            win = sprite.rgb.sum(axis=2)
            py, px = int(v_pred - sprite.y0), int(u_pred - sprite.x0)
            y0, x0 = max(0, py - 3), max(0, px - 3)
            neighborhood = win[y0 : py + 4, x0 : px + 4]
            assert neighborhood.max() > 0.0
            local = np.unravel_index(np.argmax(neighborhood), neighborhood.shape)
            hit_y = y0 + local[0] + sprite.y0 + 0.5
            hit_x = x0 + local[1] + sprite.x0 + 0.5
            assert abs(hit_x - u_pred) <= 1.0
            assert abs(hit_y - v_pred) <= 1.0


class TestComposite:
    def test_empty_sprites_leave_frame(self):
        frame = np.random.default_rng(1).uniform(0, 1, size=(16, 16, 3))
        out = pr.composite_arrays(frame, [], np.full((16, 16), 5.0))
        assert np.array_equal(out.image, frame)

    def test_opaque_sprite_replaces(self):
        frame = np.zeros((16, 16, 3))
        sprite = pr.Sprite(
            x0=4, y0=5,
            rgb=np.full((3, 4, 3), 0.8),
            alpha=np.ones((3, 4)),
            zdepth=np.full((3, 4), 2.0),
        )
        out = pr.composite_arrays(frame, [sprite], np.full((16, 16), 5.0))
        assert np.allclose(out.image[5:8, 4:8], 0.8)
        assert out.image[0, 0, 0] == 0.0
        assert np.allclose(out.weights[0, 5:8, 4:8], 1.0)

    def test_nearer_ball_wins_per_pixel(self):
        cam = make_camera(128)
        bg = far_depth(cam)
        near = pr.Ball(center=np.array([-0.05, 0.0, 1.6]), radius=0.2)
        far_b = pr.Ball(center=np.array([0.05, 0.0, 2.4]), radius=0.3)
        env_a = np.full((16, 32, 3), 1.0)
        env_b = np.full((16, 32, 3), 0.0)
        sp_near = pr.render_ball_grid(env_a, near, cam, supersample=2)
        sp_far = pr.render_ball_grid(env_b, far_b, cam, supersample=2)
        out = pr.composite_arrays(np.full((128, 128, 3), 0.5), [sp_far, sp_near], bg.data)
        # overlap region: both alphas 1 -> near color (1.0) must win
        a_full = np.zeros((128, 128)); b_full = np.zeros((128, 128))
        a_full[sp_near.y0:sp_near.y0+sp_near.shape[0], sp_near.x0:sp_near.x0+sp_near.shape[1]] = sp_near.alpha
        b_full[sp_far.y0:sp_far.y0+sp_far.shape[0], sp_far.x0:sp_far.x0+sp_far.shape[1]] = sp_far.alpha
        overlap = (a_full == 1.0) & (b_full == 1.0)
        assert overlap.any()
        assert np.allclose(out.image[overlap], 1.0)

    def test_sprite_behind_background_occluded(self):
        cam = make_camera(64)
        ball = pr.Ball(center=np.array([0.0, 0.0, 3.0]), radius=0.3)
        env = np.full((16, 32, 3), 1.0)
        sprite = pr.render_ball_grid(env, ball, cam, supersample=2)
        frame = np.zeros((64, 64, 3))
        out = pr.composite_arrays(frame, [sprite], np.full((64, 64), 1.0))
        assert np.array_equal(out.image, frame)


class TestUnwrap:
    def test_round_trip_psnr_5_random_envs(self):
        cam = make_camera()
        ball = pr.Ball(center=np.array([0.0, 0.0, 1.0]), radius=0.45)
        H = 128
        for seed in range(5):
            env = smooth_random_envmap(seed, H)
            sprite = pr.render_ball_grid(env.data, ball, cam, supersample=4)
            unw, valid = pr.unwrap_ball(sprite, ball, cam, env_height=H)
            assert valid.mean() > 0.8
            err = (unw.data.astype(np.float64) - env.data)[valid]
            peak = float(env.data[valid].max())
            psnr = 10 * np.log10(peak**2 / float((err**2).mean()))
            assert psnr >= 35.0, f"seed {seed}: PSNR {psnr:.2f}"

    def test_constant_sprite_gives_constant_env(self):
        cam = make_camera()
        ball = pr.Ball(center=np.array([0.1, 0.0, 2.0]), radius=0.25)
        env = np.full((32, 64, 3), 0.6)
        sprite = pr.render_ball_grid(env, ball, cam, supersample=4)
        unw, valid = pr.unwrap_ball(sprite, ball, cam, env_height=32)
        assert valid.any()
        assert np.abs(unw.data[valid] - 0.6).max() < 1e-6

    def test_validity_covers_sphere_for_small_ball(self):
        cam = make_camera()
        # ball subtending < 15 deg: 2*asin(r/d) = 14.4 deg
        ball = pr.Ball(center=np.array([0.0, 0.0, 2.0]), radius=0.25)
        sprite = pr.render_ball_grid(np.full((32, 64, 3), 1.0), ball, cam, supersample=4)
        unw, valid = pr.unwrap_ball(sprite, ball, cam, env_height=64)
        w = em.solid_angle_weights(64)
        covered = (valid * w[:, None]).sum() / (4 * np.pi)
        assert covered > 0.95
