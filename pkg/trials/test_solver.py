import logging

import numpy as np
import pytest

import ic_align.solver as solver
from ic_align.datagen import CosineTexture, RgbdSceneSpec, gen_rgbd_pair
from ic_align.errors import (ConfigError, IllConditionedHessianError, NoAdmissibleStepError,
                             PyramidTooDeepError, UnderdeterminedSystemError)
from ic_align.geometry import AffineParams, RigidTransform
from ic_align.imaging import Frame, InverseDepthImage, ScalarImage, sobel_gradients
from ic_align.metrics import relative_pose_error
from ic_align.robust import RobustLossSpec
from ic_align.solver import (GAUSS_NEWTON, LM_HEURISTIC, PROPOSALS, SMALL_STEP, SOFT_ARGMIN,
                             AffineLevel, AlignmentState, SolverConfig, affine_to_level, align,
                             gauss_newton_step, ic_level, lm_adapt, lm_step, prepare_level,
                             propose_dampings, proposal_step)
from ic_align.warp import AFFINE, RIGID, CameraIntrinsics


def random_spd(rng, n=6):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def shifted_pair(texture, dx, dy, size=(128, 96)):
    """Template and an analytically shifted image: I(x + (dx, dy)) = T(x)"""
    template = texture.render(*size)
    image = texture.render(*size, origin=(-dx, -dy))
    return Frame(template), Frame(image)


def affine_level(template, image):
    return AffineLevel(template.intensity, sobel_gradients(template.intensity), image.intensity)


class TestConfig:
    def test_defaults(self):
        cfg = SolverConfig()
        assert (cfg.levels, cfg.iters_per_level, cfg.method) == (4, 3, PROPOSALS)
        assert (cfg.proposal_count, cfg.lambda_range) == (10, (1e-5, 1e5))
        assert cfg.robust == RobustLossSpec("huber", 0.1)

    @pytest.mark.parametrize("changes", [
        {"levels": 0}, {"iters_per_level": -1}, {"method": "newton"},
        {"lambda_range": (1.0, 1.0)}, {"lambda_range": (0.0, 1.0)}, {"proposal_count": 1},
        {"lm_lambda_init": 0.0}, {"lm_factor": 1.0}, {"proposal_selection": "vote"},
    ])
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            SolverConfig(**changes).validate()

    def test_dict_roundtrip(self):
        cfg = SolverConfig(levels=3, method=LM_HEURISTIC, robust=RobustLossSpec("tukey", 0.2))
        assert SolverConfig.from_dict(cfg.as_dict()) == cfg

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            SolverConfig.from_dict({"levels": 3, "damping": 1.0})


class TestSteps:
    def test_gauss_newton_identity(self):
        np.testing.assert_array_equal(gauss_newton_step(np.eye(6), np.eye(6)[0]), np.eye(6)[0])

    def test_gauss_newton_zero_gradient(self, rng):
        np.testing.assert_array_equal(gauss_newton_step(random_spd(rng), np.zeros(6)), np.zeros(6))

    def test_gauss_newton_residual(self, rng):
        for _ in range(20):
            h, g = random_spd(rng), rng.normal(size=6)
            np.testing.assert_allclose(h @ gauss_newton_step(h, g), g, atol=1e-10)

    @pytest.mark.parametrize("h", [np.diag([1.0, 1, 1, 1, 1, 0]), np.ones((6, 6))])
    def test_gauss_newton_singular(self, h):
        with pytest.raises(IllConditionedHessianError):
            gauss_newton_step(h, np.ones(6))

    def test_lm_zero_damping_is_gauss_newton(self, rng):
        h, g = random_spd(rng), rng.normal(size=6)
        np.testing.assert_allclose(lm_step(h, g, 0.0), gauss_newton_step(h, g), atol=1e-12)

    def test_lm_heavy_damping(self, rng):
        g = rng.normal(size=6)
        np.testing.assert_allclose(lm_step(np.eye(6), g, 1e12), g / (1 + 1e12), rtol=1e-12)

    def test_lm_residual(self, rng):
        for lam in (1e-5, 1e-2, 1.0, 1e3):
            h, g = random_spd(rng), rng.normal(size=6)
            delta = lm_step(h, g, lam)
            np.testing.assert_allclose((h + lam * np.diag(np.diag(h))) @ delta, g, atol=1e-10)

    def test_lm_zero_hessian_stays_definite(self):
        np.testing.assert_array_equal(lm_step(np.zeros((6, 6)), np.zeros(6), 1.0), np.zeros(6))

    def test_lm_dead_parameters(self):
        h = np.diag([2.0, 0.0, 2.0, 0.0, 2.0, 0.0])
        g = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
        np.testing.assert_allclose(lm_step(h, g, 1.0), [0.25, 0, 0.25, 0, 0.25, 0], atol=1e-15)


class TestLmAdapt:
    def test_accept(self):
        assert lm_adapt(1.0, 1.0, 0.5) == (True, 0.1)

    def test_reject(self):
        assert lm_adapt(1.0, 1.0, 2.0) == (False, 10.0)

    def test_tie_accepts(self):
        assert lm_adapt(1e-3, 1.0, 1.0)[0]

    def test_non_finite_rejects(self):
        assert lm_adapt(1.0, 1.0, np.nan) == (False, 10.0)
        assert not lm_adapt(1.0, 1.0, np.inf)[0]

    def test_clamped(self):
        assert lm_adapt(1e-12, 1.0, 0.5) == (True, 1e-12)
        assert lm_adapt(1e12, 1.0, 2.0) == (False, 1e12)


class TestProposals:
    def test_endpoints(self):
        lam = propose_dampings(SolverConfig(proposal_count=2, lambda_range=(1e-3, 1e3)))
        np.testing.assert_allclose(lam, [1e-3, 1e3], rtol=1e-15)

    def test_three(self):
        lam = propose_dampings(SolverConfig(proposal_count=3, lambda_range=(1e-2, 1e2)))
        np.testing.assert_allclose(lam, [1e-2, 1.0, 1e2], rtol=1e-12)

    def test_default_spacing(self):
        lam = propose_dampings(SolverConfig())
        assert len(lam) == 10
        np.testing.assert_allclose(lam[[0, -1]], [1e-5, 1e5], rtol=1e-12)
        ratios = lam[1:] / lam[:-1]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)

    def test_quadratic_prefers_least_damping(self, rng):
        h = np.diag(rng.uniform(1.0, 5.0, 6))
        g = rng.normal(size=6)
        optimum = g / np.diag(h)

        def evaluate(delta):
            e = delta - optimum
            return float(e @ h @ e)

        lam = propose_dampings(SolverConfig())
        choice = proposal_step(h, g, lam, evaluate)
        assert choice.lam == lam[0]
        assert choice.objective == choice.objectives.min()

    def test_single_admissible_proposal(self, rng):
        g = rng.normal(size=6)
        lam = propose_dampings(SolverConfig())
        target = np.linalg.norm(g) / (1 + lam[4])

        def evaluate(delta):
            return 1.0 if abs(np.linalg.norm(delta) - target) < 1e-12 * target else np.inf

        choice = proposal_step(np.eye(6), g, lam, evaluate)
        assert choice.lam == lam[4]
        assert np.isinf(np.delete(choice.objectives, 4)).all()

    def test_no_admissible_step(self, rng):
        with pytest.raises(NoAdmissibleStepError):
            proposal_step(np.eye(6), rng.normal(size=6), propose_dampings(SolverConfig()),
                          lambda delta: np.inf)

    def test_ties_go_to_larger_damping(self, rng):
        lam = propose_dampings(SolverConfig())
        choice = proposal_step(np.eye(6), rng.normal(size=6), lam, lambda delta: 1.0)
        assert choice.lam == lam[-1]

    def test_choice_never_worse_than_any_proposal(self, rng):
        centre = rng.normal(size=6)

        def evaluate(delta):
            return float(np.sum(np.sin(delta - centre) ** 2) + 0.1 * np.sum(delta ** 2))

        for _ in range(20):
            h, g = random_spd(rng), rng.normal(size=6)
            lam = propose_dampings(SolverConfig())
            choice = proposal_step(h, g, lam, evaluate)
            assert choice.objective <= choice.objectives.min()
            assert evaluate(choice.delta) == choice.objective

    def test_soft_argmin_never_worse(self, rng):
        h, g = random_spd(rng), rng.normal(size=6)
        optimum = rng.normal(size=6)

        def evaluate(delta):
            return float(np.sum((delta - optimum) ** 2))

        lam = propose_dampings(SolverConfig())
        hard = proposal_step(h, g, lam, evaluate)
        soft = proposal_step(h, g, lam, evaluate, selection=SOFT_ARGMIN)
        assert soft.objective <= hard.objective

    def test_needs_two_proposals(self):
        with pytest.raises(ConfigError):
            proposal_step(np.eye(6), np.ones(6), [1.0], lambda delta: 0.0)


class TestLevel:
    def level_data(self, texture, cfg, dx=0.7, dy=-0.4):
        template, image = shifted_pair(texture, dx, dy)
        problem = affine_level(template, image)
        return prepare_level(problem, AffineParams.zero(), cfg)

    def test_identical_images_do_not_move(self, textured_frame):
        cfg = SolverConfig(levels=1)
        data = prepare_level(affine_level(textured_frame, textured_frame), AffineParams.zero(), cfg)
        state = ic_level(AlignmentState(AffineParams.zero()), data, cfg)
        assert state.trace
        for entry in state.trace:
            assert entry.delta == (0.0,) * 6
        assert state.exit_reason == SMALL_STEP
        np.testing.assert_array_equal(state.estimate.xi, np.zeros(6))

    def test_zero_iterations_leave_state_unchanged(self, texture):
        cfg = SolverConfig(iters_per_level=0)
        start = AlignmentState(AffineParams.zero(), lm_lambda=0.5)
        state = ic_level(start, self.level_data(texture, cfg), cfg)
        assert state.estimate is start.estimate
        assert state.trace == []
        assert state.lm_lambda == 0.5

    @pytest.mark.parametrize("method", [GAUSS_NEWTON, LM_HEURISTIC, PROPOSALS])
    def test_trace_matches_objective_after_update(self, texture, method):
        cfg = SolverConfig(method=method, iters_per_level=5)
        data = self.level_data(texture, cfg)
        state = ic_level(AlignmentState(AffineParams.zero()), data, cfg)
        estimate = AffineParams.zero()
        for entry in state.trace:
            if entry.accepted:
                estimate = data.problem.update(estimate, np.array(entry.delta))
            assert data.objective(estimate) == entry.objective

    def test_lm_objective_non_increasing(self, texture):
        cfg = SolverConfig(method=LM_HEURISTIC, iters_per_level=10, min_step_norm=0.0)
        state = ic_level(AlignmentState(AffineParams.zero(), lm_lambda=1e-3),
                         self.level_data(texture, cfg, dx=2.5, dy=1.5), cfg)
        objectives = [e.objective for e in state.trace]
        assert all(b <= a for a, b in zip(objectives, objectives[1:]))

    def test_gauss_newton_falls_back_on_singular_hessian(self, caplog):
        # stripes constant along y leave the y-parameters without gradient
        stripes = CosineTexture(np.array([[1.0 / 40.0, 0.0]]), np.array([0.3]), np.array([0.4]))
        template, image = shifted_pair(stripes, 0.5, 0.0, size=(64, 48))
        cfg = SolverConfig(method=GAUSS_NEWTON, levels=1)
        data = prepare_level(affine_level(template, image), AffineParams.zero(), cfg)
        with caplog.at_level(logging.WARNING, logger="ic_align.solver"):
            state = ic_level(AlignmentState(AffineParams.zero()), data, cfg)
        assert "falling back to LM" in caplog.text
        assert state.trace[0].lam == cfg.lm_lambda_init
        assert state.estimate.xi[4] == pytest.approx(0.5, abs=0.05)

    def test_underdetermined_level_entry(self, rng):
        img = ScalarImage(rng.uniform(size=(16, 16)))
        depth = np.zeros((16, 16))
        depth[5, 5:8] = 0.5
        frame = Frame(img, InverseDepthImage(depth))
        k = CameraIntrinsics(20.0, 20.0, 7.5, 7.5)
        with pytest.raises(UnderdeterminedSystemError) as err:
            align(frame, frame, RIGID, SolverConfig(levels=1), intrinsics=k)
        assert err.value.level == 0
        assert "[at level 0]" in str(err.value)


class TestAffineToLevel:
    def test_zero_stays_zero(self):
        np.testing.assert_array_equal(affine_to_level(AffineParams.zero(), 0, 3).xi, np.zeros(6))

    def test_translation_halves(self):
        xi = affine_to_level(AffineParams([0, 0, 0, 0, 4.0, -2.0]), 0, 2)
        np.testing.assert_allclose(xi.xi, [0, 0, 0, 0, 1.0, -0.5])

    def test_roundtrip(self, rng):
        xi = AffineParams(np.concatenate([rng.uniform(-0.1, 0.1, 4), rng.uniform(-5, 5, 2)]))
        back = affine_to_level(affine_to_level(xi, 0, 3), 3, 0)
        np.testing.assert_allclose(back.xi, xi.xi, atol=1e-12)


class TestAlign:
    def test_self_alignment_is_identity(self, textured_frame):
        result = align(textured_frame, textured_frame, AFFINE)
        np.testing.assert_array_equal(result.estimate.xi, np.zeros(6))
        assert result.converged
        assert result.final_objective == 0.0

    def test_one_steepest_descent_build_per_level(self, texture, monkeypatch):
        calls = []
        original = solver.steepest_descent_image

        def counting(*args, **kwargs):
            calls.append(args[1])
            return original(*args, **kwargs)

        monkeypatch.setattr(solver, "steepest_descent_image", counting)
        template, image = shifted_pair(texture, 1.0, 0.5)
        for iters in (1, 5):
            calls.clear()
            result = align(template, image, AFFINE, SolverConfig(iters_per_level=iters))
            assert len(calls) == 4
            assert [d.sd_builds for d in result.levels] == [1, 1, 1, 1]

    def test_trace_length_bounded(self, texture):
        template, image = shifted_pair(texture, 1.5, -1.0)
        cfg = SolverConfig(iters_per_level=4)
        result = align(template, image, AFFINE, cfg)
        assert 0 < result.iterations <= cfg.levels * cfg.iters_per_level
        assert [d.level for d in result.levels] == [3, 2, 1, 0]

    def test_deterministic(self, texture):
        template, image = shifted_pair(texture, 1.5, -1.0)
        first = align(template, image, AFFINE)
        second = align(template, image, AFFINE)
        assert first.trace == second.trace
        np.testing.assert_array_equal(first.estimate.xi, second.estimate.xi)

    @pytest.mark.parametrize("method", [GAUSS_NEWTON, LM_HEURISTIC, PROPOSALS])
    def test_recovers_translation(self, texture, method):
        template, image = shifted_pair(texture, 1.3, -0.7)
        cfg = SolverConfig(method=method, levels=3, iters_per_level=5)
        result = align(template, image, AFFINE, cfg)
        expected = np.array([0, 0, 0, 0, 1.3, -0.7])
        assert np.abs(result.estimate.xi - expected).sum() < 5e-3

    def test_recovers_rigid_motion(self):
        spec = RgbdSceneSpec(seed=11, motion=(0.02, -0.015, 0.01, 0.006, -0.004, 0.005))
        pair = gen_rgbd_pair(spec)
        result = align(pair.template, pair.image, RIGID, intrinsics=pair.intrinsics)
        err = relative_pose_error(result.estimate, pair.transform)
        assert err.rotation_error < 0.2
        assert err.translation_error < 0.2

    def test_mismatched_frames(self, textured_frame):
        other = Frame(ScalarImage(np.zeros((64, 64))))
        with pytest.raises(ConfigError):
            align(textured_frame, other, AFFINE)

    def test_rigid_needs_depth_and_intrinsics(self, textured_frame):
        with pytest.raises(ConfigError):
            align(textured_frame, textured_frame, RIGID)

    def test_unknown_family(self, textured_frame):
        with pytest.raises(ConfigError):
            align(textured_frame, textured_frame, "homography")

    def test_pyramid_too_deep(self):
        frame = Frame(ScalarImage(np.zeros((32, 32))))
        with pytest.raises(PyramidTooDeepError):
            align(frame, frame, AFFINE)

    def test_rigid_identity(self):
        pair = gen_rgbd_pair(RgbdSceneSpec(seed=5, motion=(0.0,) * 6))
        result = align(pair.template, pair.template, RIGID, intrinsics=pair.intrinsics)
        assert isinstance(result.estimate, RigidTransform)
        np.testing.assert_allclose(result.estimate.matrix(), np.eye(4), atol=1e-12)
