"""
Invariant suites behind `ic-align selftest`: group laws, finite-difference
Jacobian checks, default constants and a self-alignment smoke run.
"""
import logging
import time
from dataclasses import dataclass

import numpy as np

from .datagen import CosineTexture
from .geometry import (AffineParams, TwistSE3, affine_compose, affine_inverse, exp_se3,
                       log_se3)
from .imaging import Frame
from .solver import PROPOSALS, SolverConfig, align, propose_dampings
from .warp import (AFFINE, CameraIntrinsics, warp_affine, warp_jacobian_affine,
                   warp_jacobian_rigid, warp_rigid)

logger = logging.getLogger(__name__)

ROUNDTRIP_TOL = 1e-9
GROUP_TOL = 1e-10
RIGID_JACOBIAN_TOL = 1e-4
AFFINE_JACOBIAN_TOL = 1e-9
RATIO_TOL = 1e-12
IDENTITY_TOL = 1e-12

RIGID_FD_STEP = 1e-6
AFFINE_FD_STEP = 1e-3

SELFTEST_CAMERA = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    samples: int
    seconds: float
    detail: str = ""

    def line(self):
        status = "ok  " if self.passed else "FAIL"
        return (f"{status} {self.name:<20} max_error={self.max_error:.3e} "
                f"tol={self.tolerance:g} n={self.samples} ({self.seconds:.2f}s) {self.detail}").rstrip()


def _random_twist(rng, max_angle=3.0, max_translation=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return TwistSE3(axis * rng.uniform(0.0, max_angle),
                    rng.uniform(-max_translation, max_translation, 3))


def _random_affine(rng, linear=0.3, translation=10.0):
    return AffineParams(np.concatenate([rng.uniform(-linear, linear, 4),
                                        rng.uniform(-translation, translation, 2)]))


def se3_roundtrip(rng, samples=1000):
    worst = 0.0
    for _ in range(samples):
        xi = _random_twist(rng)
        back = log_se3(exp_se3(xi)).as_vector()
        worst = max(worst, float(np.abs(back - xi.as_vector()).max()))
    return worst, ROUNDTRIP_TOL, samples


def affine_group(rng, samples=1000):
    worst = 0.0
    for _ in range(samples):
        a, b = _random_affine(rng), _random_affine(rng)
        product = affine_compose(a, b).matrix()
        worst = max(worst, float(np.abs(product - a.matrix() @ b.matrix()).max()))
        inv = affine_inverse(a).matrix()
        worst = max(worst, float(np.abs(inv - np.linalg.inv(a.matrix())).max()))
        worst = max(worst, float(np.abs(affine_compose(a, affine_inverse(a)).xi).max()))
    return worst, GROUP_TOL, samples


def _rigid_point(xi, x, y, d, k):
    xw, yw, _, _ = warp_rigid(np.array([x]), np.array([y]), np.array([d]), k, exp_se3(xi))
    return np.array([xw[0], yw[0]])


def rigid_jacobian(rng, samples=200, camera=SELFTEST_CAMERA):
    """Analytic rigid warp Jacobian against central differences at xi = 0"""
    worst = 0.0
    for _ in range(samples):
        x, y = rng.uniform(0, 639), rng.uniform(0, 479)
        d = rng.uniform(0.2, 2.0)
        pu, pv = camera.normalize(x, y)
        analytic = warp_jacobian_rigid(pu, pv, d, camera)
        numeric = np.empty((2, 6))
        for j in range(6):
            step = np.zeros(6)
            step[j] = RIGID_FD_STEP
            numeric[:, j] = (_rigid_point(step, x, y, d, camera)
                             - _rigid_point(-step, x, y, d, camera)) / (2 * RIGID_FD_STEP)
        err = np.abs(analytic - numeric).max() / max(np.abs(analytic).max(), 1.0)
        worst = max(worst, float(err))
    return worst, RIGID_JACOBIAN_TOL, samples


def affine_jacobian(rng, samples=200):
    worst = 0.0
    for _ in range(samples):
        x, y = rng.uniform(0, 639), rng.uniform(0, 479)
        analytic = warp_jacobian_affine(x, y)
        numeric = np.empty((2, 6))
        for j in range(6):
            step = np.zeros(6)
            step[j] = AFFINE_FD_STEP
            plus = np.array(warp_affine(x, y, AffineParams(step)))
            minus = np.array(warp_affine(x, y, AffineParams(-step)))
            numeric[:, j] = (plus - minus) / (2 * AFFINE_FD_STEP)
        err = np.abs(analytic - numeric).max() / max(np.abs(analytic).max(), 1.0)
        worst = max(worst, float(err))
    return worst, AFFINE_JACOBIAN_TOL, samples


def default_constants(rng=None):
    """Default solver: 4 levels x 3 iterations, 10 log-spaced dampings over [1e-5, 1e5]"""
    cfg = SolverConfig()
    lam = propose_dampings(cfg)
    ratios = lam[1:] / lam[:-1]
    errors = [
        abs(cfg.levels - 4), abs(cfg.iters_per_level - 3), float(cfg.method != PROPOSALS),
        abs(len(lam) - 10), abs(lam[0] - 1e-5) / 1e-5, abs(lam[-1] - 1e5) / 1e5,
        float(np.abs(ratios / ratios[0] - 1.0).max()),
    ]
    return float(max(errors)), RATIO_TOL, 1


def identity_alignment(rng, size=(128, 96)):
    """Self-alignment stays at the identity; one steepest-descent build per level"""
    texture = CosineTexture.random(rng)
    frame = Frame(texture.render(*size))
    result = align(frame, frame, AFFINE, SolverConfig())
    builds = [d.sd_builds for d in result.levels]
    err = float(np.abs(result.estimate.xi).max())
    err = max(err, max(abs(b - 1) for b in builds), result.final_objective or 0.0)
    return err, IDENTITY_TOL, 1


SUITES = {
    "se3_roundtrip": se3_roundtrip,
    "affine_group": affine_group,
    "rigid_jacobian": rigid_jacobian,
    "affine_jacobian": affine_jacobian,
    "default_constants": default_constants,
    "identity_alignment": identity_alignment,
}


def run_suite(name, seed=0):
    if name not in SUITES:
        raise KeyError(f"unknown selftest suite {name!r}")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    try:
        worst, tol, samples = SUITES[name](rng)
        detail = ""
    except Exception as err:  # a crashing suite is a failed suite
        logger.exception(f"selftest {name} raised")
        worst, tol, samples, detail = float("inf"), 0.0, 0, f"{type(err).__name__}: {err}"
    result = SuiteResult(name, bool(worst <= tol), worst, tol, samples,
                         time.perf_counter() - start, detail)
    log = logger.info if result.passed else logger.error
    log(result.line())
    return result


def run_selftest(names=None, seed=0):
    return [run_suite(name, seed) for name in (names or SUITES)]
