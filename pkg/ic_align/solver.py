"""
Unrolled inverse compositional (IC) alignment.

Each pyramid level precomputes its steepest-descent image once, freezes
the robust weights at level entry, then runs K linearised updates with
one of three step rules: Gauss-Newton, heuristic Levenberg-Marquardt,
or damping proposals scored by the true objective. Levels run coarse to
fine, carrying the estimate forward.
"""
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import linalg

from .errors import (ConfigError, ICAlignError, IllConditionedHessianError,
                     NoAdmissibleStepError, UnderdeterminedSystemError)
from .geometry import (AffineParams, RigidTransform, affine_compose, affine_inverse,
                       compose_rigid, exp_se3, invert_rigid, log_se3)
from .imaging import DEFAULT_LEVELS, bilinear_sample_many, frame_pyramid
from .robust import (MIN_VALID_PIXELS, ResidualField, RobustLossSpec, compute_weights,
                     weighted_normal_equations, weighted_objective)
from .warp import (AFFINE, DEFAULT_OCCLUSION_SLACK, FAMILIES, RIGID, occlusion_mask,
                   sample_warped, steepest_descent_image, warp_affine, warp_rigid)

logger = logging.getLogger(__name__)

GAUSS_NEWTON = "gauss_newton"
LM_HEURISTIC = "lm_heuristic"
PROPOSALS = "proposals"
METHODS = (GAUSS_NEWTON, LM_HEURISTIC, PROPOSALS)

ARGMIN = "argmin"
SOFT_ARGMIN = "soft_argmin"
SELECTIONS = (ARGMIN, SOFT_ARGMIN)

DEFAULT_ITERS_PER_LEVEL = 3
DEFAULT_PROPOSAL_COUNT = 10
DEFAULT_LAMBDA_RANGE = (1e-5, 1e5)
DEFAULT_LM_LAMBDA = 1e-3
DEFAULT_LM_FACTOR = 10.0
DEFAULT_MIN_STEP_NORM = 1e-10
DEFAULT_SOFT_TEMPERATURE = 0.1

LM_LAMBDA_MIN = 1e-12
LM_LAMBDA_MAX = 1e12
CONDITION_FLOOR = 1e-12
ZERO_DIAGONAL = 1e-12

# level exit reasons
COMPLETED = "completed"
SMALL_STEP = "small_step"
LAMBDA_CEILING = "lambda_ceiling"
UNDERDETERMINED = "underdetermined"
NON_FINITE_STEP = "non_finite_step"
CONVERGED_REASONS = (COMPLETED, SMALL_STEP)


@dataclass(frozen=True)
class SolverConfig:
    levels: int = DEFAULT_LEVELS
    iters_per_level: int = DEFAULT_ITERS_PER_LEVEL
    method: str = PROPOSALS
    proposal_count: int = DEFAULT_PROPOSAL_COUNT
    lambda_range: tuple = DEFAULT_LAMBDA_RANGE
    lm_lambda_init: float = DEFAULT_LM_LAMBDA
    lm_factor: float = DEFAULT_LM_FACTOR
    robust: RobustLossSpec = field(default_factory=RobustLossSpec)
    min_step_norm: float = DEFAULT_MIN_STEP_NORM
    occlusion_slack: float = DEFAULT_OCCLUSION_SLACK
    proposal_selection: str = ARGMIN
    soft_argmin_temperature: float = DEFAULT_SOFT_TEMPERATURE

    def __post_init__(self):
        object.__setattr__(self, "lambda_range", tuple(float(v) for v in self.lambda_range))
        if isinstance(self.robust, dict):
            object.__setattr__(self, "robust", RobustLossSpec(**self.robust))

    def validate(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.iters_per_level < 0:
            raise ConfigError(f"iters_per_level must be >= 0, got {self.iters_per_level}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, expected one of {METHODS}")
        lo, hi = self.lambda_range
        if not (0 < lo < hi):
            raise ConfigError(f"lambda_range must satisfy 0 < min < max, got {self.lambda_range}")
        if self.method == PROPOSALS and self.proposal_count < 2:
            raise ConfigError("proposals need proposal_count >= 2")
        if not self.lm_lambda_init > 0:
            raise ConfigError("lm_lambda_init must be positive")
        if not self.lm_factor > 1:
            raise ConfigError("lm_factor must be > 1")
        if self.min_step_norm < 0:
            raise ConfigError("min_step_norm must be >= 0")
        if not self.occlusion_slack > 0:
            raise ConfigError("occlusion_slack must be positive")
        if self.proposal_selection not in SELECTIONS:
            raise ConfigError(f"unknown proposal selection {self.proposal_selection!r}")
        if not self.soft_argmin_temperature > 0:
            raise ConfigError("soft_argmin_temperature must be positive")
        self.robust.validate()
        return self

    def as_dict(self):
        out = asdict(self)
        out["lambda_range"] = list(self.lambda_range)
        return out

    @classmethod
    def from_dict(cls, values):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown solver settings: {sorted(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class TraceEntry:
    level: int
    iteration: int
    method: str
    lam: float | None
    objective: float
    step_norm: float
    valid_count: int
    accepted: bool
    delta: tuple

    def as_dict(self):
        out = asdict(self)
        out["delta"] = list(self.delta)
        return out


@dataclass(frozen=True)
class LevelDiagnostics:
    level: int
    width: int
    height: int
    sd_builds: int
    sd_rows: int
    dropped_pixels: int
    exit_reason: str


@dataclass
class AlignmentState:
    estimate: object
    level: int = 0
    lm_lambda: float = DEFAULT_LM_LAMBDA
    trace: list = field(default_factory=list)
    exit_reason: str = COMPLETED


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    family: str
    estimate: object
    trace: tuple
    levels: tuple
    converged: bool
    reason: str

    @property
    def iterations(self):
        return len(self.trace)

    @property
    def final_objective(self):
        return self.trace[-1].objective if self.trace else None

    def estimate_dict(self):
        if self.family == AFFINE:
            return {"xi": [float(v) for v in self.estimate.xi]}
        return {"matrix": self.estimate.matrix().tolist(),
                "twist": [float(v) for v in log_se3(self.estimate).as_vector()]}

    def summary(self):
        if self.family == AFFINE:
            est = " ".join(f"{v:+.5f}" for v in self.estimate.xi)
        else:
            est = " ".join(f"{v:+.5f}" for v in log_se3(self.estimate).as_vector())
        objective = self.final_objective
        objective = "n/a" if objective is None else f"{objective:.6e}"
        return (f"family={self.family} objective={objective} iterations={self.iterations} "
                f"converged={self.converged} reason={self.reason} estimate=[{est}]")

    def as_dict(self):
        return {
            "family": self.family,
            "estimate": self.estimate_dict(),
            "trace": [entry.as_dict() for entry in self.trace],
            "levels": [asdict(d) for d in self.levels],
            "converged": self.converged,
            "reason": self.reason,
            "final_objective": self.final_objective,
            "iterations": self.iterations,
        }


@dataclass(frozen=True)
class ProposalChoice:
    delta: np.ndarray
    lam: float
    objective: float
    objectives: np.ndarray


def _solve_damped(a, g):
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(g))):
        raise IllConditionedHessianError("ill-conditioned Hessian: non-finite entries")
    diag = np.diag(a)
    if np.any(diag <= 0):
        raise IllConditionedHessianError("ill-conditioned Hessian: non-positive diagonal entry")
    # conditioning is judged on the unit-diagonal (Jacobi scaled) system
    s = 1.0 / np.sqrt(diag)
    scaled = a * s[:, None] * s[None, :]
    eig = np.linalg.eigvalsh(scaled)
    if eig[-1] <= 0 or eig[0] < CONDITION_FLOOR * eig[-1]:
        raise IllConditionedHessianError(
            f"ill-conditioned Hessian: scaled eigenvalues in [{eig[0]:.3e}, {eig[-1]:.3e}]")
    try:
        factor = linalg.cho_factor(scaled, check_finite=False)
        y = linalg.cho_solve(factor, s * g, check_finite=False)
    except linalg.LinAlgError:
        # symmetric indefinite (Bunch-Kaufman) fallback
        y = linalg.solve(scaled, s * g, assume_a="sym", check_finite=False)
    delta = s * y
    if not np.all(np.isfinite(delta)):
        raise IllConditionedHessianError("ill-conditioned Hessian: non-finite step")
    return delta


def _dead_parameters(h):
    """Parameters whose curvature is zero relative to the largest diagonal entry"""
    diag = np.diag(h)
    return diag <= ZERO_DIAGONAL * max(float(diag.max()), 0.0)


def gauss_newton_step(h, g):
    """Solve H dxi = g."""
    h = np.asarray(h, dtype=np.float64)
    if np.all(np.isfinite(h)) and _dead_parameters(h).any():
        raise IllConditionedHessianError("ill-conditioned Hessian: a parameter has no curvature")
    return _solve_damped(h, g)


def lm_step(h, g, lam):
    """
    Solve (H + lam diag(H)) dxi = g. Zero diagonal entries are replaced
    by 1e-12 and decoupled, so parameters without curvature do not move.
    """
    if lam < 0:
        raise ValueError(f"damping must be non-negative, got {lam}")
    h = np.array(h, dtype=np.float64)
    g = np.array(g, dtype=np.float64)
    diag = np.diag(h).copy()
    if np.all(np.isfinite(h)):
        dead = _dead_parameters(h)
        if dead.any():
            h[dead, :] = 0.0
            h[:, dead] = 0.0
            g[dead] = 0.0
            diag[dead] = ZERO_DIAGONAL
    return _solve_damped(h + lam * np.diag(diag), g)


def lm_adapt(lam, objective_before, objective_after, factor=DEFAULT_LM_FACTOR):
    """
    Accept when the objective did not go up: lambda / factor.
    Otherwise reject: lambda * factor. Both clamped to [1e-12, 1e12].
    """
    if factor <= 1:
        raise ValueError("lm factor must be > 1")
    if np.isfinite(objective_after) and objective_after <= objective_before:
        return True, max(lam / factor, LM_LAMBDA_MIN)
    return False, min(lam * factor, LM_LAMBDA_MAX)


def propose_dampings(cfg):
    """cfg.proposal_count values spaced geometrically over cfg.lambda_range, ends included"""
    lo, hi = cfg.lambda_range
    return np.geomspace(lo, hi, cfg.proposal_count)


def proposal_step(h, g, proposals, evaluate, selection=ARGMIN,
                  temperature=DEFAULT_SOFT_TEMPERATURE):
    """
    Take one LM step per damping proposal, score each with `evaluate`
    (the true objective after the update) and keep the best. Ties go to
    the larger damping.
    """
    proposals = np.asarray(proposals, dtype=np.float64)
    if proposals.size < 2:
        raise ConfigError("proposal_step needs at least two proposals")

    deltas = []
    objectives = np.full(proposals.size, np.inf)
    for i, lam in enumerate(proposals):
        try:
            delta = lm_step(h, g, lam)
        except IllConditionedHessianError:
            deltas.append(None)
            continue
        deltas.append(delta)
        value = float(evaluate(delta))
        if np.isfinite(value):
            objectives[i] = value

    finite = np.isfinite(objectives)
    if not finite.any():
        raise NoAdmissibleStepError("no admissible step: every proposal is non-finite")
    best_value = objectives[finite].min()
    ties = np.flatnonzero(objectives == best_value)
    best = int(ties[np.argmax(proposals[ties])])
    choice = ProposalChoice(deltas[best], float(proposals[best]), float(best_value), objectives)

    if selection == SOFT_ARGMIN:
        choice = _soft_argmin(h, g, proposals, choice, evaluate, temperature)
    return choice


def _soft_argmin(h, g, proposals, choice, evaluate, temperature):
    finite = np.isfinite(choice.objectives)
    tau = temperature * max(choice.objective, 1e-12)
    logits = -(choice.objectives[finite] - choice.objective) / tau
    p = np.exp(logits - logits.max())
    p /= p.sum()
    lam = float(np.exp(np.sum(p * np.log(proposals[finite]))))
    try:
        delta = lm_step(h, g, lam)
    except IllConditionedHessianError:
        return choice
    value = float(evaluate(delta))
    if np.isfinite(value) and value <= choice.objective:
        return ProposalChoice(delta, lam, value, choice.objectives)
    return choice


class AffineLevel:
    """Residuals and updates of the affine family at one pyramid level."""
    family = AFFINE

    def __init__(self, template, gradients, image):
        self.shape = template.shape
        self.sd = steepest_descent_image(gradients, AFFINE)
        self.sd_builds = 1
        self.xs, self.ys = self.sd.pixel_coords()
        self.template_values = template.data.ravel()[self.sd.index]
        self.image = image

    def residual(self, xi):
        xw, yw = warp_affine(self.xs, self.ys, xi)
        values, valid = bilinear_sample_many(self.image, xw, yw)
        return ResidualField(np.where(valid, values - self.template_values, 0.0), valid)

    def update(self, xi, delta):
        """xi o (dxi)^-1"""
        return affine_compose(xi, affine_inverse(AffineParams(delta)))


class RigidLevel:
    """Residuals and updates of the rigid family at one pyramid level."""
    family = RIGID

    def __init__(self, template, gradients, template_depth, image, image_depth,
                 intrinsics, occlusion_slack=DEFAULT_OCCLUSION_SLACK):
        self.shape = template.shape
        self.intrinsics = intrinsics
        self.sd = steepest_descent_image(gradients, RIGID, intrinsics, template_depth)
        self.sd_builds = 1
        self.xs, self.ys = self.sd.pixel_coords()
        self.inverse_depth = template_depth.data.ravel()[self.sd.index]
        self.template_values = template.data.ravel()[self.sd.index]
        self.image = image
        self.image_depth = image_depth
        self.occlusion_slack = occlusion_slack

    def residual(self, transform):
        xw, yw, zw, valid = warp_rigid(self.xs, self.ys, self.inverse_depth, self.intrinsics,
                                       transform, shape=self.image.shape)
        if self.image_depth is not None:
            valid &= occlusion_mask(xw, yw, zw, self.image_depth, self.occlusion_slack)
        values, valid = sample_warped(self.image, xw, yw, valid)
        return ResidualField(np.where(valid, values - self.template_values, 0.0), valid)

    def update(self, transform, delta):
        """T . exp(dxi)^-1"""
        return compose_rigid(transform, invert_rigid(exp_se3(delta)))


@dataclass(frozen=True, eq=False)
class LevelData:
    """A level problem with its weights frozen at level entry."""
    level: int
    problem: object
    weights: np.ndarray
    support: np.ndarray

    def residual(self, estimate):
        return self.problem.residual(estimate).restrict(self.support)

    def objective(self, estimate):
        return weighted_objective(self.residual(estimate), self.weights)


def prepare_level(problem, estimate, cfg, level=0):
    r0 = problem.residual(estimate)
    if r0.valid_count < MIN_VALID_PIXELS:
        raise UnderdeterminedSystemError(
            f"underdetermined system: {r0.valid_count} valid pixels at level entry")
    weights = compute_weights(r0, cfg.robust)
    return LevelData(level, problem, weights, r0.valid.copy())


def _admissible_objective(data, estimate, delta):
    try:
        return data.objective(data.problem.update(estimate, delta))
    except ICAlignError:
        return np.inf


def ic_level(state, data, cfg):
    """Run cfg.iters_per_level IC updates on one level; returns the updated state."""
    state = replace(state, trace=list(state.trace), level=data.level, exit_reason=COMPLETED)
    problem, weights = data.problem, data.weights
    proposals = propose_dampings(cfg) if cfg.method == PROPOSALS else None
    estimate = state.estimate
    r = data.residual(estimate)

    for k in range(cfg.iters_per_level):
        try:
            h, g = weighted_normal_equations(problem.sd, weights, r)
        except UnderdeterminedSystemError as err:
            logger.warning(f"level {data.level} iteration {k}: {err}; leaving level")
            state.exit_reason = UNDERDETERMINED
            break
        before = weighted_objective(r, weights)
        lam = None
        candidate, r_new, after = None, None, np.inf

        try:
            if cfg.method == GAUSS_NEWTON:
                try:
                    delta = gauss_newton_step(h, g)
                except IllConditionedHessianError as err:
                    lam = cfg.lm_lambda_init
                    logger.warning(f"level {data.level} iteration {k}: {err}; "
                                   f"falling back to LM with lambda={lam:g}")
                    delta = lm_step(h, g, lam)
                candidate = problem.update(estimate, delta)
            elif cfg.method == LM_HEURISTIC:
                lam = state.lm_lambda
                delta = lm_step(h, g, lam)
                try:
                    candidate = problem.update(estimate, delta)
                except ICAlignError:
                    candidate = None
            else:
                choice = proposal_step(
                    h, g, proposals,
                    lambda d: _admissible_objective(data, estimate, d),
                    selection=cfg.proposal_selection,
                    temperature=cfg.soft_argmin_temperature)
                delta, lam = choice.delta, choice.lam
                candidate = problem.update(estimate, delta)
        except ICAlignError as err:
            raise err.with_context(level=data.level, iteration=k)

        if candidate is not None:
            r_new = data.residual(candidate)
            after = weighted_objective(r_new, weights)

        if cfg.method == LM_HEURISTIC:
            accepted, state.lm_lambda = lm_adapt(lam, before, after, cfg.lm_factor)
        else:
            accepted = bool(np.isfinite(after))

        if accepted:
            estimate, r, objective = candidate, r_new, after
        else:
            objective = before

        step_norm = float(np.linalg.norm(delta))
        state.trace.append(TraceEntry(
            level=data.level, iteration=k, method=cfg.method,
            lam=None if lam is None else float(lam), objective=float(objective),
            step_norm=step_norm, valid_count=r.valid_count, accepted=accepted,
            delta=tuple(float(v) for v in delta)))
        logger.debug(f"level {data.level} it {k} {cfg.method}: lambda={lam} "
                     f"objective={objective:.6e} step={step_norm:.3e} "
                     f"valid={r.valid_count} accepted={accepted}")

        if not accepted and cfg.method == LM_HEURISTIC and lam >= LM_LAMBDA_MAX:
            logger.warning(f"level {data.level}: lambda at ceiling with a rejected step")
            state.exit_reason = LAMBDA_CEILING
            break
        if not accepted and cfg.method != LM_HEURISTIC:
            state.exit_reason = NON_FINITE_STEP
            break
        if accepted and step_norm < cfg.min_step_norm:
            state.exit_reason = SMALL_STEP
            break

    state.estimate = estimate
    return state


def affine_to_level(xi, from_level, to_level):
    """Re-express affine parameters between pyramid levels (x_coarse = (x_fine - 0.5) / 2)."""
    m = xi.matrix()
    a = m[:2, :2]
    b = m[:2, 2].copy()
    offset = 0.5 * (a - np.eye(2)) @ np.ones(2)
    for _ in range(max(to_level - from_level, 0)):
        b = 0.5 * (b + offset)
    for _ in range(max(from_level - to_level, 0)):
        b = 2.0 * b - offset
    m[:2, 2] = b
    return AffineParams.from_matrix(m)


def _build_level(family, tpyr, ipyr, level, cfg, intrinsics):
    template = tpyr.levels[level]
    image = ipyr.levels[level]
    if family == AFFINE:
        return AffineLevel(template, tpyr.gradients[level], image)
    image_depth = ipyr.depth[level] if ipyr.depth is not None else None
    return RigidLevel(template, tpyr.gradients[level], tpyr.depth[level], image, image_depth,
                      intrinsics.downscaled(level), cfg.occlusion_slack)


def align(template, image, family, cfg=None, intrinsics=None, initial=None):
    """
    Coarse-to-fine IC alignment of `image` onto `template` (both Frames).

    affine: estimate maps template pixels to image pixels.
    rigid: estimate maps template-camera points to image-camera points;
    needs template depth and intrinsics (image depth enables z-buffering).
    """
    cfg = (cfg or SolverConfig()).validate()
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}, expected one of {FAMILIES}")
    if template.shape != image.shape:
        raise ConfigError(f"frames differ in size: {template.shape} vs {image.shape}")
    if family == RIGID and (template.depth is None or intrinsics is None):
        raise ConfigError("rigid alignment needs template depth and camera intrinsics")

    tpyr = frame_pyramid(template, cfg.levels)
    ipyr = frame_pyramid(image, cfg.levels)
    coarsest = cfg.levels - 1

    if family == AFFINE:
        estimate = affine_to_level(initial or AffineParams.zero(), 0, coarsest)
    else:
        estimate = initial or RigidTransform.identity()
    state = AlignmentState(estimate, level=coarsest, lm_lambda=cfg.lm_lambda_init)
    diagnostics = []

    for level in range(coarsest, -1, -1):
        problem = _build_level(family, tpyr, ipyr, level, cfg, intrinsics)
        logger.debug(f"level {level}: {problem.shape[1]}x{problem.shape[0]}, "
                     f"{len(problem.sd)} rows, {problem.sd.dropped} dropped")
        try:
            data = prepare_level(problem, state.estimate, cfg, level)
        except ICAlignError as err:
            raise err.with_context(level=level)
        state.lm_lambda = cfg.lm_lambda_init
        state = ic_level(state, data, cfg)
        diagnostics.append(LevelDiagnostics(
            level=level, width=problem.shape[1], height=problem.shape[0],
            sd_builds=problem.sd_builds, sd_rows=len(problem.sd),
            dropped_pixels=problem.sd.dropped, exit_reason=state.exit_reason))
        if family == AFFINE and level > 0:
            state.estimate = affine_to_level(state.estimate, level, level - 1)

    reasons = [d.exit_reason for d in diagnostics]
    failed = [r for r in reasons if r not in CONVERGED_REASONS]
    reason = failed[0] if failed else reasons[-1]
    return AlignmentResult(family, state.estimate, tuple(state.trace), tuple(diagnostics),
                           converged=not failed, reason=reason)
