"""Optimization-based recovery of skeleton and camera parameters from 2D keypoints.

Fitting runs in two stages: a parallel-projection fit (alternating closed-form
least squares on the structural weights with damped Gauss-Newton steps on the
pose), followed by Levenberg-Marquardt refinement of the full parameter vector
under perspective projection.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Literal, NamedTuple

import numpy as np
from numpy.typing import NDArray
from scipy import linalg

from wireframe3d.camera import (
    AZIMUTH,
    ELEVATION,
    INV_F,
    T_X,
    T_Y,
    T_Z,
    TILT,
    Keypoints2D,
    ParamVector,
    euler_from_rotation,
    project_skeleton,
    projection_jacobian,
    rotation_matrix,
)
from wireframe3d.core import DegenerateInput, DepthSingularity, make_rng, parallel_map
from wireframe3d.skeleton import BaseShapeSet, compose_skeleton
from wireframe3d.synth import HeatmapStack, argmax_keypoints

logger = logging.getLogger(__name__)

MIN_VISIBLE = 4
MAX_DAMPING = 1e16
ALTERNATION_ITERS = 60
POSE_STEPS_PER_ALTERNATION = 3


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 8
    max_iters: int = 500
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    rel_tol: float = 1e-10
    grad_tol: float = 1e-9
    method: Literal["lm", "gd"] = "lm"
    freeze_inv_f: bool = False
    jitter_alpha: float = 0.2
    jitter_angle: float = 0.2
    jitter_t: float = 0.02
    jitter_inv_f: float = 0.3
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.method not in ("lm", "gd"):
            raise ValueError(f"unknown fit method {self.method!r}")
        if self.initial_damping <= 0 or self.damping_up <= 1 or not 0 < self.damping_down < 1:
            raise ValueError("damping schedule must satisfy lambda > 0, up > 1, 0 < down < 1")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class FitResult(NamedTuple):
    s_hat: ParamVector
    final_cost: float
    converged: bool
    restarts_used: int
    restart_costs: tuple[float, ...] = ()
    history: tuple[float, ...] = ()


class _Trajectory(NamedTuple):
    values: NDArray[np.float64]
    cost: float
    converged: bool
    history: tuple[float, ...]


ResidualFn = Callable[[NDArray[np.float64]], NDArray[np.float64]]
JacobianFn = Callable[[NDArray[np.float64]], NDArray[np.float64]]


def _visible_rows(x_obs: Keypoints2D) -> NDArray[np.bool_]:
    return np.concatenate([x_obs.visible, x_obs.visible])


def _n_visible(x_obs: Keypoints2D) -> int:
    return int(np.count_nonzero(x_obs.visible))


def _residuals(
    values: NDArray[np.float64], x_obs: Keypoints2D, bases: BaseShapeSet
) -> NDArray[np.float64]:
    projected = project_skeleton(ParamVector.from_array(values), bases)
    residuals: NDArray[np.float64] = (projected.coords - x_obs.coords).reshape(-1)
    return residuals[_visible_rows(x_obs)]


def _jacobian(
    values: NDArray[np.float64], x_obs: Keypoints2D, bases: BaseShapeSet
) -> NDArray[np.float64]:
    jac = projection_jacobian(ParamVector.from_array(values), bases)
    return jac[_visible_rows(x_obs)]


def reprojection_cost(s: ParamVector, x_obs: Keypoints2D, bases: BaseShapeSet) -> float:
    """Mean squared 2D distance over visible keypoints; infinite behind the camera."""
    n_visible = _n_visible(x_obs)
    if n_visible == 0:
        return 0.0
    try:
        residuals = _residuals(s.to_array(), x_obs, bases)
    except DepthSingularity:
        return math.inf
    return float(residuals @ residuals) / n_visible


def _clamp(values: NDArray[np.float64]) -> NDArray[np.float64]:
    values = values.copy()
    values[INV_F] = max(0.0, values[INV_F])
    return values


def _solve_damped(system: NDArray[np.float64], rhs: NDArray[np.float64]) -> NDArray[np.float64]:
    """Solve the damped normal equations by Cholesky, falling back to least squares."""
    if not (np.all(np.isfinite(system)) and np.all(np.isfinite(rhs))):
        # a zero step is rejected, which raises the damping
        return np.zeros_like(rhs)
    try:
        step: NDArray[np.float64] = linalg.cho_solve(linalg.cho_factor(system), rhs)
    except (linalg.LinAlgError, ValueError):
        return np.asarray(linalg.lstsq(system, rhs)[0], dtype=np.float64)
    if not np.all(np.isfinite(step)):
        return np.asarray(linalg.lstsq(system, rhs)[0], dtype=np.float64)
    return step


def _least_squares(
    residual_fn: ResidualFn,
    jacobian_fn: JacobianFn,
    start: NDArray[np.float64],
    free: NDArray[np.bool_],
    n_points: int,
    cfg: FitConfig,
    max_iters: int,
) -> _Trajectory:
    """Damped Gauss-Newton (or plain gradient descent) with a strict descent rule."""

    def cost_of(values: NDArray[np.float64]) -> tuple[float, NDArray[np.float64] | None]:
        try:
            residuals = residual_fn(values)
        except DepthSingularity:
            return math.inf, None
        return float(residuals @ residuals) / n_points, residuals

    values = _clamp(start)
    cost, residuals = cost_of(values)
    if residuals is None:
        return _Trajectory(values, cost, False, (cost,))

    damping = cfg.initial_damping
    step_size = 1.0
    history = [cost]
    converged = False
    for _ in range(max_iters):
        jac = jacobian_fn(values)
        jac[:, ~free] = 0.0
        gradient = 2.0 * (jac.T @ residuals) / n_points
        if cost == 0.0 or np.max(np.abs(gradient)) < cfg.grad_tol:
            converged = True
            break

        accepted = False
        while not accepted:
            if cfg.method == "lm":
                jtj = jac.T @ jac
                system = jtj + damping * np.diag(np.maximum(np.diag(jtj), 1e-12))
                step = _solve_damped(system, -(jac.T @ residuals))
            else:
                step = -step_size * gradient
            step[~free] = 0.0
            trial = _clamp(values + step)
            trial_cost, trial_residuals = cost_of(trial)
            if trial_residuals is not None and trial_cost < cost:
                accepted = True
                damping = max(damping * cfg.damping_down, 1e-15)
                step_size *= 2.0
            else:
                damping *= cfg.damping_up
                step_size *= 0.5
                if cfg.method == "lm" and damping > MAX_DAMPING:
                    break
                if cfg.method == "gd" and step_size < 1e-16:
                    break

        if not accepted:
            # no descent direction left at working precision
            converged = True
            break

        decrease = (cost - trial_cost) / max(cost, 1e-300)
        values, cost, residuals = trial, trial_cost, trial_residuals
        history.append(cost)
        logger.debug("cost %.6g (damping %.3g)", cost, damping)
        if decrease < cfg.rel_tol:
            converged = True
            break

    return _Trajectory(values, cost, converged, tuple(history))


def _free_mask(k: int, *, pose_only: bool, parallel: bool, freeze_inv_f: bool = False) -> NDArray[np.bool_]:
    free = np.ones((k - 1) + 7, dtype=bool)
    if pose_only:
        free[: k - 1] = False
    if parallel:
        free[T_Z] = False
        free[INV_F] = False
    if freeze_inv_f:
        free[INV_F] = False
    return free


def _solve_alpha(
    values: NDArray[np.float64], x_obs: Keypoints2D, bases: BaseShapeSet
) -> NDArray[np.float64]:
    """Closed-form structural weights given the pose, under parallel projection."""
    s = ParamVector.from_array(values)
    _, cam = s.decode()
    rot2 = rotation_matrix(cam)[:2]
    rows = x_obs.visible
    target = x_obs.coords - rot2 @ bases.bases[0] - cam.translation[:2, None]
    design = np.stack([(rot2 @ basis)[:, rows].reshape(-1) for basis in bases.bases[1:]], axis=1)
    values = values.copy()
    if design.shape[1]:
        values[: bases.k - 1] = linalg.lstsq(design, target[:, rows].reshape(-1))[0]
    return values


def _parallel_start(
    x_obs: Keypoints2D, bases: BaseShapeSet, restart: int, cfg: FitConfig
) -> NDArray[np.float64]:
    rng = make_rng(cfg.seed, 7919, restart)
    values = np.zeros((bases.k - 1) + 7)
    values[AZIMUTH] = 2 * math.pi * restart / cfg.restarts
    values[ELEVATION] = rng.uniform(-0.2, 0.6)
    values[TILT] = 0.0
    _, cam = ParamVector.from_array(values).decode()
    mean_projection = (rotation_matrix(cam)[:2] @ bases.bases[0]).mean(axis=1)
    observed = x_obs.coords[:, x_obs.visible].mean(axis=1)
    values[T_X], values[T_Y] = observed - mean_projection
    return values


def _parallel_trajectory(
    x_obs: Keypoints2D, bases: BaseShapeSet, start: NDArray[np.float64], cfg: FitConfig
) -> _Trajectory:
    n_points = _n_visible(x_obs)

    def residual_fn(v: NDArray[np.float64]) -> NDArray[np.float64]:
        return _residuals(v, x_obs, bases)

    def jacobian_fn(v: NDArray[np.float64]) -> NDArray[np.float64]:
        return _jacobian(v, x_obs, bases)

    pose_free = _free_mask(bases.k, pose_only=True, parallel=True)
    values = start
    cost = math.inf
    for _ in range(ALTERNATION_ITERS):
        values = _solve_alpha(values, x_obs, bases)
        step = _least_squares(
            residual_fn, jacobian_fn, values, pose_free, n_points, cfg, POSE_STEPS_PER_ALTERNATION
        )
        values = step.values
        if cost - step.cost <= cfg.rel_tol * max(cost, 1e-300) or step.cost == 0.0:
            cost = step.cost
            break
        cost = step.cost

    joint_free = _free_mask(bases.k, pose_only=False, parallel=True)
    return _least_squares(residual_fn, jacobian_fn, values, joint_free, n_points, cfg, cfg.max_iters)


def _best(trajectories: list[_Trajectory]) -> int:
    """Index of the lowest-cost trajectory; ties go to the lowest index."""
    return min(range(len(trajectories)), key=lambda i: (trajectories[i].cost, i))


def _check_visible(x_obs: Keypoints2D) -> None:
    n_visible = _n_visible(x_obs)
    if n_visible < MIN_VISIBLE:
        raise DegenerateInput(f"need at least {MIN_VISIBLE} visible keypoints, got {n_visible}")


def fit_parallel_init(
    x_obs: Keypoints2D, bases: BaseShapeSet, cfg: FitConfig | None = None
) -> ParamVector:
    """Best parallel-projection fit (``inv_f = 0``) over ``cfg.restarts`` starting azimuths."""
    cfg = cfg or FitConfig()
    _check_visible(x_obs)
    trajectories = parallel_map(
        lambda r: _parallel_trajectory(x_obs, bases, _parallel_start(x_obs, bases, r, cfg), cfg),
        range(cfg.restarts),
        cfg.threads,
    )
    best = trajectories[_best(trajectories)]
    logger.debug("parallel init cost %.6g", best.cost)
    return ParamVector.from_array(best.values)


def _fit_rigid(
    points: NDArray[np.float64], bases: BaseShapeSet, alpha_free: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Structural weights, rotation and translation best matching camera-frame ``points`` in 3D."""
    alpha_free = alpha_free.copy()
    rotation = np.eye(3)
    translation = np.zeros(3)
    for _ in range(30):
        shape = bases.bases[0] + np.tensordot(alpha_free, bases.bases[1:], axes=1)
        shape_centered = shape - shape.mean(axis=1, keepdims=True)
        points_centered = points - points.mean(axis=1, keepdims=True)
        u, _, vt = linalg.svd(points_centered @ shape_centered.T)
        sign = np.sign(linalg.det(u @ vt)) or 1.0
        rotation = u @ np.diag([1.0, 1.0, sign]) @ vt
        translation = points.mean(axis=1) - rotation @ shape.mean(axis=1)
        if bases.k > 1:
            design = np.stack([(rotation @ basis).reshape(-1) for basis in bases.bases[1:]], axis=1)
            target = points - rotation @ bases.bases[0] - translation[:, None]
            alpha_free = linalg.lstsq(design, target.reshape(-1))[0]

    azimuth, elevation, tilt = euler_from_rotation(rotation)
    return np.concatenate(
        [alpha_free, [azimuth, elevation, tilt, translation[0], translation[1], 0.0, 0.0]]
    )


def reflect_depth(s: ParamVector, bases: BaseShapeSet) -> ParamVector:
    """The depth-reflected twin of a parallel-projection solution.

    Camera-frame depths are mirrored about the object's mean depth and the
    model is re-fitted to the mirrored points in 3D.
    """
    alpha, cam = s.decode()
    shape = compose_skeleton(alpha, bases)
    points = rotation_matrix(cam) @ shape.coords + cam.translation[:, None]
    mean_depth = points[2].mean()
    points[2] = 2 * mean_depth - points[2]
    return ParamVector.from_array(_fit_rigid(points, bases, s.alpha_free))


def parallel_candidates(
    x_obs: Keypoints2D, bases: BaseShapeSet, cfg: FitConfig | None = None
) -> list[ParamVector]:
    """The parallel-projection fit and its depth-reflected twin, each polished in 2D."""
    cfg = cfg or FitConfig()
    primary = fit_parallel_init(x_obs, bases, cfg)
    reflected = _parallel_trajectory(
        x_obs, bases, _solve_alpha(reflect_depth(primary, bases).to_array(), x_obs, bases), cfg
    )
    return [primary, ParamVector.from_array(reflected.values)]


def _jittered_start(
    init: NDArray[np.float64], k: int, restart: int, cfg: FitConfig
) -> NDArray[np.float64]:
    if restart == 0:
        return init.copy()
    rng = make_rng(cfg.seed, restart)
    values = init.copy()
    values[: k - 1] += rng.normal(0.0, cfg.jitter_alpha, k - 1)
    values[AZIMUTH : TILT + 1] += rng.normal(0.0, cfg.jitter_angle, 3)
    values[T_X : T_Z + 1] += rng.normal(0.0, cfg.jitter_t, 3)
    if not cfg.freeze_inv_f:
        values[INV_F] = abs(values[INV_F] + rng.normal(0.0, cfg.jitter_inv_f))
    return values


def fit_perspective(
    x_obs: Keypoints2D,
    bases: BaseShapeSet,
    init: ParamVector,
    cfg: FitConfig | None = None,
) -> FitResult:
    """Refine ``init`` under perspective projection, keeping the best of all restarts."""
    cfg = cfg or FitConfig()
    _check_visible(x_obs)
    n_points = _n_visible(x_obs)
    free = _free_mask(bases.k, pose_only=False, parallel=False, freeze_inv_f=cfg.freeze_inv_f)
    start = init.to_array()

    def run(restart: int) -> _Trajectory:
        return _least_squares(
            lambda v: _residuals(v, x_obs, bases),
            lambda v: _jacobian(v, x_obs, bases),
            _jittered_start(start, bases.k, restart, cfg),
            free,
            n_points,
            cfg,
            cfg.max_iters,
        )

    trajectories = parallel_map(run, range(cfg.restarts), cfg.threads)
    best_index = _best(trajectories)
    best = trajectories[best_index]
    return FitResult(
        s_hat=ParamVector.from_array(best.values),
        final_cost=best.cost,
        converged=best.converged,
        restarts_used=len(trajectories),
        restart_costs=tuple(t.cost for t in trajectories),
        history=best.history,
    )


def fit_keypoints(
    x_obs: Keypoints2D, bases: BaseShapeSet, cfg: FitConfig | None = None
) -> FitResult:
    """Parallel initialization followed by perspective refinement of both depth candidates."""
    cfg = cfg or FitConfig()
    results = [
        fit_perspective(x_obs, bases, candidate, cfg)
        for candidate in parallel_candidates(x_obs, bases, cfg)
    ]
    return min(results, key=lambda result: result.final_cost)


def fit_from_heatmaps(
    h: HeatmapStack, bases: BaseShapeSet, cfg: FitConfig | None = None
) -> FitResult:
    return fit_keypoints(argmax_keypoints(h), bases, cfg)
