from __future__ import annotations

import math

import numpy as np
import pytest
from wireframe3d.camera import Keypoints2D, ParamVector, geodesic_angle, project_skeleton, rotation_matrix
from wireframe3d.core import DegenerateInput
from wireframe3d.eval import canonical_shape, rmse_3d
from wireframe3d.fit import (
    FitConfig,
    fit_from_heatmaps,
    fit_keypoints,
    fit_parallel_init,
    fit_perspective,
    parallel_candidates,
    reflect_depth,
    reprojection_cost,
)
from wireframe3d.skeleton import BaseShapeSet
from wireframe3d.synth import HeatmapStack, SamplerConfig, make_sample


def chair_params(inv_f: float = 0.5) -> ParamVector:
    return ParamVector(
        alpha_free=np.array([0.4, -0.3, 0.6]),
        azimuth=1.0,
        elevation=0.35,
        tilt=0.1,
        t=(0.05, -0.08, 0.1),
        inv_f=inv_f,
    )


def nudged(s: ParamVector, amount: float) -> ParamVector:
    values = s.to_array()
    values[:-1] += amount * np.cos(np.arange(values.size - 1))
    return ParamVector.from_array(values)


def test_fit_config_validation() -> None:
    with pytest.raises(ValueError):
        FitConfig(restarts=0)
    with pytest.raises(ValueError):
        FitConfig(method="newton")  # type: ignore[arg-type]
    with pytest.raises(ValueError):
        FitConfig(damping_up=0.5)


def test_reprojection_cost_of_truth_is_zero(chair: BaseShapeSet) -> None:
    s = chair_params()
    x = project_skeleton(s, chair)

    assert reprojection_cost(s, x, chair) == 0.0


def test_reprojection_cost_is_mean_squared_distance(chair: BaseShapeSet) -> None:
    s = chair_params()
    x = project_skeleton(s, chair)
    shifted = Keypoints2D.all_visible(x.coords + np.array([[0.03], [0.04]]))

    assert reprojection_cost(s, shifted, chair) == pytest.approx(0.05**2, rel=1e-12)


def test_reprojection_cost_ignores_invisible_keypoints(chair: BaseShapeSet) -> None:
    s = chair_params()
    coords = project_skeleton(s, chair).coords.copy()
    coords[:, 0] += 10.0
    visible = np.ones(10, dtype=bool)
    visible[0] = False

    assert reprojection_cost(s, Keypoints2D(coords, visible), chair) == pytest.approx(0.0, abs=1e-30)


def test_reprojection_cost_behind_camera_is_infinite(chair: BaseShapeSet) -> None:
    x = project_skeleton(chair_params(), chair)
    values = chair_params().to_array()
    values[-2] = -5.0  # t_z

    assert reprojection_cost(ParamVector.from_array(values), x, chair) == math.inf


def test_too_few_visible_keypoints(chair: BaseShapeSet) -> None:
    x = project_skeleton(chair_params(), chair)
    visible = np.zeros(10, dtype=bool)
    visible[:3] = True

    with pytest.raises(DegenerateInput, match="at least 4"):
        fit_keypoints(Keypoints2D(x.coords, visible), chair)


def test_perspective_refinement_converges_locally(chair: BaseShapeSet) -> None:
    truth = chair_params()
    x = project_skeleton(truth, chair)

    result = fit_perspective(x, chair, nudged(truth, 0.05), FitConfig(restarts=1))

    assert result.converged
    assert result.final_cost < 1e-12
    np.testing.assert_allclose(result.s_hat.to_array(), truth.to_array(), atol=1e-5)


@pytest.mark.parametrize("method", ["lm", "gd"])
def test_cost_history_strictly_decreases(chair: BaseShapeSet, method: str) -> None:
    truth = chair_params()
    x = project_skeleton(truth, chair)
    cfg = FitConfig(restarts=1, method=method, max_iters=50)

    result = fit_perspective(x, chair, nudged(truth, 0.1), cfg)

    history = np.array(result.history)
    assert history.size > 1
    assert np.all(np.diff(history) < 0)
    assert result.final_cost == history[-1]


def test_gradient_descent_reduces_cost_less_than_lm(chair: BaseShapeSet) -> None:
    truth = chair_params()
    x = project_skeleton(truth, chair)
    init = nudged(truth, 0.1)

    lm = fit_perspective(x, chair, init, FitConfig(restarts=1, max_iters=30))
    gd = fit_perspective(x, chair, init, FitConfig(restarts=1, max_iters=30, method="gd"))

    assert gd.final_cost < reprojection_cost(init, x, chair)
    assert lm.final_cost <= gd.final_cost


def test_restarts_keep_the_best(chair: BaseShapeSet) -> None:
    truth = chair_params()
    x = project_skeleton(truth, chair)

    result = fit_perspective(x, chair, nudged(truth, 0.2), FitConfig(restarts=4, max_iters=100))

    assert result.restarts_used == 4
    assert len(result.restart_costs) == 4
    assert result.final_cost == min(result.restart_costs)


def test_frozen_inv_f_is_kept(chair: BaseShapeSet) -> None:
    truth = chair_params()
    x = project_skeleton(truth, chair)
    init = nudged(truth, 0.05)

    result = fit_perspective(x, chair, init, FitConfig(restarts=3, freeze_inv_f=True, max_iters=50))

    assert result.s_hat.inv_f == init.inv_f


def test_parallel_init_on_parallel_data(chair: BaseShapeSet) -> None:
    truth = chair_params(inv_f=0.0)
    x = project_skeleton(truth, chair)

    s = fit_parallel_init(x, chair)

    assert s.inv_f == 0.0
    assert reprojection_cost(s, x, chair) < 1e-10


def test_reflected_twin_has_same_parallel_projection(toy_flat: BaseShapeSet) -> None:
    s = ParamVector(
        alpha_free=np.array([0.3]), azimuth=0.7, elevation=0.4, tilt=0.0, t=(0.1, -0.1, 0.0), inv_f=0.0
    )
    x = project_skeleton(s, toy_flat)

    twin = reflect_depth(s, toy_flat)

    assert reprojection_cost(twin, x, toy_flat) < 1e-20
    rotation = rotation_matrix(s.decode()[1])
    assert geodesic_angle(rotation, rotation_matrix(twin.decode()[1])) > 0.1


def test_parallel_candidates_returns_both_twins(chair: BaseShapeSet) -> None:
    x = project_skeleton(chair_params(inv_f=0.0), chair)

    candidates = parallel_candidates(x, chair, FitConfig(restarts=4))

    assert len(candidates) == 2
    assert all(candidate.inv_f == 0.0 for candidate in candidates)


def test_fit_keypoints_does_not_depend_on_threads(car: BaseShapeSet) -> None:
    sample = make_sample(SamplerConfig(seed=3, perturbation=0.0), car, 0)
    cfg = FitConfig(restarts=3, max_iters=60)

    serial = fit_keypoints(sample.x_true, car, cfg)
    threaded = fit_keypoints(sample.x_true, car, FitConfig(restarts=3, max_iters=60, threads=3))

    np.testing.assert_array_equal(serial.s_hat.to_array(), threaded.s_hat.to_array())
    assert serial.final_cost == threaded.final_cost


def test_fit_from_clean_heatmaps_beats_quantization_floor(chair: BaseShapeSet) -> None:
    # ranges that keep every keypoint on the heatmap grid
    cfg = SamplerConfig(
        seed=11,
        perturbation=0.0,
        alpha_range=(-0.5, 0.5),
        tx_range=(-0.05, 0.05),
        ty_range=(-0.05, 0.05),
        tz_range=(-0.05, 0.05),
        inv_f_range=(0.0, 0.2),
    )
    sample = make_sample(cfg, chair, 0)

    result = fit_from_heatmaps(sample.heatmaps, chair)

    # argmax keypoints are within half a cell of the truth in each coordinate
    assert result.final_cost <= 2 * 0.025**2


@pytest.mark.slow
def test_round_trip_recovers_clean_instances(chair: BaseShapeSet) -> None:
    cfg = SamplerConfig(seed=21, perturbation=0.0)
    recovered = 0
    for index in range(100):
        sample = make_sample(cfg, chair, index)
        result = fit_keypoints(sample.x_true, chair)
        error = rmse_3d(canonical_shape(result.s_hat, chair), canonical_shape(sample.s_true, chair))
        recovered += error < 1e-3
    assert recovered >= 95


@pytest.mark.slow
def test_frozen_parallel_refinement_keeps_the_parallel_optimum(chair: BaseShapeSet) -> None:
    sampler = SamplerConfig(seed=31, perturbation=0.0, inv_f_range=(0.0, 0.0))
    cfg = FitConfig(restarts=1, freeze_inv_f=True)
    for index in range(50):
        x = make_sample(sampler, chair, index).x_true
        init = fit_parallel_init(x, chair)

        result = fit_perspective(x, chair, init, cfg)

        assert result.s_hat.inv_f == 0.0
        assert result.final_cost == pytest.approx(reprojection_cost(init, x, chair), abs=1e-8)


@pytest.mark.filterwarnings("error::scipy.linalg.LinAlgWarning")
def test_blank_heatmaps_fit_without_crashing(chair: BaseShapeSet) -> None:
    blank = HeatmapStack(np.zeros((10, 30, 40)))

    result = fit_from_heatmaps(blank, chair, FitConfig(restarts=2, max_iters=100))

    assert isinstance(result.converged, bool)
    assert math.isfinite(result.final_cost)
    assert np.all(np.isfinite(result.s_hat.to_array()))
