from __future__ import annotations

import math

import numpy as np
import pytest
from wireframe3d.camera import (
    AZIMUTH,
    INV_F,
    CameraParams,
    ParamVector,
    euler_from_rotation,
    geodesic_angle,
    param_layout,
    point_jacobian,
    project_point,
    project_shape,
    project_skeleton,
    projection_jacobian,
    rotation_derivatives,
    rotation_matrix,
    wrap_angle,
)
from wireframe3d.core import DepthSingularity, DimensionError
from wireframe3d.skeleton import BaseShapeSet, Shape3D


def identity_camera(inv_f: float = 0.0, t: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> CameraParams:
    return CameraParams(azimuth=0.0, elevation=0.0, tilt=0.0, t=t, inv_f=inv_f)


def random_params(bases: BaseShapeSet, rng: np.random.Generator) -> ParamVector:
    return ParamVector(
        alpha_free=rng.uniform(-1, 1, bases.k - 1),
        azimuth=rng.uniform(0, 2 * math.pi),
        elevation=rng.uniform(-math.pi / 6, math.pi / 3),
        tilt=rng.uniform(-math.pi / 12, math.pi / 12),
        t=tuple(rng.uniform(-0.2, 0.2, 3)),
        inv_f=rng.uniform(0.05, 0.8),
    )


def numeric_jacobian(s: ParamVector, bases: BaseShapeSet, step: float = 1e-6) -> np.ndarray:
    values = s.to_array()
    columns = []
    for i in range(values.size):
        plus, minus = values.copy(), values.copy()
        plus[i] += step
        minus[i] -= step
        x_plus = project_skeleton(ParamVector.from_array(plus), bases).coords.reshape(-1)
        x_minus = project_skeleton(ParamVector.from_array(minus), bases).coords.reshape(-1)
        columns.append((x_plus - x_minus) / (2 * step))
    return np.stack(columns, axis=1)


@pytest.mark.parametrize(
    ("angle", "expected"),
    [(0.0, 0.0), (2 * math.pi, 0.0), (-math.pi / 2, 1.5 * math.pi), (5 * math.pi, math.pi)],
)
def test_wrap_angle(angle: float, expected: float) -> None:
    assert wrap_angle(angle) == pytest.approx(expected, abs=1e-12)
    assert 0.0 <= wrap_angle(angle) < 2 * math.pi


def test_camera_wraps_azimuth_and_rejects_negative_inv_f() -> None:
    assert CameraParams(3 * math.pi, 0.0, 0.0, (0, 0, 0), 0.0).azimuth == pytest.approx(math.pi)
    with pytest.raises(DimensionError, match="inv_f"):
        CameraParams(0.0, 0.0, 0.0, (0, 0, 0), -0.1)


def test_param_vector_round_trip_and_layout() -> None:
    values = np.array([0.3, -0.2, 1.0, 0.1, 0.05, 0.01, -0.02, 0.03, 0.4])
    s = ParamVector.from_array(values)

    np.testing.assert_array_equal(s.to_array(), values)
    assert s.k == 3
    assert s.size == 9
    assert s.to_array()[AZIMUTH] == 1.0
    assert s.to_array()[INV_F] == 0.4
    assert param_layout(3) == "alpha_free[2],azimuth,elevation,tilt,t_x,t_y,t_z,inv_f"


def test_decode_clamps_inv_f() -> None:
    s = ParamVector(alpha_free=np.zeros(1), azimuth=0, elevation=0, tilt=0, t=(0, 0, 0), inv_f=-0.3)

    _, cam = s.decode()

    assert cam.inv_f == 0.0


def test_identity_parallel_projection_drops_depth() -> None:
    coords = np.array([[0.1, -0.2, 0.3], [0.4, 0.5, -0.6], [0.7, -0.8, 0.9]])

    x = project_shape(Shape3D(coords), identity_camera())

    np.testing.assert_array_equal(x.coords, coords[:2])


def test_perspective_projection_divides_by_depth_term() -> None:
    x = project_point(np.array([0.2, -0.1, 0.5]), identity_camera(inv_f=0.4))

    np.testing.assert_allclose(x, [0.2 / 1.2, -0.1 / 1.2], rtol=0, atol=1e-15)


def test_small_inv_f_is_continuous_with_parallel(chair: BaseShapeSet, rng: np.random.Generator) -> None:
    s = random_params(chair, rng)
    parallel = ParamVector.from_array(np.concatenate([s.to_array()[:-1], [0.0]]))
    near = ParamVector.from_array(np.concatenate([s.to_array()[:-1], [1e-6]]))

    difference = project_skeleton(near, chair).coords - project_skeleton(parallel, chair).coords

    assert np.max(np.abs(difference)) < 1e-4


def test_point_behind_camera_raises() -> None:
    with pytest.raises(DepthSingularity) as exc_info:
        project_point(np.array([0.0, 0.0, -2.0]), identity_camera(inv_f=0.5))

    assert exc_info.value.denominator == pytest.approx(0.0)


def test_singular_keypoint_index_is_reported() -> None:
    coords = np.zeros((3, 4))
    coords[2, 2] = -3.0

    with pytest.raises(DepthSingularity) as exc_info:
        project_shape(Shape3D(coords), identity_camera(inv_f=0.5))

    assert exc_info.value.index == 2


def test_rotation_is_orthonormal(rng: np.random.Generator) -> None:
    for _ in range(20):
        cam = CameraParams(*rng.uniform(-3, 3, 3), t=(0, 0, 0), inv_f=0.0)
        rot = rotation_matrix(cam)
        np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)


def test_azimuth_rotates_about_vertical_axis() -> None:
    cam = CameraParams(math.pi / 2, 0.0, 0.0, (0, 0, 0), 0.0)

    np.testing.assert_allclose(rotation_matrix(cam) @ [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(rotation_matrix(cam) @ [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


def test_rotation_derivatives_match_finite_differences(rng: np.random.Generator) -> None:
    angles = rng.uniform(-1, 1, 3)
    derivatives = rotation_derivatives(*angles)
    step = 1e-6
    for axis, analytic in enumerate((derivatives.d_azimuth, derivatives.d_elevation, derivatives.d_tilt)):
        plus, minus = angles.copy(), angles.copy()
        plus[axis] += step
        minus[axis] -= step
        numeric = (rotation_derivatives(*plus).rotation - rotation_derivatives(*minus).rotation) / (2 * step)
        np.testing.assert_allclose(analytic, numeric, atol=1e-8)


def test_euler_round_trip(rng: np.random.Generator) -> None:
    for _ in range(50):
        cam = CameraParams(
            rng.uniform(0, 2 * math.pi), rng.uniform(-1.2, 1.2), rng.uniform(-1, 1), (0, 0, 0), 0.0
        )
        recovered = CameraParams(*euler_from_rotation(rotation_matrix(cam)), t=(0, 0, 0), inv_f=0.0)
        np.testing.assert_allclose(rotation_matrix(recovered), rotation_matrix(cam), atol=1e-10)


def test_geodesic_angle() -> None:
    a = rotation_matrix(CameraParams(0.3, 0.0, 0.0, (0, 0, 0), 0.0))
    b = rotation_matrix(CameraParams(1.0, 0.0, 0.0, (0, 0, 0), 0.0))

    assert geodesic_angle(a, a) == pytest.approx(0.0, abs=1e-7)
    assert geodesic_angle(a, b) == pytest.approx(0.7, abs=1e-12)
    assert geodesic_angle(a, b) == pytest.approx(geodesic_angle(b, a), abs=1e-12)


def test_point_jacobian_matches_finite_differences() -> None:
    cam = identity_camera(inv_f=0.6)
    y = np.array([0.3, -0.2, 0.25])
    step = 1e-6
    numeric = np.stack(
        [
            (project_point(y + step * e, cam) - project_point(y - step * e, cam)) / (2 * step)
            for e in np.eye(3)
        ],
        axis=1,
    )

    np.testing.assert_allclose(point_jacobian(y, cam), numeric, atol=1e-9)


@pytest.mark.parametrize("model", ["chair", "car"])
def test_projection_jacobian_matches_finite_differences(
    model: str, request: pytest.FixtureRequest, rng: np.random.Generator
) -> None:
    bases = request.getfixturevalue(model)
    worst = 0.0
    for _ in range(100):
        s = random_params(bases, rng)
        analytic = projection_jacobian(s, bases)
        numeric = numeric_jacobian(s, bases)
        assert analytic.shape == (2 * bases.n_keypoints, s.size)
        scale = np.maximum(np.abs(numeric), 1.0)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
    assert worst < 1e-5


def test_projection_jacobian_row_order(toy_flat: BaseShapeSet) -> None:
    s = ParamVector(alpha_free=np.zeros(1), azimuth=0, elevation=0, tilt=0, t=(0, 0, 0), inv_f=0.0)

    jac = projection_jacobian(s, toy_flat)

    # only the tip moves with the single mode, and only along x2
    n = toy_flat.n_keypoints
    expected = np.zeros(2 * n)
    expected[n + 4] = 1.0
    np.testing.assert_array_equal(jac[:, 0], expected)


def test_projection_jacobian_checks_k(chair: BaseShapeSet) -> None:
    s = ParamVector(alpha_free=np.zeros(1), azimuth=0, elevation=0, tilt=0, t=(0, 0, 0), inv_f=0.0)

    with pytest.raises(DimensionError):
        projection_jacobian(s, chair)


def test_projection_is_equivariant_under_object_rotation(chair: BaseShapeSet, rng: np.random.Generator) -> None:
    for _ in range(20):
        turn = rng.uniform(-math.pi, math.pi)
        r0 = rotation_matrix(CameraParams(turn, 0.0, 0.0, (0, 0, 0), 0.0))
        turned = BaseShapeSet(chair.spec, np.einsum("ij,kjn->kin", r0, chair.bases))
        s = random_params(chair, rng)
        values = s.to_array()
        values[AZIMUTH] -= turn

        np.testing.assert_allclose(
            project_skeleton(ParamVector.from_array(values), turned).coords,
            project_skeleton(s, chair).coords,
            atol=1e-9,
        )
