"""Camera model and the projection layer.

The camera-frame point ``p = R y + T`` is projected with the Euclidean form of a
pinhole camera whose center sits at ``(0, 0, -f)``::

    x = (p1, p2) / (inv_f * p3 + 1)

so that ``inv_f = 0`` is ordinary parallel projection. Parameter vectors are
flattened as ``alpha_free, azimuth, elevation, tilt, t_x, t_y, t_z, inv_f``;
flattened keypoints are the rows of the ``2 x N`` coordinate matrix, first all
``x1`` then all ``x2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from wireframe3d.core import DepthSingularity, DimensionError
from wireframe3d.skeleton import (
    BaseShapeSet,
    Shape3D,
    StructuralParams,
    compose_skeleton,
)

EPS_DEPTH = 1e-6
TWO_PI = 2.0 * math.pi
N_CAMERA_PARAMS = 7

AZIMUTH, ELEVATION, TILT, T_X, T_Y, T_Z, INV_F = range(-7, 0)


def wrap_angle(angle: float) -> float:
    """Wrap ``angle`` to ``[0, 2*pi)``."""
    wrapped = math.fmod(angle, TWO_PI)
    if wrapped < 0:
        wrapped += TWO_PI
    return 0.0 if wrapped >= TWO_PI else wrapped


def param_layout(k: int) -> str:
    """The flattened parameter layout for ``k`` base shapes, as stored in weight files."""
    return f"alpha_free[{k - 1}],azimuth,elevation,tilt,t_x,t_y,t_z,inv_f"


def param_size(k: int) -> int:
    return (k - 1) + N_CAMERA_PARAMS


@dataclass(frozen=True)
class CameraParams:
    azimuth: float
    elevation: float
    tilt: float
    t: tuple[float, float, float]
    inv_f: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.azimuth, self.elevation, self.tilt)):
            raise DimensionError("camera angles must be finite")
        if not (math.isfinite(self.inv_f) and self.inv_f >= 0):
            raise DimensionError(f"inv_f must be finite and >= 0, got {self.inv_f}")
        object.__setattr__(self, "azimuth", wrap_angle(self.azimuth))
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))

    @property
    def translation(self) -> NDArray[np.float64]:
        return np.asarray(self.t, dtype=np.float64)


@dataclass(frozen=True)
class ParamVector:
    alpha_free: NDArray[np.float64]
    azimuth: float
    elevation: float
    tilt: float
    t: tuple[float, float, float]
    inv_f: float

    def __post_init__(self) -> None:
        alpha_free = np.array(self.alpha_free, dtype=np.float64).reshape(-1)
        alpha_free.setflags(write=False)
        object.__setattr__(self, "alpha_free", alpha_free)
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))

    @property
    def k(self) -> int:
        return int(self.alpha_free.size) + 1

    @property
    def size(self) -> int:
        return param_size(self.k)

    def to_array(self) -> NDArray[np.float64]:
        return np.concatenate(
            [
                self.alpha_free,
                [self.azimuth, self.elevation, self.tilt, *self.t, self.inv_f],
            ]
        )

    @classmethod
    def from_array(cls, values: NDArray[np.float64]) -> ParamVector:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size < N_CAMERA_PARAMS:
            raise DimensionError(
                f"parameter vector needs at least {N_CAMERA_PARAMS} entries, got {values.size}"
            )
        az, el, tilt, tx, ty, tz, inv_f = (float(v) for v in values[-N_CAMERA_PARAMS:])
        return cls(
            alpha_free=values[:-N_CAMERA_PARAMS],
            azimuth=az,
            elevation=el,
            tilt=tilt,
            t=(tx, ty, tz),
            inv_f=inv_f,
        )

    @classmethod
    def from_parts(cls, alpha: StructuralParams, cam: CameraParams) -> ParamVector:
        return cls(
            alpha_free=alpha.free,
            azimuth=cam.azimuth,
            elevation=cam.elevation,
            tilt=cam.tilt,
            t=cam.t,
            inv_f=cam.inv_f,
        )

    def decode(self) -> tuple[StructuralParams, CameraParams]:
        """Split into structural and camera parameters, clamping ``inv_f`` at 0."""
        cam = CameraParams(
            azimuth=self.azimuth,
            elevation=self.elevation,
            tilt=self.tilt,
            t=self.t,
            inv_f=max(0.0, self.inv_f),
        )
        return StructuralParams.from_free(self.alpha_free), cam


class Keypoints2D(NamedTuple):
    coords: NDArray[np.float64]  # 2 x N
    visible: NDArray[np.bool_]

    @classmethod
    def all_visible(cls, coords: NDArray[np.float64]) -> Keypoints2D:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] != 2:
            raise DimensionError(f"keypoints: expected 2 x N, got {coords.shape}")
        return cls(coords=coords, visible=np.ones(coords.shape[1], dtype=bool))

    @property
    def n_keypoints(self) -> int:
        return int(self.coords.shape[1])


class RotationDerivatives(NamedTuple):
    rotation: NDArray[np.float64]
    d_azimuth: NDArray[np.float64]
    d_elevation: NDArray[np.float64]
    d_tilt: NDArray[np.float64]


def _axis_rotations(
    azimuth: float, elevation: float, tilt: float
) -> tuple[NDArray[np.float64], ...]:
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    ce, se = math.cos(elevation), math.sin(elevation)
    ct, st = math.cos(tilt), math.sin(tilt)
    ry = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    dry = np.array([[-sa, 0.0, ca], [0.0, 0.0, 0.0], [-ca, 0.0, -sa]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -se, -ce], [0.0, ce, -se]])
    rz = np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]])
    drz = np.array([[-st, -ct, 0.0], [ct, -st, 0.0], [0.0, 0.0, 0.0]])
    return ry, dry, rx, drx, rz, drz


def rotation_derivatives(
    azimuth: float, elevation: float, tilt: float
) -> RotationDerivatives:
    """``R = R_tilt(z) @ R_elevation(x) @ R_azimuth(y)`` and its partial derivatives."""
    ry, dry, rx, drx, rz, drz = _axis_rotations(azimuth, elevation, tilt)
    return RotationDerivatives(
        rotation=rz @ rx @ ry,
        d_azimuth=rz @ rx @ dry,
        d_elevation=rz @ drx @ ry,
        d_tilt=drz @ rx @ ry,
    )


def rotation_matrix(cam: CameraParams) -> NDArray[np.float64]:
    ry, _, rx, _, rz, _ = _axis_rotations(cam.azimuth, cam.elevation, cam.tilt)
    return rz @ rx @ ry


def euler_from_rotation(rotation: NDArray[np.float64]) -> tuple[float, float, float]:
    """Recover ``(azimuth, elevation, tilt)`` from a rotation built by :func:`rotation_matrix`."""
    elevation = math.asin(float(np.clip(rotation[2, 1], -1.0, 1.0)))
    azimuth = math.atan2(-rotation[2, 0], rotation[2, 2])
    tilt = math.atan2(-rotation[0, 1], rotation[1, 1])
    return wrap_angle(azimuth), elevation, tilt


def geodesic_angle(r1: NDArray[np.float64], r2: NDArray[np.float64]) -> float:
    """Angle in radians of the relative rotation ``r1^T r2``."""
    cos_angle = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return math.acos(float(np.clip(cos_angle, -1.0, 1.0)))


def project_point(y: NDArray[np.float64], cam: CameraParams) -> NDArray[np.float64]:
    """Project a single camera-frame point ``y``."""
    y = np.asarray(y, dtype=np.float64)
    denominator = cam.inv_f * y[2] + 1.0
    if denominator <= EPS_DEPTH:
        raise DepthSingularity(0, float(denominator))
    return np.array([y[0] / denominator, y[1] / denominator])


def point_jacobian(y: NDArray[np.float64], cam: CameraParams) -> NDArray[np.float64]:
    """2 x 3 derivative of :func:`project_point` with respect to the camera-frame point."""
    y = np.asarray(y, dtype=np.float64)
    denominator = cam.inv_f * y[2] + 1.0
    if denominator <= EPS_DEPTH:
        raise DepthSingularity(0, float(denominator))
    return np.array(
        [
            [1.0 / denominator, 0.0, -y[0] * cam.inv_f / denominator**2],
            [0.0, 1.0 / denominator, -y[1] * cam.inv_f / denominator**2],
        ]
    )


def camera_frame_points(
    shape: Shape3D, cam: CameraParams
) -> NDArray[np.float64]:
    return rotation_matrix(cam) @ shape.coords + cam.translation[:, None]


def _checked_denominators(
    points: NDArray[np.float64], inv_f: float
) -> NDArray[np.float64]:
    denominators = inv_f * points[2] + 1.0
    bad = np.flatnonzero(denominators <= EPS_DEPTH)
    if bad.size:
        index = int(bad[0])
        raise DepthSingularity(index, float(denominators[index]))
    return denominators


def project_shape(shape: Shape3D, cam: CameraParams) -> Keypoints2D:
    """Project an object-frame shape through ``cam``."""
    points = camera_frame_points(shape, cam)
    denominators = _checked_denominators(points, cam.inv_f)
    return Keypoints2D.all_visible(points[:2] / denominators)


def project_skeleton(s: ParamVector, bases: BaseShapeSet) -> Keypoints2D:
    """The projection layer: ``X = P(R Y + T)`` with ``Y`` composed from ``s``."""
    alpha, cam = s.decode()
    return project_shape(compose_skeleton(alpha, bases), cam)


def projection_jacobian(s: ParamVector, bases: BaseShapeSet) -> NDArray[np.float64]:
    """Analytic ``(2N) x |S|`` Jacobian of the flattened projection."""
    if s.k != bases.k:
        raise DimensionError(f"parameter vector has K={s.k}, bases have K={bases.k}")
    alpha, cam = s.decode()
    shape = compose_skeleton(alpha, bases)
    rot = rotation_derivatives(cam.azimuth, cam.elevation, cam.tilt)
    points = rot.rotation @ shape.coords + cam.translation[:, None]
    inv_f = cam.inv_f
    d = _checked_denominators(points, inv_f)
    n = bases.n_keypoints

    # d(x_a)/d(p) = e_a / d - p_a * inv_f * e_3 / d^2
    def column(grad_points: NDArray[np.float64]) -> NDArray[np.float64]:
        depth_term = grad_points[2] * inv_f / d**2
        return np.concatenate(
            [
                grad_points[0] / d - points[0] * depth_term,
                grad_points[1] / d - points[1] * depth_term,
            ]
        )

    columns = [column(rot.rotation @ basis) for basis in bases.bases[1:]]
    columns.extend(
        column(d_rot @ shape.coords)
        for d_rot in (rot.d_azimuth, rot.d_elevation, rot.d_tilt)
    )
    for axis in range(3):
        grad = np.zeros((3, n))
        grad[axis] = 1.0
        columns.append(column(grad))

    # inv_f is clamped at 0 on decode; the derivative is one-sided there
    d_inv_f = -points[2] / d**2
    columns.append(np.concatenate([points[0] * d_inv_f, points[1] * d_inv_f]))

    return np.stack(columns, axis=1)
