"""Category skeletons and the base-shape deformation model.

A skeleton instance is a weighted sum of base shapes, ``Y = sum_k alpha_k B_k``,
where ``B_1`` is the category mean shape (its weight is pinned to 1) and the
remaining bases are deformation modes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist

from wireframe3d.core import DimensionError, ModelFileError, content_hash

logger = logging.getLogger(__name__)

KNOWN_MODEL_FIELDS = {"category", "keypoints", "edges", "bases"}
BUNDLED_MODELS = ("chair", "car")

_warned_fields: set[str] = set()


def _frozen(array: NDArray[np.float64]) -> NDArray[np.float64]:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class SkeletonSpec:
    category: str
    keypoint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        n = len(self.keypoint_names)
        if n < 4:
            raise ModelFileError("keypoints", f"need at least 4 keypoints, got {n}")
        seen: set[tuple[int, int]] = set()
        for idx, (i, j) in enumerate(self.edges):
            if not (0 <= i < j < n):
                raise ModelFileError(
                    f"edges[{idx}]", f"expected 0 <= i < j < {n}, got ({i}, {j})"
                )
            if (i, j) in seen:
                raise ModelFileError(f"edges[{idx}]", f"duplicate edge ({i}, {j})")
            seen.add((i, j))

        rows = [i for i, _ in self.edges]
        cols = [j for _, j in self.edges]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_components, _ = connected_components(graph, directed=False)
        if n_components != 1:
            raise ModelFileError(
                "edges", f"edge graph has {n_components} components, expected 1"
            )

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_names)

    @property
    def spec_hash(self) -> str:
        """Stable sha1 over the category, keypoint names and connectivity."""
        return content_hash(
            json.dumps(
                {
                    "category": self.category,
                    "keypoints": list(self.keypoint_names),
                    "edges": [list(edge) for edge in self.edges],
                },
                sort_keys=True,
            )
        )


@dataclass(frozen=True)
class BaseShapeSet:
    spec: SkeletonSpec
    bases: NDArray[np.float64]  # K x 3 x N

    def __post_init__(self) -> None:
        bases = _frozen(self.bases)
        object.__setattr__(self, "bases", bases)
        n = self.spec.n_keypoints
        if bases.ndim != 3 or bases.shape[0] < 1:
            raise DimensionError(f"bases: expected K x 3 x {n} array, got {bases.shape}")
        if bases.shape[1:] != (3, n):
            raise DimensionError(
                f"bases: expected every basis to be 3 x {n}, got {bases.shape[1:]}"
            )
        if not np.all(np.isfinite(bases)):
            raise DimensionError("bases: non-finite coordinate")
        if diagonal_length(Shape3D(bases[0])) <= 0:
            raise DimensionError("bases[0]: mean shape has zero diagonal length")

    @property
    def k(self) -> int:
        return int(self.bases.shape[0])

    @property
    def n_keypoints(self) -> int:
        return self.spec.n_keypoints

    @property
    def mean_shape(self) -> Shape3D:
        return Shape3D(self.bases[0])


@dataclass(frozen=True)
class StructuralParams:
    alpha: NDArray[np.float64]

    def __post_init__(self) -> None:
        alpha = _frozen(self.alpha)
        object.__setattr__(self, "alpha", alpha)
        if alpha.ndim != 1 or alpha.size < 1:
            raise DimensionError(f"alpha: expected a non-empty vector, got {alpha.shape}")
        if alpha[0] != 1.0:
            raise DimensionError(f"alpha[0]: mean-shape weight must be 1, got {alpha[0]}")

    @classmethod
    def from_free(cls, alpha_free: NDArray[np.float64]) -> StructuralParams:
        return cls(np.concatenate([[1.0], np.asarray(alpha_free, dtype=np.float64)]))

    @classmethod
    def mean(cls, k: int) -> StructuralParams:
        return cls.from_free(np.zeros(k - 1))

    @property
    def free(self) -> NDArray[np.float64]:
        return self.alpha[1:]


@dataclass(frozen=True)
class Shape3D:
    coords: NDArray[np.float64]  # 3 x N

    def __post_init__(self) -> None:
        coords = _frozen(self.coords)
        object.__setattr__(self, "coords", coords)
        if coords.ndim != 2 or coords.shape[0] != 3:
            raise DimensionError(f"coords: expected 3 x N, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise DimensionError("coords: non-finite coordinate")

    @property
    def n_keypoints(self) -> int:
        return int(self.coords.shape[1])


def compose_skeleton(alpha: StructuralParams, bases: BaseShapeSet) -> Shape3D:
    """Combine the base shapes with the structural weights ``alpha``."""
    if alpha.alpha.size != bases.k:
        raise DimensionError(
            f"alpha has {alpha.alpha.size} weights but there are {bases.k} base shapes"
        )
    coords = alpha.alpha[0] * bases.bases[0]
    for weight, basis in zip(alpha.alpha[1:], bases.bases[1:]):
        coords = coords + weight * basis
    return Shape3D(coords)


def diagonal_length(shape: Shape3D) -> float:
    """Largest Euclidean distance between any two keypoints."""
    if shape.n_keypoints < 2:
        raise DimensionError(
            f"diagonal length needs at least 2 keypoints, got {shape.n_keypoints}"
        )
    return float(pdist(shape.coords.T).max())


def _warn_unknown_fields(data: dict[str, Any]) -> None:
    for field in sorted(set(data) - KNOWN_MODEL_FIELDS):
        if field not in _warned_fields:
            _warned_fields.add(field)
            logger.warning("Ignoring unknown model file field %r", field)


def _require(data: dict[str, Any], field: str, kind: type) -> Any:
    if field not in data:
        raise ModelFileError(field, "missing")
    value = data[field]
    if not isinstance(value, kind):
        raise ModelFileError(field, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def parse_base_shapes(data: Any) -> BaseShapeSet:
    """Validate a decoded model document and build a :class:`BaseShapeSet`."""
    if not isinstance(data, dict):
        raise ModelFileError("<root>", "expected a JSON object")
    _warn_unknown_fields(data)

    category = _require(data, "category", str)
    names = _require(data, "keypoints", list)
    for i, name in enumerate(names):
        if not isinstance(name, str):
            raise ModelFileError(f"keypoints[{i}]", "expected a string")

    edges: list[tuple[int, int]] = []
    for i, edge in enumerate(_require(data, "edges", list)):
        if (
            not isinstance(edge, list)
            or len(edge) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in edge)
        ):
            raise ModelFileError(f"edges[{i}]", "expected a pair of integers")
        edges.append((edge[0], edge[1]))

    spec = SkeletonSpec(category=category, keypoint_names=tuple(names), edges=tuple(edges))
    n = spec.n_keypoints

    raw_bases = _require(data, "bases", list)
    if not raw_bases:
        raise ModelFileError("bases", "need at least one base shape")
    bases = np.empty((len(raw_bases), 3, n))
    for k, basis in enumerate(raw_bases):
        if not isinstance(basis, list) or len(basis) != n:
            got = len(basis) if isinstance(basis, list) else type(basis).__name__
            raise ModelFileError(f"bases[{k}]", f"expected {n} keypoints, got {got}")
        for i, point in enumerate(basis):
            if not isinstance(point, list) or len(point) != 3:
                raise ModelFileError(f"bases[{k}][{i}]", "expected 3 coordinates")
            try:
                xyz = [float(v) for v in point]
            except (TypeError, ValueError) as exc:
                raise ModelFileError(f"bases[{k}][{i}]", str(exc)) from exc
            if not all(np.isfinite(xyz)):
                raise ModelFileError(f"bases[{k}][{i}]", "non-finite coordinate")
            bases[k, :, i] = xyz

    try:
        return BaseShapeSet(spec=spec, bases=bases)
    except DimensionError as exc:
        raise ModelFileError("bases", str(exc)) from exc


def load_base_shapes(path: Path | str) -> BaseShapeSet:
    """Load and validate a skeleton model file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError("<root>", f"{path}: {exc}") from exc
    return parse_base_shapes(data)


def bundled_model_path(name: str) -> Path:
    """Path of one of the model files shipped with the package."""
    if name not in BUNDLED_MODELS:
        raise ModelFileError("<model>", f"unknown bundled model {name!r}")
    models_dir = resources.files("wireframe3d").joinpath("models")
    return Path(str(models_dir.joinpath(f"{name}.json")))


def resolve_model(name_or_path: Path | str) -> BaseShapeSet:
    """Load a bundled model by name, or a model file by path."""
    if str(name_or_path) in BUNDLED_MODELS:
        return load_base_shapes(bundled_model_path(str(name_or_path)))
    return load_base_shapes(name_or_path)
