"""Synthetic training and testing data.

Each sample draws structural and viewpoint parameters, composes the skeleton,
jitters it with isotropic Gaussian noise proportional to its diagonal length,
projects it and renders one Gaussian heatmap per keypoint.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO, NamedTuple

import numpy as np
from numpy.typing import NDArray

from wireframe3d.camera import (
    CameraParams,
    Keypoints2D,
    ParamVector,
    camera_frame_points,
    param_size,
    project_shape,
)
from wireframe3d.core import (
    DatasetFormatError,
    DepthSingularity,
    RejectionExhausted,
    make_rng,
    parallel_map,
)
from wireframe3d.skeleton import (
    BaseShapeSet,
    Shape3D,
    StructuralParams,
    compose_skeleton,
    diagonal_length,
)

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"3DINNDS1"
MAX_REJECTIONS = 100

Range = tuple[float, float]


@dataclass(frozen=True)
class SamplerConfig:
    alpha_range: Range = (-1.0, 1.0)
    azimuth_range: Range = (0.0, 2 * math.pi)
    elevation_range: Range = (-math.pi / 6, math.pi / 3)
    tilt_range: Range = (-math.pi / 12, math.pi / 12)
    tx_range: Range = (-0.2, 0.2)
    ty_range: Range = (-0.2, 0.2)
    tz_range: Range = (-0.2, 0.2)
    inv_f_range: Range = (0.0, 0.8)
    perturbation: float = 0.01
    heatmap_sigma: float = 1.5
    noise: float = 0.0
    heatmap_height: int = 30
    heatmap_width: int = 40
    cell_size: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        for field in dataclasses.fields(self):
            if field.name.endswith("_range"):
                low, high = getattr(self, field.name)
                object.__setattr__(self, field.name, (float(low), float(high)))
                if not low <= high:
                    raise ValueError(f"{field.name}: empty range [{low}, {high}]")
        if self.inv_f_range[0] < 0:
            raise ValueError("inv_f_range: inverse focal length must be >= 0")
        if self.perturbation < 0:
            raise ValueError(f"perturbation must be >= 0, got {self.perturbation}")
        if self.heatmap_sigma <= 0:
            raise ValueError(f"heatmap_sigma must be > 0, got {self.heatmap_sigma}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")
        if self.heatmap_height < 1 or self.heatmap_width < 1 or self.cell_size <= 0:
            raise ValueError("heatmap dimensions must be positive")

    @classmethod
    def shifted(cls, **overrides: Any) -> SamplerConfig:
        """A distribution unlike the default one, standing in for real annotated images."""
        values: dict[str, Any] = {
            "elevation_range": (0.0, math.pi / 3),
            "tilt_range": (-math.pi / 8, math.pi / 8),
            "inv_f_range": (0.3, 1.0),
            "alpha_range": (-1.2, 1.2),
            "noise": 0.1,
        }
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        return {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in dataclasses.asdict(self).items()
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SamplerConfig:
        names = {field.name for field in dataclasses.fields(cls)}
        return cls(
            **{
                key: tuple(value) if isinstance(value, list) else value
                for key, value in data.items()
                if key in names
            }
        )


@dataclass(frozen=True)
class HeatmapStack:
    maps: NDArray[np.float64]  # N x H x W
    cell_size: float = 0.05

    @property
    def n_keypoints(self) -> int:
        return int(self.maps.shape[0])

    @property
    def height(self) -> int:
        return int(self.maps.shape[1])

    @property
    def width(self) -> int:
        return int(self.maps.shape[2])

    def to_cells(self, x: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Continuous (column, row) cell coordinates of normalized image points.

        Cell ``(row, col)`` has its center at integer coordinates; rows grow
        downwards, i.e. towards smaller ``x2``.
        """
        cols = x[0] / self.cell_size + self.width / 2 - 0.5
        rows = self.height / 2 - x[1] / self.cell_size - 0.5
        return cols, rows

    def cell_center(self, row: int, col: int) -> NDArray[np.float64]:
        return np.array(
            [
                (col + 0.5 - self.width / 2) * self.cell_size,
                (self.height / 2 - row - 0.5) * self.cell_size,
            ]
        )

    def flatten(self) -> NDArray[np.float64]:
        return self.maps.reshape(-1)


class SynthSample(NamedTuple):
    heatmaps: HeatmapStack
    s_true: ParamVector
    y_true: Shape3D
    x_true: Keypoints2D


class Dataset(NamedTuple):
    spec_hash: str
    config: SamplerConfig
    samples: list[SynthSample]


def _uniform(rng: np.random.Generator, bounds: Range, size: int | None = None) -> Any:
    low, high = bounds
    if low == high:
        return low if size is None else np.full(size, low)
    return rng.uniform(low, high, size)


def _in_front(shape: Shape3D, cam: CameraParams) -> bool:
    points = camera_frame_points(shape, cam)
    return bool(np.all(cam.inv_f * points[2] + 1.0 > 1e-6))


def sample_params(
    cfg: SamplerConfig, rng: np.random.Generator, bases: BaseShapeSet
) -> ParamVector:
    """Draw a parameter vector uniformly from the configured ranges.

    Draws whose skeleton would not lie in front of the camera are rejected.
    """
    for _ in range(MAX_REJECTIONS):
        s = ParamVector(
            alpha_free=_uniform(rng, cfg.alpha_range, bases.k - 1),
            azimuth=float(_uniform(rng, cfg.azimuth_range)),
            elevation=float(_uniform(rng, cfg.elevation_range)),
            tilt=float(_uniform(rng, cfg.tilt_range)),
            t=(
                float(_uniform(rng, cfg.tx_range)),
                float(_uniform(rng, cfg.ty_range)),
                float(_uniform(rng, cfg.tz_range)),
            ),
            inv_f=float(_uniform(rng, cfg.inv_f_range)),
        )
        alpha, cam = s.decode()
        if _in_front(compose_skeleton(alpha, bases), cam):
            return s
    raise RejectionExhausted(
        f"no parameter draw put the skeleton in front of the camera in {MAX_REJECTIONS} tries"
    )


def perturb_shape(y: Shape3D, rho: float, rng: np.random.Generator) -> Shape3D:
    """Add isotropic Gaussian jitter with std ``rho * diagonal_length(y)``."""
    if rho < 0:
        raise ValueError(f"perturbation ratio must be >= 0, got {rho}")
    if rho == 0:
        return y
    sigma = rho * diagonal_length(y)
    return Shape3D(y.coords + rng.normal(0.0, sigma, size=y.coords.shape))


def render_heatmaps(
    x: Keypoints2D,
    sigma: float,
    height: int = 30,
    width: int = 40,
    cell_size: float = 0.05,
) -> HeatmapStack:
    """Render one Gaussian blob per keypoint, peaking at 1 on the keypoint."""
    if sigma <= 0:
        raise ValueError(f"heatmap sigma must be > 0, got {sigma}")
    stack = HeatmapStack(np.zeros((x.n_keypoints, height, width)), cell_size=cell_size)
    cols, rows = stack.to_cells(x.coords)
    grid_rows = np.arange(height, dtype=np.float64)[:, None]
    grid_cols = np.arange(width, dtype=np.float64)[None, :]
    maps = np.exp(
        -((grid_cols[None] - cols[:, None, None]) ** 2 + (grid_rows[None] - rows[:, None, None]) ** 2)
        / (2 * sigma**2)
    )
    maps[~x.visible] = 0.0
    return HeatmapStack(maps, cell_size=cell_size)


def corrupt_salt_pepper(
    h: HeatmapStack, p: float, rng: np.random.Generator
) -> HeatmapStack:
    """Set each cell to 1 or 0 with probability ``p / 2`` each."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"noise level must be in [0, 1], got {p}")
    if p == 0:
        return h
    draws = rng.random(h.maps.shape)
    maps = h.maps.copy()
    maps[draws < p / 2] = 1.0
    maps[(draws >= p / 2) & (draws < p)] = 0.0
    return HeatmapStack(maps, cell_size=h.cell_size)


def argmax_keypoints(h: HeatmapStack) -> Keypoints2D:
    """Keypoints at the center of each channel's maximum cell (first in row-major order)."""
    if h.maps.size == 0:
        raise ValueError("empty heatmap stack")
    flat_idx = np.argmax(h.maps.reshape(h.n_keypoints, -1), axis=1)
    rows, cols = np.divmod(flat_idx, h.width)
    coords = np.stack([h.cell_center(int(r), int(c)) for r, c in zip(rows, cols)], axis=1)
    return Keypoints2D.all_visible(coords)


def make_sample(
    cfg: SamplerConfig, bases: BaseShapeSet, index: int
) -> SynthSample:
    """Generate sample ``index`` of the stream defined by ``cfg.seed``."""
    rng = make_rng(cfg.seed, index)
    for _ in range(MAX_REJECTIONS):
        s = sample_params(cfg, rng, bases)
        alpha, cam = s.decode()
        y = perturb_shape(compose_skeleton(alpha, bases), cfg.perturbation, rng)
        try:
            x = project_shape(y, cam)
        except DepthSingularity:
            continue
        heatmaps = render_heatmaps(
            x, cfg.heatmap_sigma, cfg.heatmap_height, cfg.heatmap_width, cfg.cell_size
        )
        heatmaps = corrupt_salt_pepper(heatmaps, cfg.noise, rng)
        return SynthSample(heatmaps=heatmaps, s_true=s, y_true=y, x_true=x)
    raise RejectionExhausted(f"sample {index}: perturbed skeleton kept crossing the camera plane")


def generate_dataset(
    cfg: SamplerConfig, count: int, bases: BaseShapeSet, threads: int = 1
) -> list[SynthSample]:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    logger.info("Generating %d %s samples (seed %d)", count, bases.spec.category, cfg.seed)
    return parallel_map(lambda i: make_sample(cfg, bases, i), range(count), threads)


def _write_record(stream: BinaryIO, sample: SynthSample) -> None:
    stream.write(sample.s_true.to_array().astype("<f8").tobytes())
    stream.write(sample.y_true.coords.astype("<f8").tobytes())
    stream.write(sample.x_true.coords.astype("<f8").tobytes())
    stream.write(sample.heatmaps.maps.astype("<f4").tobytes())


def write_dataset(
    path: Path | str,
    samples: list[SynthSample],
    bases: BaseShapeSet,
    cfg: SamplerConfig,
) -> None:
    """Write samples in the binary dataset format (little-endian throughout)."""
    config_echo = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    with Path(path).open("wb") as stream:
        stream.write(DATASET_MAGIC)
        stream.write(bases.spec.spec_hash.encode("ascii"))
        stream.write(struct.pack("<I", len(config_echo)))
        stream.write(config_echo)
        stream.write(
            struct.pack(
                "<IIIIdQ",
                bases.n_keypoints,
                bases.k,
                cfg.heatmap_height,
                cfg.heatmap_width,
                cfg.cell_size,
                len(samples),
            )
        )
        for sample in samples:
            _write_record(stream, sample)


def _read_exact(stream: BinaryIO, size: int, what: str) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise DatasetFormatError(f"truncated dataset while reading {what}")
    return data


def read_dataset(path: Path | str, bases: BaseShapeSet | None = None) -> Dataset:
    """Read a dataset file; if ``bases`` is given, its skeleton must match the file's."""
    with Path(path).open("rb") as stream:
        if _read_exact(stream, len(DATASET_MAGIC), "magic") != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset file")
        spec_hash = _read_exact(stream, 40, "spec hash").decode("ascii")
        if bases is not None and spec_hash != bases.spec.spec_hash:
            raise DatasetFormatError(
                f"{path}: dataset skeleton does not match model {bases.spec.category!r}"
            )
        (config_len,) = struct.unpack("<I", _read_exact(stream, 4, "config length"))
        cfg = SamplerConfig.from_dict(json.loads(_read_exact(stream, config_len, "config")))
        n, k, height, width, cell_size, count = struct.unpack(
            "<IIIIdQ", _read_exact(stream, struct.calcsize("<IIIIdQ"), "header")
        )
        if bases is not None and (n, k) != (bases.n_keypoints, bases.k):
            raise DatasetFormatError(f"{path}: dataset has N={n}, K={k}")

        s_size = param_size(k)
        samples = []
        for i in range(count):
            what = f"sample {i}"
            s = np.frombuffer(_read_exact(stream, 8 * s_size, what), dtype="<f8")
            y = np.frombuffer(_read_exact(stream, 8 * 3 * n, what), dtype="<f8")
            x = np.frombuffer(_read_exact(stream, 8 * 2 * n, what), dtype="<f8")
            maps = np.frombuffer(_read_exact(stream, 4 * n * height * width, what), dtype="<f4")
            samples.append(
                SynthSample(
                    heatmaps=HeatmapStack(
                        maps.astype(np.float64).reshape(n, height, width), cell_size=cell_size
                    ),
                    s_true=ParamVector.from_array(s),
                    y_true=Shape3D(y.reshape(3, n)),
                    x_true=Keypoints2D.all_visible(x.reshape(2, n).copy()),
                )
            )
        if stream.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after {count} samples")
    return Dataset(spec_hash=spec_hash, config=cfg, samples=samples)


def check_sample(sample: SynthSample, bases: BaseShapeSet) -> bool:
    """Whether ``x_true`` is the projection of ``y_true`` under the sample's camera."""
    _, cam = sample.s_true.decode()
    x = project_shape(sample.y_true, cam)
    return bool(np.allclose(x.coords, sample.x_true.coords, rtol=0, atol=1e-12))


def mean_shape_params(bases: BaseShapeSet) -> ParamVector:
    """Mean shape at the identity pose under parallel projection."""
    return ParamVector.from_parts(
        StructuralParams.mean(bases.k),
        CameraParams(azimuth=0.0, elevation=0.0, tilt=0.0, t=(0.0, 0.0, 0.0), inv_f=0.0),
    )
