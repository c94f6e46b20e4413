"""Metrics, evaluation runs and retrieval."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Callable, Literal, Mapping, NamedTuple, Sequence

import numpy as np
from numpy.typing import NDArray

from wireframe3d.camera import Keypoints2D, ParamVector, geodesic_angle, rotation_matrix
from wireframe3d.core import DatasetFormatError, DimensionError, make_rng, parallel_map
from wireframe3d.fit import FitConfig, fit_from_heatmaps, reprojection_cost
from wireframe3d.net import DenseNet, Interpreter, predict, refine
from wireframe3d.skeleton import BaseShapeSet, Shape3D, compose_skeleton, diagonal_length
from wireframe3d.synth import HeatmapStack, SynthSample, corrupt_salt_pepper

logger = logging.getLogger(__name__)

RMSE_THRESHOLDS = tuple(round(0.01 * i, 2) for i in range(31))
AZIMUTH_THRESHOLDS = tuple(float(d) for d in range(0, 181, 5))
SWEEP_LEVELS = (0.0, 0.05, 0.1, 0.2, 0.3, 0.4)
RECALL_AT = 0.15

Estimator = Callable[[HeatmapStack], ParamVector]


class RecallCurve(NamedTuple):
    thresholds: NDArray[np.float64]
    recall: NDArray[np.float64]
    average_recall: float


class MethodErrors(NamedTuple):
    label: str
    rmse: NDArray[np.float64]
    azimuth: NDArray[np.float64]
    reprojection: NDArray[np.float64]


class EvalReport(NamedTuple):
    methods: list[MethodErrors]
    rmse_curves: dict[str, RecallCurve]
    azimuth_curves: dict[str, RecallCurve]
    config: dict[str, object]


class SweepRow(NamedTuple):
    noise: float
    method: str
    mean_rmse: float
    mean_azimuth: float


class RetrievalHit(NamedTuple):
    index: int
    distance: float


class CurveFile(NamedTuple):
    axis: str
    labels: list[str]
    x: NDArray[np.float64]
    series: NDArray[np.float64]  # rows x labels


def _check_same_n(a: NDArray[np.float64], b: NDArray[np.float64]) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"keypoint arrays differ in shape: {a.shape} vs {b.shape}")


def rmse_3d(y_hat: Shape3D, y_true: Shape3D) -> float:
    """Keypoint RMSE in units of the ground-truth diagonal length."""
    _check_same_n(y_hat.coords, y_true.coords)
    scale = diagonal_length(y_true)
    if scale == 0:
        raise DimensionError("ground-truth shape has zero diagonal length")
    squared = np.sum((y_hat.coords - y_true.coords) ** 2, axis=0)
    return math.sqrt(float(np.mean(squared))) / scale


def azimuth_error(s_hat: ParamVector, s_true: ParamVector) -> float:
    """Wrapped azimuth difference in degrees, in ``[0, 180]``."""
    delta = abs(math.degrees(s_hat.azimuth - s_true.azimuth)) % 360.0
    return min(delta, 360.0 - delta)


def recall_curve(errors: Sequence[float], thresholds: Sequence[float] = RMSE_THRESHOLDS) -> RecallCurve:
    values = np.asarray(errors, dtype=np.float64)
    if values.size == 0:
        raise ValueError("recall curve of an empty error list")
    grid = np.asarray(thresholds, dtype=np.float64)
    if grid.size == 0 or np.any(np.diff(grid) < 0):
        raise ValueError("thresholds must be non-empty and ascending")
    recall = np.array([np.count_nonzero(values <= t) / values.size for t in grid])
    return RecallCurve(thresholds=grid, recall=recall, average_recall=float(recall.mean()))


def _distances(pred: Keypoints2D, gt: Keypoints2D) -> NDArray[np.float64]:
    _check_same_n(pred.coords, gt.coords)
    return np.sqrt(np.sum((pred.coords - gt.coords) ** 2, axis=0))


def pck(pred: Keypoints2D, gt: Keypoints2D, normalizer: float, t: float) -> float:
    """Fraction of keypoints within ``t * normalizer`` of the ground truth (inclusive)."""
    if normalizer <= 0:
        raise ValueError(f"PCK normalizer must be > 0, got {normalizer}")
    distances = _distances(pred, gt)
    return float(np.count_nonzero(distances / normalizer <= t)) / distances.size


def pcp(pred: Keypoints2D, gt: Keypoints2D, stds: Sequence[float]) -> float:
    """Percentage of keypoints within 1.5 annotation standard deviations."""
    distances = _distances(pred, gt)
    limits = 1.5 * np.asarray(stds, dtype=np.float64)
    if limits.shape != distances.shape:
        raise DimensionError(f"expected {distances.size} standard deviations, got {limits.size}")
    if np.any(limits <= 0):
        raise ValueError("standard deviations must be > 0")
    return 100.0 * float(np.count_nonzero(distances <= limits)) / distances.size


def average_error(pred: Keypoints2D, gt: Keypoints2D, bound: float = 5.0) -> float:
    return float(np.mean(np.minimum(_distances(pred, gt), bound)))


def canonical_shape(s: ParamVector, bases: BaseShapeSet) -> Shape3D:
    alpha, _ = s.decode()
    return compose_skeleton(alpha, bases)


def fit_estimator(bases: BaseShapeSet, cfg: FitConfig | None = None) -> Estimator:
    def estimate(h: HeatmapStack) -> ParamVector:
        return fit_from_heatmaps(h, bases, cfg).s_hat

    return estimate


def net_estimator(model: Interpreter) -> Estimator:
    def estimate(h: HeatmapStack) -> ParamVector:
        return predict(model.net, model.normalizer, h)

    return estimate


def _corrupted(
    samples: Sequence[SynthSample], noise: float, seed: int, stream: int, refiner: DenseNet | None
) -> list[HeatmapStack]:
    stacks = []
    for i, sample in enumerate(samples):
        h = corrupt_salt_pepper(sample.heatmaps, noise, make_rng(seed, 97, stream, i))
        stacks.append(refine(refiner, h) if refiner is not None else h)
    return stacks


def _method_errors(
    label: str,
    estimate: Estimator,
    samples: Sequence[SynthSample],
    stacks: Sequence[HeatmapStack],
    bases: BaseShapeSet,
    threads: int,
) -> MethodErrors:
    estimates = parallel_map(estimate, list(stacks), threads)
    rmse, azimuth, reprojection = [], [], []
    for s_hat, sample in zip(estimates, samples):
        rmse.append(rmse_3d(canonical_shape(s_hat, bases), canonical_shape(sample.s_true, bases)))
        azimuth.append(azimuth_error(s_hat, sample.s_true))
        reprojection.append(reprojection_cost(s_hat, sample.x_true, bases))
    return MethodErrors(label, np.array(rmse), np.array(azimuth), np.array(reprojection))


def evaluate(
    samples: Sequence[SynthSample],
    bases: BaseShapeSet,
    estimators: Mapping[str, Estimator],
    *,
    noise: float = 0.0,
    seed: int = 0,
    refiner: DenseNet | None = None,
    threads: int = 1,
) -> EvalReport:
    """Run every estimator on the (optionally corrupted and refined) test heatmaps."""
    if not samples:
        raise ValueError("test set is empty")
    if not estimators:
        raise ValueError("no estimation method selected")
    stacks = _corrupted(samples, noise, seed, 0, refiner)
    methods = []
    for label, estimate in estimators.items():
        logger.info("Evaluating %s on %d samples", label, len(samples))
        methods.append(_method_errors(label, estimate, samples, stacks, bases, threads))
    return EvalReport(
        methods=methods,
        rmse_curves={m.label: recall_curve(m.rmse, RMSE_THRESHOLDS) for m in methods},
        azimuth_curves={m.label: recall_curve(m.azimuth, AZIMUTH_THRESHOLDS) for m in methods},
        config={"noise": noise, "seed": seed, "refined": refiner is not None, "count": len(samples)},
    )


def monotonicity_violations(rows: Sequence[SweepRow]) -> list[str]:
    """Methods whose mean error drops as the noise level grows."""
    violations = []
    for method in dict.fromkeys(row.method for row in rows):
        series = sorted((row for row in rows if row.method == method), key=lambda r: r.noise)
        for prev, row in zip(series, series[1:]):
            for name in ("mean_rmse", "mean_azimuth"):
                if getattr(row, name) < getattr(prev, name):
                    violations.append(
                        f"{method}: {name} falls from {getattr(prev, name):.4g} at p={prev.noise} "
                        f"to {getattr(row, name):.4g} at p={row.noise}"
                    )
    return violations


def noise_sweep(
    samples: Sequence[SynthSample],
    bases: BaseShapeSet,
    estimators: Mapping[str, Estimator],
    levels: Sequence[float] = SWEEP_LEVELS,
    *,
    seed: int = 0,
    refiner: DenseNet | None = None,
    threads: int = 1,
) -> list[SweepRow]:
    """Mean 3D RMSE and azimuth error of each method at each salt-and-pepper level."""
    if not samples:
        raise ValueError("test set is empty")
    rows = []
    for stream, level in enumerate(levels):
        stacks = _corrupted(samples, level, seed, stream, refiner)
        for label, estimate in estimators.items():
            errors = _method_errors(label, estimate, samples, stacks, bases, threads)
            row = SweepRow(level, label, float(errors.rmse.mean()), float(errors.azimuth.mean()))
            logger.info("p=%.3g %s: rmse %.4f, azimuth %.2f deg", level, label, row.mean_rmse, row.mean_azimuth)
            rows.append(row)
    for message in monotonicity_violations(rows):
        logger.warning("Non-monotone noise response: %s", message)
    return rows


def retrieve(
    query: ParamVector,
    corpus: Sequence[ParamVector],
    mode: Literal["structure", "viewpoint"],
    k: int | None = None,
) -> list[RetrievalHit]:
    """Rank ``corpus`` by structural or viewpoint distance to ``query``."""
    if not corpus:
        raise ValueError("retrieval corpus is empty")
    if mode == "structure":
        distances = [float(np.linalg.norm(item.alpha_free - query.alpha_free)) for item in corpus]
    elif mode == "viewpoint":
        query_rotation = rotation_matrix(query.decode()[1])
        distances = [geodesic_angle(query_rotation, rotation_matrix(item.decode()[1])) for item in corpus]
    else:
        raise ValueError(f"unknown retrieval mode {mode!r}")
    order = sorted(range(len(corpus)), key=lambda i: (distances[i], i))
    return [RetrievalHit(i, distances[i]) for i in order[:k]]


def write_report_csv(path: Path | str, report: EvalReport) -> None:
    with Path(path).open("w", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["method", "sample", "rmse_3d", "azimuth_error_deg", "reprojection_error"])
        for method in report.methods:
            for i, values in enumerate(zip(method.rmse, method.azimuth, method.reprojection)):
                writer.writerow([method.label, i, *(f"{v:.9g}" for v in values)])


def write_curve_csv(path: Path | str, axis: str, curves: Mapping[str, RecallCurve]) -> None:
    """Write recall curves sharing one threshold grid; the first column is the x axis."""
    labels = list(curves)
    grid = curves[labels[0]].thresholds
    with Path(path).open("w", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow([axis, *labels])
        for row, threshold in enumerate(grid):
            writer.writerow([f"{threshold:.9g}", *(f"{curves[label].recall[row]:.9g}" for label in labels)])


def write_sweep_csv(path: Path | str, rows: Sequence[SweepRow]) -> None:
    with Path(path).open("w", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["noise", "method", "mean_rmse_3d", "mean_azimuth_error_deg"])
        for row in rows:
            writer.writerow([f"{row.noise:.9g}", row.method, f"{row.mean_rmse:.9g}", f"{row.mean_azimuth:.9g}"])


def write_sweep_curve_csv(path: Path | str, rows: Sequence[SweepRow]) -> None:
    """Mean 3D RMSE per method against noise level, in the curve file layout."""
    methods = list(dict.fromkeys(row.method for row in rows))
    levels = list(dict.fromkeys(row.noise for row in rows))
    table = {(row.noise, row.method): row.mean_rmse for row in rows}
    with Path(path).open("w", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["noise", *methods])
        for level in levels:
            writer.writerow([f"{level:.9g}", *(f"{table[level, m]:.9g}" for m in methods)])


def read_curve_csv(path: Path | str) -> CurveFile:
    """Parse a curve file, reporting the 1-based row of the first malformed line."""
    with Path(path).open(newline="") as stream:
        rows = list(csv.reader(stream))
    if not rows or len(rows[0]) < 2:
        raise DatasetFormatError(f"{path}: row 1: expected a header with an axis and at least one series")
    header = rows[0]
    if len(rows) == 1:
        raise DatasetFormatError(f"{path}: row 2: curve file has no data rows")
    values = []
    for number, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetFormatError(f"{path}: row {number}: expected {len(header)} columns, got {len(row)}")
        try:
            values.append([float(cell) for cell in row])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: row {number}: {exc}") from exc
    table = np.array(values)
    return CurveFile(axis=header[0], labels=header[1:], x=table[:, 0], series=table[:, 1:])
