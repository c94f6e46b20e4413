from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, NamedTuple, Sequence, TypeVar

import numpy as np

from wireframe3d.camera import ParamVector, param_layout, param_size
from wireframe3d.core import ResultCache, Wireframe3DError, content_hash, parallel_map
from wireframe3d.eval import (
    RECALL_AT,
    Estimator,
    azimuth_error,
    canonical_shape,
    evaluate,
    net_estimator,
    noise_sweep,
    read_curve_csv,
    rmse_3d,
    write_curve_csv,
    write_report_csv,
    write_sweep_csv,
    write_sweep_curve_csv,
)
from wireframe3d.fit import FitConfig, fit_from_heatmaps
from wireframe3d.net import (
    DenseNet,
    Interpreter,
    TrainConfig,
    TrainHistory,
    finetune_through_projection,
    heatmap_layout,
    interpreter_layout,
    load_weights,
    save_weights,
    train_interpreter,
    train_refiner,
    train_scratch,
)
from wireframe3d.skeleton import BaseShapeSet, compose_skeleton, resolve_model
from wireframe3d.synth import (
    Dataset,
    HeatmapStack,
    SamplerConfig,
    generate_dataset,
    mean_shape_params,
    read_dataset,
    write_dataset,
)

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int
    inputs: list[str]
    outputs: list[str]
    version: str
    duration_seconds: float

    def write(self, path: Path) -> None:
        """Write the manifest next to ``path``, replacing any previous one in a single step."""
        target = path.with_name(path.name + ".manifest.json")
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        tmp.replace(target)


class Outputs(NamedTuple):
    primary: Path
    files: list[Path]
    inputs: list[Path]
    config: dict[str, Any]


def tool_version() -> str:
    try:
        return metadata.version("wireframe3d")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def parse_overrides(pairs: Sequence[str]) -> dict[str, Any]:
    """Parse ``key=value`` pairs, reading values as JSON where possible."""
    overrides: dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key.strip()] = tuple(value) if isinstance(value, list) else value
    return overrides


def apply_overrides(cfg: ConfigT, overrides: dict[str, Any]) -> ConfigT:
    names = {field.name for field in dataclasses.fields(cfg)}  # type: ignore[arg-type]
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise UsageError(f"unknown setting(s) for {type(cfg).__name__}: {', '.join(unknown)}")
    return dataclasses.replace(cfg, **overrides)  # type: ignore[type-var]


def _load_bases(args: argparse.Namespace) -> BaseShapeSet:
    return resolve_model(args.model)


def _read(path: Path, bases: BaseShapeSet) -> Dataset:
    dataset = read_dataset(path, bases)
    logger.info("Read %d samples from %s", len(dataset.samples), path)
    return dataset


def _load_net(path: Path, layout: str, bases: BaseShapeSet) -> tuple[DenseNet, Any]:
    weights = load_weights(path, expected_layout=layout)
    if weights.spec_hash != bases.spec.spec_hash:
        raise Wireframe3DError(
            f"{path}: weights were trained for a different skeleton than model {bases.spec.category!r}"
        )
    return weights.net, weights.normalizer


def _load_interpreter(path: Path, bases: BaseShapeSet) -> Interpreter:
    net, normalizer = _load_net(path, interpreter_layout(bases), bases)
    if normalizer is None:
        raise Wireframe3DError(f"{path}: interpreter weights carry no target normalizer")
    return Interpreter(net=net, normalizer=normalizer, history=TrainHistory([], []))


def _load_refiner(path: Path | None, bases: BaseShapeSet, dataset: Dataset) -> DenseNet | None:
    if path is None:
        return None
    cfg = dataset.config
    layout = heatmap_layout(bases.n_keypoints, cfg.heatmap_height, cfg.heatmap_width)
    net, _ = _load_net(path, layout, bases)
    return net


def _fit_config(args: argparse.Namespace) -> FitConfig:
    cfg = FitConfig(seed=args.seed, threads=1)
    return apply_overrides(cfg, parse_overrides(args.set or []))


def cmd_gen(args: argparse.Namespace) -> Outputs:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    bases = _load_bases(args)
    base_cfg = SamplerConfig.shifted(seed=args.seed) if args.shifted else SamplerConfig(seed=args.seed)
    cfg = apply_overrides(base_cfg, parse_overrides(args.set or []))
    samples = generate_dataset(cfg, args.count, bases, args.threads)
    write_dataset(args.out, samples, bases, cfg)
    logger.info("Wrote %d samples to %s", len(samples), args.out)
    return Outputs(args.out, [args.out], [], {"sampler": cfg.to_dict(), "count": args.count})


def _write_loss_log(path: Path, history: TrainHistory) -> None:
    lines = ["epoch,train_loss,validation_loss"]
    lines.extend(
        f"{epoch},{train:.9g},{val:.9g}"
        for epoch, (train, val) in enumerate(zip(history.train_loss, history.validation_loss), start=1)
    )
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args: argparse.Namespace) -> Outputs:
    stage = args.stage
    if stage in ("interp", "refine") and args.data is None:
        raise UsageError(f"--stage {stage} needs --data")
    if stage in ("finetune", "scratch") and args.data2d is None:
        raise UsageError(f"--stage {stage} needs --data2d")
    if stage == "finetune" and args.weights is None:
        raise UsageError("--stage finetune needs the pre-trained interpreter via --weights")

    bases = _load_bases(args)
    base_cfg = TrainConfig.full_scale(seed=args.seed) if args.full_scale else TrainConfig(seed=args.seed)
    cfg = apply_overrides(base_cfg, parse_overrides(args.set or []))
    inputs: list[Path] = []
    loss_log = args.out.with_name(args.out.name + ".loss.csv")

    if stage == "refine":
        dataset = _read(args.data, bases)
        inputs.append(args.data)
        refiner_net, history = train_refiner(dataset.samples, cfg)
        layout = heatmap_layout(bases.n_keypoints, dataset.config.heatmap_height, dataset.config.heatmap_width)
        save_weights(args.out, refiner_net, None, layout, bases.spec.spec_hash)
    else:
        source = args.data if stage == "interp" else args.data2d
        dataset = _read(source, bases)
        inputs.append(source)
        refiner = _load_refiner(args.refiner, bases, dataset)
        if args.refiner is not None:
            inputs.append(args.refiner)
        if stage == "interp":
            model = train_interpreter(dataset.samples, cfg, refiner)
        elif stage == "finetune":
            inputs.append(args.weights)
            model = finetune_through_projection(
                _load_interpreter(args.weights, bases), dataset.samples, bases, cfg, refiner
            )
        else:
            model = train_scratch(dataset.samples, bases, SamplerConfig(), cfg, refiner)
        history = model.history
        save_weights(args.out, model.net, model.normalizer, interpreter_layout(bases), bases.spec.spec_hash)

    _write_loss_log(loss_log, history)
    if history.train_loss:
        logger.info("Training loss %.6g -> %.6g", history.train_loss[0], history.train_loss[-1])
    return Outputs(args.out, [args.out, loss_log], inputs, {"stage": stage, "train": cfg.to_dict()})


def _fit_record(
    h: HeatmapStack, bases: BaseShapeSet, cfg: FitConfig, cache: ResultCache | None
) -> dict[str, Any]:
    key = None
    if cache is not None:
        key = cache.make_cache_key(
            bases.spec.spec_hash,
            content_hash(np.ascontiguousarray(bases.bases).tobytes()),
            json.dumps(cfg.to_dict(), sort_keys=True),
            h.maps.shape,
            content_hash(np.ascontiguousarray(h.maps).tobytes()),
        )
        if (record := cache.get(key)) is not None:
            return record
    result = fit_from_heatmaps(h, bases, cfg)
    record = {
        "s": [float(v) for v in result.s_hat.to_array()],
        "cost": float(result.final_cost),
        "converged": bool(result.converged),
    }
    if cache is not None and key is not None:
        cache.set(key, record)
    return record


def _open_cache(args: argparse.Namespace) -> ResultCache | None:
    return None if args.no_cache else ResultCache(args.cache_dir)


def cmd_fit(args: argparse.Namespace) -> Outputs:
    bases = _load_bases(args)
    dataset = _read(args.data, bases)
    cfg = _fit_config(args)
    cache = _open_cache(args)

    records = parallel_map(
        lambda sample: _fit_record(sample.heatmaps, bases, cfg, cache), dataset.samples, args.threads
    )
    if cache is not None:
        cache.persist()

    columns = param_layout_columns(bases.k)
    lines = [",".join(["sample", "cost", "converged", "rmse_3d", "azimuth_error_deg", *columns])]
    for i, (sample, record) in enumerate(zip(dataset.samples, records)):
        s_hat = ParamVector.from_array(np.array(record["s"]))
        rmse = rmse_3d(canonical_shape(s_hat, bases), canonical_shape(sample.s_true, bases))
        cells = [str(i), f"{record['cost']:.9g}", str(int(record["converged"])), f"{rmse:.9g}"]
        cells.append(f"{azimuth_error(s_hat, sample.s_true):.9g}")
        cells.extend(f"{v:.9g}" for v in record["s"])
        lines.append(",".join(cells))
    args.out.write_text("\n".join(lines) + "\n")
    return Outputs(args.out, [args.out], [args.data], {"fit": cfg.to_dict()})


def param_layout_columns(k: int) -> list[str]:
    return [f"alpha_{i}" for i in range(1, k)] + param_layout(k).split(",")[1:]


def _parse_levels(raw: str) -> list[float]:
    try:
        levels = [float(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"--noise-levels: {exc}") from exc
    if not levels:
        raise UsageError("--noise-levels is empty")
    return levels


def cmd_eval(args: argparse.Namespace) -> Outputs:
    if not (args.fit or args.net):
        raise UsageError("select at least one method with --fit and/or --net")
    if args.net and not args.weights:
        raise UsageError("--net needs interpreter weights via --weights")
    levels = _parse_levels(args.noise_levels) if args.noise_levels else None

    bases = _load_bases(args)
    dataset = _read(args.data, bases)
    inputs = [args.data]
    refiner = _load_refiner(args.refiner, bases, dataset)
    if args.refiner is not None:
        inputs.append(args.refiner)

    estimators: dict[str, Estimator] = {}
    fit_cfg = _fit_config(args)
    cache = _open_cache(args) if args.fit else None
    if args.fit:
        estimators["fit"] = lambda h: ParamVector.from_array(
            np.array(_fit_record(h, bases, fit_cfg, cache)["s"])
        )
    if args.net:
        for path in args.weights:
            estimators[path.stem] = net_estimator(_load_interpreter(path, bases))
            inputs.append(path)

    prefix: Path = args.out
    report_path = prefix.with_name(prefix.name + ".csv")
    rmse_curve_path = prefix.with_name(prefix.name + ".rmse_curve.csv")
    azimuth_curve_path = prefix.with_name(prefix.name + ".azimuth_curve.csv")
    report = evaluate(
        dataset.samples,
        bases,
        estimators,
        noise=args.noise,
        seed=args.seed,
        refiner=refiner,
        threads=args.threads,
    )
    write_report_csv(report_path, report)
    write_curve_csv(rmse_curve_path, "rmse_threshold", report.rmse_curves)
    write_curve_csv(azimuth_curve_path, "azimuth_threshold_deg", report.azimuth_curves)
    files = [report_path, rmse_curve_path, azimuth_curve_path]

    for method in report.methods:
        curve = report.rmse_curves[method.label]
        recall_at = float(np.mean(method.rmse <= RECALL_AT))
        print(
            f"{method.label}: average recall {curve.average_recall:.4f} "
            f"(azimuth {report.azimuth_curves[method.label].average_recall:.4f}), "
            f"recall@{RECALL_AT:g} {recall_at:.4f}"
        )

    if levels is not None:
        rows = noise_sweep(
            dataset.samples, bases, estimators, levels, seed=args.seed, refiner=refiner, threads=args.threads
        )
        sweep_path = prefix.with_name(prefix.name + ".sweep.csv")
        sweep_curve_path = prefix.with_name(prefix.name + ".sweep_curve.csv")
        write_sweep_csv(sweep_path, rows)
        write_sweep_curve_csv(sweep_curve_path, rows)
        files.extend([sweep_path, sweep_curve_path])
        for row in rows:
            print(f"p={row.noise:g} {row.method}: rmse {row.mean_rmse:.4f}, azimuth {row.mean_azimuth:.2f} deg")

    if cache is not None:
        cache.persist()
    config = {"fit": fit_cfg.to_dict(), "noise": args.noise, "noise_levels": levels, "methods": list(estimators)}
    return Outputs(report_path, files, inputs, config)


def _params_from_args(args: argparse.Namespace, bases: BaseShapeSet) -> ParamVector:
    if args.params is not None:
        try:
            values = np.array([float(v) for v in args.params.split(",")])
        except ValueError as exc:
            raise Wireframe3DError(f"--params: {exc}") from exc
    elif args.from_fit is not None:
        lines = args.from_fit.read_text().splitlines()
        if args.sample + 1 >= len(lines) or args.sample < 0:
            raise Wireframe3DError(f"{args.from_fit}: no sample {args.sample}")
        values = np.array([float(v) for v in lines[args.sample + 1].split(",")[5:]])
    else:
        return mean_shape_params(bases)
    if values.size != param_size(bases.k) or not np.all(np.isfinite(values)):
        raise Wireframe3DError(
            f"parameter vector must hold {param_size(bases.k)} finite values ({param_layout(bases.k)}), "
            f"got {values.size}"
        )
    return ParamVector.from_array(values)


def export_obj(path: Path, s: ParamVector, bases: BaseShapeSet) -> None:
    """Write the composed skeleton as OBJ vertices and line elements."""
    alpha, _ = s.decode()
    coords = compose_skeleton(alpha, bases).coords
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in coords.T]
    # OBJ indices are 1-based
    lines.extend(f"l {i + 1} {j + 1}" for i, j in bases.spec.edges)
    path.write_text("\n".join(lines) + "\n")


def cmd_export_obj(args: argparse.Namespace) -> Outputs:
    bases = _load_bases(args)
    s = _params_from_args(args, bases)
    export_obj(args.out, s, bases)
    inputs = [args.from_fit] if args.from_fit is not None else []
    return Outputs(args.out, [args.out], inputs, {"params": [float(v) for v in s.to_array()]})


def plot_curves(paths: Sequence[Path], out: Path, title: str | None = None) -> None:
    """Render curve files to a reproducible SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = [(path, read_curve_csv(path)) for path in paths]
    axis = curves[0][1].axis
    with plt.rc_context({"svg.hashsalt": "wireframe3d", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.8))
        for path, curve in curves:
            for column, label in enumerate(curve.labels):
                name = label if len(curves) == 1 else f"{label} ({path.stem})"
                ax.plot(curve.x, curve.series[:, column], marker="o", markersize=3, label=name)
        ax.set_xlabel(axis.replace("_", " "))
        ax.set_ylabel("recall" if "threshold" in axis else "mean 3D RMSE")
        if title:
            ax.set_title(title)
        ax.grid(True, linewidth=0.5)
        ax.legend()
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)


def cmd_plot(args: argparse.Namespace) -> Outputs:
    plot_curves(args.curves, args.out, args.title)
    return Outputs(args.out, [args.out], list(args.curves), {"title": args.title})


COMMANDS: dict[str, Callable[[argparse.Namespace], Outputs]] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "export-obj": cmd_export_obj,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--model", default="chair", help="bundled model name or path to a base-shape JSON file")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(
        prog="wireframe3d",
        description="Recover 3D skeletons and viewpoints from 2D keypoint heatmaps.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--shifted", action="store_true", help="sample the shifted 2D-only distribution")
    gen.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a sampler setting")

    train = sub.add_parser("train", parents=[common], help="train a network stage")
    train.add_argument("--stage", choices=("interp", "refine", "finetune", "scratch"), required=True)
    train.add_argument("--data", type=Path, help="3D-annotated dataset")
    train.add_argument("--data2d", type=Path, help="dataset whose 2D keypoints supervise fine-tuning")
    train.add_argument("--weights", type=Path, help="pre-trained interpreter to fine-tune")
    train.add_argument("--refiner", type=Path, help="refiner weights applied to the training heatmaps")
    train.add_argument("--full-scale", action="store_true", help="use the full-size layer widths")
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a training setting")

    fit = sub.add_parser("fit", parents=[common], help="fit every sample of a dataset by optimization")
    fit.add_argument("--data", type=Path, required=True)
    fit.add_argument("--out", type=Path, required=True)
    fit.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a fit setting")
    fit.add_argument("--no-cache", action="store_true")
    fit.add_argument("--cache-dir", type=Path, default=Path(".wireframe3d_cache"))

    ev = sub.add_parser("eval", parents=[common], help="evaluate fitting and/or trained interpreters")
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--fit", action="store_true", help="evaluate the optimization baseline")
    ev.add_argument("--net", action="store_true", help="evaluate the interpreter(s) given by --weights")
    ev.add_argument("--weights", type=Path, action="append", help="interpreter weights (repeatable)")
    ev.add_argument("--refiner", type=Path, help="refine corrupted heatmaps before estimation")
    ev.add_argument("--noise", type=float, default=0.0, help="salt-and-pepper level of the report")
    ev.add_argument("--noise-levels", help="comma-separated levels for a noise sweep")
    ev.add_argument("--out", type=Path, required=True, help="prefix of the report files")
    ev.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a fit setting")
    ev.add_argument("--no-cache", action="store_true")
    ev.add_argument("--cache-dir", type=Path, default=Path(".wireframe3d_cache"))

    export = sub.add_parser("export-obj", parents=[common], help="export a skeleton as an OBJ wireframe")
    source = export.add_mutually_exclusive_group()
    source.add_argument("--params", help="comma-separated parameter vector")
    source.add_argument("--from-fit", type=Path, help="CSV written by the fit command")
    export.add_argument("--sample", type=int, default=0, help="row of --from-fit to export")
    export.add_argument("--out", type=Path, required=True)

    plot = sub.add_parser("plot", parents=[common], help="plot curve files as SVG")
    plot.add_argument("curves", type=Path, nargs="+")
    plot.add_argument("--out", type=Path, required=True)
    plot.add_argument("--title")
    return parser


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    configure_logging(args.verbose, args.quiet)
    started = time.monotonic()
    try:
        outputs = COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wireframe3d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Wireframe3DError, OSError, ValueError, TypeError) as exc:
        print(f"wireframe3d {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR

    manifest = RunManifest(
        command=args.command,
        config={"argv": list(argv) if argv is not None else sys.argv[1:], **outputs.config},
        seed=args.seed,
        inputs=[str(path) for path in outputs.inputs],
        outputs=[str(path) for path in outputs.files],
        version=tool_version(),
        duration_seconds=round(time.monotonic() - started, 3),
    )
    manifest.write(outputs.primary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
