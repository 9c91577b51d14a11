"""Command-line entry point: ``marscf {train,eval,sample,interpolate,analyze}``.

Every key of the flat config schema is also a flag (``--batch-size 32`` for
``batch_size``). Values come from the defaults, then ``--config FILE``, then
flags. All artifacts are written under ``--output-dir`` (or
``$MARSCF_OUTPUT_DIR``, falling back to ``./runs``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
Failures print one line to stderr: ``error code=<n> kind=<kind> message=<json string>``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .config import SCHEMA, RunConfig, read_config_file
from .data import DataError, load_dataset, pixel_centers, quantize, write_pnm
from .interpolate import interpolate_path
from .layers import NumericalError
from .model import MARSCF, ConfigError, FlowConfig, channel_dims, critical_path_bound, critical_path_steps
from .prior import SamplingTrace
from .train import TrainingAborted, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
SUBCOMMANDS = ("train", "eval", "sample", "interpolate", "analyze")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, "config", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marscf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        for key, (kind, _, help_text) in SCHEMA.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=str, default=None, help=help_text)
    return parser


def _resolve(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in SCHEMA if getattr(args, k) is not None}
    return RunConfig.build(file_values, overrides)


def _load_model(cfg: RunConfig) -> MARSCF:
    if not cfg["checkpoint"]:
        raise ConfigError("this command needs --checkpoint")
    try:
        return load_checkpoint(cfg["checkpoint"]).model
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc


def _tile(images: np.ndarray, columns: int) -> np.ndarray:
    """Arrange ``[n, C, H, W]`` images in a grid with ``columns`` columns."""
    n, C, H, W = images.shape
    rows = -(-n // columns)
    canvas = np.zeros((C, rows * H, columns * W), dtype=images.dtype)
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        canvas[:, r * H:(r + 1) * H, c * W:(c + 1) * W] = img
    return canvas


def _grid_suffix(channels: int) -> str:
    return ".pgm" if channels == 1 else ".ppm"


def cmd_train(cfg: RunConfig, out: Path) -> None:
    flow, spec, tcfg = cfg.flow(), cfg.dataset(), cfg.training()
    dataset = load_dataset(spec)
    if cfg["checkpoint"]:
        model = _load_model(cfg)
    else:
        model = MARSCF(flow, seed=cfg["model_seed"])
    (out / "config.txt").write_text(cfg.to_text())
    result = train(model, dataset, tcfg, log_path=out / "metrics.jsonl", checkpoint_dir=out / "checkpoints")
    val = result.history("val")
    summary = {"final_val_bpd": val[-1] if val else None, "skipped_steps": result.skipped_steps,
               "checkpoint": str(out / "checkpoints" / "final.ckpt")}
    print(json.dumps(summary))


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    model = _load_model(cfg)
    spec = cfg.dataset()
    C, N = model.config.channels, model.config.size
    spec.shape = (C, N, N)
    dataset = load_dataset(spec)
    bpd = evaluate(model, dataset, "val", cfg["eval_seed"], cfg["eval_batch_size"])
    print(f"bpd={bpd!r}")


def cmd_sample(cfg: RunConfig, out: Path) -> None:
    model = _load_model(cfg)
    grid = cfg["grid"]
    if grid < 1:
        raise ConfigError("grid must be >= 1")
    rng = np.random.default_rng(cfg["seed"])
    trace = SamplingTrace()
    x = model.sample(grid * grid, rng, cfg["temperature"], trace)
    images = quantize(x.data, cfg["bits"])
    path = out / f"samples{_grid_suffix(images.shape[1])}"
    write_pnm(path, _tile(images, grid), maxval=2 ** cfg["bits"] - 1)
    print(json.dumps({"samples": str(path), "count": grid * grid, "channel_steps": trace.channel_steps}))


def cmd_interpolate(cfg: RunConfig, out: Path) -> None:
    model = _load_model(cfg)
    icfg = cfg.interpolation()
    spec = cfg.dataset()
    C, N = model.config.channels, model.config.size
    spec.shape = (C, N, N)
    dataset = load_dataset(spec)
    pool = dataset.val if len(dataset.val) >= 2 else dataset.train
    if len(pool) < 2:
        raise DataError("need at least two images to interpolate")
    rng = np.random.default_rng(cfg["seed"])
    bits = cfg["bits"]
    log_path = out / "interp_objectives.jsonl"
    with open(log_path, "w") as handle:
        for p in range(cfg["pairs"]):
            ia, ib = rng.choice(len(pool), size=2, replace=False)
            xa = pixel_centers(pool[ia:ia + 1], bits, model.dtype)
            xb = pixel_centers(pool[ib:ib + 1], bits, model.dtype)
            path = interpolate_path(model, xa, xb, icfg)
            for tag, middle in (("projected", path.images), ("linear", path.linear_images)):
                strip = np.concatenate([path.endpoints[:1], middle, path.endpoints[1:]])
                write_pnm(out / f"interp_{p:02d}_{tag}{_grid_suffix(C)}",
                          _tile(quantize(strip, bits), len(strip)), maxval=2 ** bits - 1)
            for i, alpha in enumerate(path.alphas):
                handle.write(json.dumps({"pair": p, "a": int(ia), "b": int(ib), "waypoint": i,
                                         "alpha": float(alpha),
                                         "linear_objective": float(path.linear_objective[i]),
                                         "projected_objective": float(path.objective[i])}) + "\n")
    print(json.dumps({"pairs": cfg["pairs"], "objectives": str(log_path)}))


def analyze_report(config: FlowConfig) -> str:
    shapes = channel_dims(config)
    n = config.levels
    lines = [f"config C={config.channels} N={config.size} n={n}",
             f"{'level':<6}{'latent':<8}{'shape':<16}{'elements':>9}{'steps':>7}"]
    total = 0
    for i, shape in enumerate(shapes, 1):
        name = f"h_{i}" if i == n else f"l_{i}"
        elements = int(np.prod(shape))
        total += elements
        lines.append(f"{i:<6}{name:<8}{'[' + ','.join(map(str, shape)) + ']':<16}{elements:>9}{shape[0]:>7}")
    steps = critical_path_steps(config)
    bound = critical_path_bound(config)
    lines.append(f"total_elements={total} expected={config.dims}")
    lines.append(f"T={steps}")
    lines.append(f"bound_3CN={bound} holds={'true' if steps <= bound else 'false'}")
    return "\n".join(lines)


def cmd_analyze(cfg: RunConfig, out: Path) -> None:
    report = analyze_report(cfg.flow())
    (out / "analysis.txt").write_text(report + "\n")
    print(report)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample,
            "interpolate": cmd_interpolate, "analyze": cmd_analyze}


def run(argv=None) -> int:
    try:
        try:
            args = build_parser().parse_args(argv)
            cfg = _resolve(args)
            out = cfg.output_dir()
            out.mkdir(parents=True, exist_ok=True)
            with T.no_grad() if args.command in ("eval", "sample", "analyze") else contextlib.nullcontext():
                COMMANDS[args.command](cfg, out)
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, "config", str(exc)) from exc
        except (DataError, CheckpointError, FileNotFoundError) as exc:
            raise CliError(EXIT_DATA, "data", str(exc)) from exc
        except (TrainingAborted, NumericalError, FloatingPointError) as exc:
            raise CliError(EXIT_NUMERICAL, "numerical", str(exc)) from exc
    except CliError as exc:
        print(f"error code={exc.code} kind={exc.kind} message={json.dumps(str(exc))}", file=sys.stderr)
        return exc.code
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
