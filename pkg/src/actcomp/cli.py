"""Command-line surface: compression round-trips, error-propagation studies,
coefficient calibration, end-to-end training, and CSV analysis.

Exit codes: 0 ok, 2 I/O or format error, 3 training divergence, 4 memory
infeasible, 64 usage/parameter error, 65 CSV schema mismatch.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import codec, controller, data, errorprop, training
from .errors import (
    ActcompError,
    DataError,
    DimensionError,
    FormatError,
    LifecycleError,
    MemoryInfeasibleError,
    ParameterError,
    SchemaError,
)
from .tensor import compare, make_tensor, read_tensor, write_tensor

EXIT_OK = 0
EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_MEMORY = 4
EXIT_USAGE = 64
EXIT_SCHEMA = 65


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit 2; usage is 64 here
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    p = _Parser(prog="actcomp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic tensor as a CMTT file")
    g.add_argument("out")
    g.add_argument("--dims", required=True, help="comma-separated extents, e.g. 64,64")
    g.add_argument("--fill", default="uniform",
                   choices=["constant", "uniform", "relu-sparse"])
    g.add_argument("--value", type=float, default=0.0)
    g.add_argument("--lo", type=float, default=-1.0)
    g.add_argument("--hi", type=float, default=1.0)
    g.add_argument("--sparsity", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--precision", type=int, default=4, choices=[4, 8])

    c = sub.add_parser("compress", help="CMTT -> CMTZ with an error bound")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--eb", type=float, required=True)
    c.add_argument("--radius", type=int, default=codec.DEFAULT_RADIUS)
    c.add_argument("--no-preserve-zeros", action="store_true")

    d = sub.add_parser("decompress", help="CMTZ -> CMTT")
    d.add_argument("input")
    d.add_argument("output")

    cmp_ = sub.add_parser("compare", help="element-wise diff of two CMTT files")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--eb", type=float, required=True)

    e = sub.add_parser("error-prop",
                       help="gradient-error injection study (both zero arms)")
    e.add_argument("--layer-shape", default=str(errorprop.DEFAULT_MULTI_SHAPE),
                   help="grammar CxHxW,kKxK,sS,oO")
    e.add_argument("--batch", type=int, default=64)
    e.add_argument("--eb", type=float, default=1e-3)
    e.add_argument("--sparsity", type=float, default=0.5,
                   help="activation nonzero ratio R")
    e.add_argument("--trials", type=int, default=30)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--a", type=float, default=errorprop.DEFAULT_COEFFICIENT,
                   dest="coeff", help="coefficient for sigma_pred")
    e.add_argument("--out", required=True)

    k = sub.add_parser("calibrate", help="estimate the coefficient a")
    k.add_argument("--trials", type=int, default=64)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--regime", default="multi", choices=["multi", "single"])
    k.add_argument("--batch", type=int, default=64)
    k.add_argument("--eb", type=float, default=1e-3)

    t = sub.add_parser("train", help="desk-scale training run")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", required=True,
                   help="baseline | comet | comet-static | inject | inject(EB)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    a = sub.add_parser("analyze", help="summarize known CSV schemas")
    a.add_argument("--in", dest="inputs", nargs="+", required=True)
    a.add_argument("--out", default=None)

    return p


# ---- train experiment config ----

_EXPERIMENT_KEYS = {
    "dataset": str,
    "images": str,
    "labels": str,
    "eval_images": str,
    "eval_labels": str,
    "train_size": int,
    "test_size": int,
    "classes": int,
    "image_hw": int,
    "dataset_seed": int,
    "noise": float,
    "label_flip": float,
    "drift_start": float,
    "drift_end": float,
    "iterations": int,
    "batch_size": int,
    "lr": float,
    "momentum": float,
    "eval_every": int,
    "preserve_zeros": int,
    "inject_eb": float,
    "radius": int,
}


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    images: str = ""
    labels: str = ""
    eval_images: str = ""
    eval_labels: str = ""
    train_size: int = 1024
    test_size: int = 512
    classes: int = 10
    image_hw: int = 28
    dataset_seed: int = 0
    noise: float = 0.35
    label_flip: float = 0.03
    settings: training.TrainSettings = None
    controller: controller.ControllerConfig = None

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            mapping = controller.parse_kv_lines(fh.read())
        exp_kwargs = {}
        ctrl_kwargs = {}
        settings_kwargs = {}
        settings_fields = {f.name for f in fields(training.TrainSettings)}
        for key, raw in mapping.items():
            if key in controller._CONFIG_TYPES:
                ctrl_kwargs[key] = raw
            elif key in _EXPERIMENT_KEYS:
                value = _EXPERIMENT_KEYS[key](raw)
                if key == "preserve_zeros":
                    value = bool(value)
                if key in settings_fields:
                    settings_kwargs[key] = value
                else:
                    exp_kwargs[key] = value
            else:
                raise ParameterError(f"unknown config key {key!r}")
        cfg = cls(**exp_kwargs)
        cfg.settings = training.TrainSettings(**settings_kwargs)
        cfg.controller = controller.controller_config_from_mapping(ctrl_kwargs)
        return cfg

    def load_datasets(self):
        if self.dataset == "synthetic":
            return data.synthetic_dataset(
                self.train_size,
                self.test_size,
                num_classes=self.classes,
                image_hw=self.image_hw,
                seed=self.dataset_seed,
                noise=self.noise,
                label_flip=self.label_flip,
            )
        if self.dataset == "idx":
            train_d = data.load_idx_dataset(self.images, self.labels, self.classes)
            eval_d = data.load_idx_dataset(
                self.eval_images or self.images,
                self.eval_labels or self.labels,
                self.classes,
            )
            return train_d, eval_d
        raise ParameterError(f"unknown dataset kind {self.dataset!r}")


# ---- subcommands ----


def _cmd_gen(args) -> int:
    dims = [int(x) for x in args.dims.split(",") if x]
    t = make_tensor(
        dims,
        args.fill,
        value=args.value,
        lo=args.lo,
        hi=args.hi,
        sparsity=args.sparsity,
        seed=args.seed,
        precision=args.precision,
    )
    n = write_tensor(t, args.out)
    print(f"wrote {args.out}: dims={list(t.dims)} precision={t.precision} bytes={n}")
    return EXIT_OK


def _cmd_compress(args) -> int:
    t = read_tensor(args.input)
    params = codec.CodecParams(
        eb=args.eb, radius=args.radius, preserve_zeros=not args.no_preserve_zeros
    )
    compressed, report = codec.compress(t.astype(4), params)
    codec.write_compressed(compressed, args.output)
    print(
        f"ratio={report.ratio:.4f} original_bytes={report.original_bytes} "
        f"compressed_bytes={report.compressed_bytes} "
        f"outlier_fraction={report.outlier_fraction:.6f} "
        f"entropy_bits_per_symbol={report.codes_entropy_bits_per_symbol:.4f} "
        f"outlier_warning={int(report.outlier_warning)}"
    )
    return EXIT_OK


def _cmd_decompress(args) -> int:
    compressed = codec.read_compressed(args.input)
    t = codec.decompress(compressed)
    write_tensor(t, args.output)
    print(f"wrote {args.output}: dims={list(t.dims)}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    a = read_tensor(args.a)
    b = read_tensor(args.b)
    report = compare(a, b, args.eb)
    print(
        f"max_abs_diff={report.max_abs_diff!r} "
        f"mean_abs_diff={report.mean_abs_diff!r} "
        f"count_exceeding={report.count_exceeding} "
        f"flushed_zeros={report.flushed_zero_count}"
    )
    return EXIT_OK


def _cmd_error_prop(args) -> int:
    shape = errorprop.parse_layer_shape(args.layer_shape)
    if not 0.0 < args.sparsity <= 1.0:
        raise ParameterError("sparsity must be in (0, 1]")
    rows = [errorprop.ERRORPROP_CSV_HEADER]
    for preserve in (True, False):
        for i in range(args.trials):
            trial_seed = np.random.SeedSequence(
                [args.seed, i, 1 if preserve else 0]
            ).generate_state(1)[0]
            trial = errorprop.run_error_trial(
                shape,
                args.batch,
                args.sparsity,
                args.eb,
                seed=int(trial_seed),
                preserve_zeros=preserve,
            )
            r_eff = trial.R if preserve else 1.0
            pred = errorprop.predict_sigma(
                args.coeff, trial.L_bar, trial.N, r_eff, trial.eb
            )
            rows.append(errorprop.errorprop_csv_row(i, trial, pred, preserve))
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    print(f"wrote {args.out}: {2 * args.trials} trials ({args.trials} per arm)")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    result = errorprop.calibrate_a(
        N=args.batch,
        eb=args.eb,
        trials=args.trials,
        seed=args.seed,
        regime=args.regime,
    )
    print(
        f"a_hat={result.a_hat:.4f} +/- {result.half_width:.4f} "
        f"trials={result.trials} regime={args.regime} resampled={result.resampled}"
    )
    return EXIT_OK


def _run_one_mode(cfg: ExperimentConfig, mode: str, inject_eb, seed: int):
    settings = cfg.settings
    if inject_eb is not None:
        settings = replace(settings, inject_eb=inject_eb)
    train_d, eval_d = cfg.load_datasets()
    return training.train(train_d, eval_d, mode, cfg.controller, seed, settings)


def _cmd_train(args) -> int:
    mode, inject_eb = training.parse_mode(args.mode)
    cfg = ExperimentConfig.from_file(args.config)
    result = _run_one_mode(cfg, mode, inject_eb, args.seed)
    conv_ids = [l.id for l in result.network.layers if l.kind == "conv2d"]
    training.write_records_csv(args.out, result.records, conv_ids)

    baseline = None
    if mode != "baseline":
        baseline = _run_one_mode(cfg, "baseline", None, args.seed)
        base_out = (
            args.out[: -len(".csv")] + ".baseline.csv"
            if args.out.endswith(".csv")
            else args.out + ".baseline"
        )
        training.write_records_csv(base_out, baseline.records, conv_ids)

    def describe(tag, res):
        acc = "" if res.final_eval_accuracy is None else f"{res.final_eval_accuracy:.6f}"
        print(
            f"{tag}: status={res.status} final_eval_accuracy={acc} "
            f"peak_activation_bytes={res.peak_activation_bytes} "
            f"reserve_breaches={res.reserve_breaches}"
        )

    describe(f"mode={mode}", result)
    if baseline is not None:
        describe("baseline", baseline)
        if (
            result.final_eval_accuracy is not None
            and baseline.final_eval_accuracy is not None
        ):
            gap = (baseline.final_eval_accuracy - result.final_eval_accuracy) * 100
            print(f"accuracy_gap_pp={gap:.4f}")
        print(
            "peak_bytes_saving="
            f"{baseline.peak_activation_bytes - result.peak_activation_bytes}"
        )
    if result.status == "diverged":
        print("divergence: loss became non-finite; run halted", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _read_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        records = [row for row in csv.reader(fh) if row]
    if not records:
        raise SchemaError(f"{path}: empty file")
    header, rows = records[0], records[1:]
    if any(len(r) != len(header) for r in rows):
        raise SchemaError(f"{path}: ragged rows")
    return header, rows


def _schema_of(header):
    if header == errorprop.ERRORPROP_CSV_HEADER:
        return "errorprop"
    if header[: len(training.BASE_CSV_COLUMNS)] == training.BASE_CSV_COLUMNS:
        return "training"
    raise SchemaError(f"unknown CSV schema: {header[:4]}...")


def _numeric_summary(header, rows):
    out = []
    for j, name in enumerate(header):
        values = []
        for r in rows:
            cell = r[j]
            if cell == "":
                continue
            try:
                values.append(float(cell))
            except ValueError:
                values = None
                break
        if not values:
            continue
        arr = np.asarray(values)
        out.append(
            (name, len(values), float(arr.mean()), float(arr.std()),
             float(arr.min()), float(arr.max()))
        )
    return out


def _cmd_analyze(args) -> int:
    tables = []
    schemas = []
    for path in args.inputs:
        header, rows = _read_csv(path)
        schemas.append((_schema_of(header), path, header, rows))
    out_lines = []
    for schema, path, header, rows in schemas:
        out_lines.append(f"# {path} ({schema}, {len(rows)} rows)")
        out_lines.append("column,count,mean,std,min,max")
        for name, cnt, mean, std, mn, mx in _numeric_summary(header, rows):
            out_lines.append(f"{name},{cnt},{mean!r},{std!r},{mn!r},{mx!r}")
        tables.append((schema, header, rows))

    train_tables = [(h, r) for s, h, r in ((s, h, r) for s, _, h, r in schemas)
                    if s == "training"]
    if len(train_tables) == 2:
        out_lines.append("# paired accuracy gap (file1 - file2)")
        (h1, r1), (h2, r2) = train_tables
        for col in ("train_accuracy", "eval_accuracy"):
            j1, j2 = h1.index(col), h2.index(col)
            by_iter = {}
            for r in r1:
                if r[j1] != "":
                    by_iter[r[0]] = float(r[j1])
            gaps = [
                by_iter[r[0]] - float(r[j2])
                for r in r2
                if r[j2] != "" and r[0] in by_iter
            ]
            if gaps:
                arr = np.asarray(gaps)
                out_lines.append(
                    f"gap_{col},{len(gaps)},{float(arr.mean())!r},"
                    f"{float(arr.std())!r},{float(arr.min())!r},{float(arr.max())!r}"
                )
    text = "\n".join(out_lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


_HANDLERS = {
    "gen": _cmd_gen,
    "compress": _cmd_compress,
    "decompress": _cmd_decompress,
    "compare": _cmd_compare,
    "error-prop": _cmd_error_prop,
    "calibrate": _cmd_calibrate,
    "train": _cmd_train,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ParameterError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except MemoryInfeasibleError as exc:
        print(f"memory infeasible: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except (FormatError, DataError, LifecycleError, ActcompError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
