"""Command-line interface: generate, preprocess, train, eval and plot.

Exit codes: 0 success, 1 configuration/validation error, 2 I/O or parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import datagen, dsp, io, plots
from .config import ValidationError, from_dict, to_dict
from .dsp import FilterSpec
from .encoder import CLASS_NAMES, ModelConfig, build_model, predict
from .metrics import EvalReport, evaluate, feature_histogram
from .nn import ConfigError
from .train import TrainConfig, train

log = logging.getLogger("msrt")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


@dataclass
class PathsConfig:
    out_dir: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    filter: FilterSpec = field(default_factory=FilterSpec)
    data: datagen.GeneratorConfig = field(default_factory=datagen.GeneratorConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.filter.validate()
        self.data.validate()
        if self.model.input_len != self.data.input_len:
            raise ValidationError(f"model.input_len {self.model.input_len} != data.input_len "
                                  f"{self.data.input_len}")


def load_run_config(path: str | None, seed: int | None = None,
                    overrides: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    """Read a RunConfig document; a file holding an embedded ``config`` (report,
    dataset sidecar) is accepted too, so any output can seed a re-run."""
    doc: dict[str, Any] = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise io.ParseError(f"{path}: invalid JSON ({exc.msg})", exc.pos) from None
        if isinstance(doc, dict) and "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]
        if not isinstance(doc, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
    doc = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    for section, values in (overrides or {}).items():
        doc.setdefault(section, {})
        if isinstance(doc[section], dict):
            doc[section].update({k: v for k, v in values.items() if v is not None})
    if seed is not None:
        for section in ("model", "train", "data"):
            doc.setdefault(section, {})
            if isinstance(doc[section], dict):
                doc[section]["seed"] = seed
    try:
        return from_dict(RunConfig, doc)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


def _check_output(path: str | Path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise FileExistsError(f"{p} exists; pass --force to overwrite")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


# -- subcommands --------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    out = _check_output(args.out, args.force)
    split = args.split
    per_class = cfg.data.test_per_class if split == "test" else cfg.data.per_class
    offset = cfg.data.per_class if split == "test" else 0
    records = datagen.gen_dataset(per_class, cfg.data.seed, cfg.data.input_len, offset=offset)
    x, y = datagen.stack(records)
    ds = io.Dataset(x.reshape(len(records), cfg.data.input_len), y)
    io.write_dataset(out, ds)
    meta = {"config": to_dict(cfg), "class_names": list(CLASS_NAMES), "split": split,
            "records": len(ds)}
    _write_json(_sidecar(out), meta)
    if args.csv:
        csv_path = _check_output(args.csv, args.force)
        io.write_dataset_csv(csv_path, ds)
        _write_json(_sidecar(csv_path), meta)
    print(f"wrote {len(ds)} records of length {ds.record_len} to {out}")
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    ds = io.read_dataset(args.input)
    out = _check_output(args.out, args.force)
    spec = cfg.filter
    spec.validate()
    if len(ds):
        filtered = dsp.preprocess(ds.samples.astype(np.float64), spec)
    else:
        filtered = ds.samples
    io.write_dataset(out, io.Dataset(filtered, ds.labels))
    _write_json(_sidecar(out), {"config": to_dict(cfg), "class_names": list(CLASS_NAMES),
                                "source": str(args.input), "records": len(ds)})
    print(f"filtered {len(ds)} records into {out}")
    return EXIT_OK


def _load_xy(path: str, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    ds = io.read_dataset(path, n_classes=cfg.model.n_classes)
    if len(ds) and ds.record_len != cfg.model.input_len:
        raise ValidationError(f"{path}: records have length {ds.record_len}, model expects "
                              f"{cfg.model.input_len}")
    return ds.samples.astype(np.float64), ds.labels.astype(np.int64)


def _report_dict(report: EvalReport, cfg: RunConfig, **extra) -> dict[str, Any]:
    d = report.to_dict()
    d.update(extra)
    d["config"] = to_dict(cfg)
    return d


def _fit(cfg: RunConfig, x, y, eval_data=None, verbose=True):
    model = build_model(cfg.model)
    t0 = time.perf_counter()

    def on_epoch(row):
        if verbose:
            extra = (f" eval_acc {row['eval_accuracy']:.4f} eval_f1 {row['eval_macro_f1']:.4f}"
                     if "eval_accuracy" in row else "")
            print(f"epoch {row['epoch']:3d} loss {row['loss']:.6f} acc {row['accuracy']:.4f} "
                  f"f1 {row['macro_f1']:.4f}{extra} ({time.perf_counter() - t0:.0f}s)", flush=True)

    result = train(model, x, y, cfg.train, eval_data=eval_data, on_epoch=on_epoch)
    return model, result


def cmd_train(args, cfg: RunConfig) -> int:
    x, y = _load_xy(args.data, cfg)
    eval_data = _load_xy(args.eval_data, cfg) if args.eval_data else None
    ckpt = _check_output(args.out, args.force)
    report_path = _check_output(args.report or ckpt.with_suffix(".report.json"), args.force)
    loss_path = _check_output(ckpt.with_suffix(".loss.csv"), args.force)
    if len(x) == 0:
        raise ValidationError(f"{args.data}: dataset is empty")
    model, result = _fit(cfg, x, y, eval_data)
    io.save_checkpoint(ckpt, model, to_dict(cfg), CLASS_NAMES)
    ex, ey = eval_data if eval_data is not None else (x, y)
    _, probs = predict(model, ex)
    report = evaluate(ey, probs, CLASS_NAMES)
    report.history = result.history
    report.epoch_average_f1 = result.epoch_average_f1
    _write_json(report_path, _report_dict(report, cfg, steps=result.steps,
                                          evaluated_on="eval_data" if eval_data else "train"))
    cols = ["epoch", "loss", "accuracy", "macro_f1"] + (
        ["eval_accuracy", "eval_macro_f1"] if eval_data is not None else [])
    plots.write_curve_csv(loss_path, cols, [[h[c] for c in cols] for h in result.history],
                          to_dict(cfg))
    print(f"macro-F1 {report.macro_f1:.4f}  epoch-average F1 {report.epoch_average_f1:.4f}")
    print(f"checkpoint {ckpt}  report {report_path}")
    return EXIT_OK


def load_model(path: str | Path):
    header, tensors = io.decode_checkpoint(Path(path).read_bytes())
    cfg = load_run_config(None) if not header.get("config") else from_dict(RunConfig, header["config"])
    model = build_model(cfg.model)
    io.load_into(model, tensors)
    return model, cfg


def _write_report_files(out_dir: Path, report: EvalReport, cfg: RunConfig, svg: bool,
                        **extra) -> None:
    conf = to_dict(cfg)
    _write_json(out_dir / "report.json", _report_dict(report, cfg, **extra))
    plots.write_curve_csv(out_dir / "confusion.csv", ["true\\pred"] + list(CLASS_NAMES),
                          [[n] + list(r) for n, r in zip(CLASS_NAMES, report.confusion)], conf)
    table = [[f"{100 * v:.2f}" for v in report.f1] + [f"{100 * report.macro_f1:.2f}"]]
    plots.write_curve_csv(out_dir / "f1_table.csv", [f"{n}(%)" for n in CLASS_NAMES] + ["AVG(%)"],
                          table, conf)
    for name, (fpr, tpr) in report.roc.items():
        path = out_dir / f"roc_{_safe(name)}.csv"
        plots.write_curve_csv(path, ["fpr", "tpr"], zip(fpr, tpr), conf)
        if svg:
            plots.csv_to_svg(path, path.with_suffix(".svg"),
                             f"ROC {name} (AUC {report.auc[name]:.3f})")


def _safe(name: str) -> str:
    sign = {"-": "neg", "+": "pos"}.get(name[:1], "")
    body = name[1:] if sign else name
    return sign + "".join(ch if ch.isalnum() else "_" for ch in body)


def _eval_extras(args, model, x, out_dir: Path, cfg: RunConfig) -> None:
    conf = to_dict(cfg)
    if args.heatmap is not None:
        rec = x[args.heatmap]
        m = dsp.correlation_heatmap(rec, args.window, args.stride)
        path = out_dir / f"heatmap_{args.heatmap}.csv"
        plots.write_curve_csv(path, [f"w{i}" for i in range(len(m))], m, conf)
        if args.svg:
            plots.csv_to_svg(path, path.with_suffix(".svg"), f"window correlation, record {args.heatmap}")
    if args.histograms:
        if cfg.model.arch != "msrt":
            raise ValidationError("feature histograms need an msrt model (no pyramid in the baseline)")
        from .ndtensor import Tensor, no_grad
        with no_grad():
            feats, pyr = model.pyramid(Tensor(x[:1]))
        for level, t in enumerate(pyr, start=2):
            edges, counts = feature_histogram(t, args.histograms)
            path = out_dir / f"hist_P{level}.csv"
            plots.write_curve_csv(path, ["bin_lo", "bin_hi", "count"],
                                  zip(edges[:-1], edges[1:], counts), conf)
            if args.svg:
                centers = (edges[:-1] + edges[1:]) / 2
                svg_csv = out_dir / f"hist_P{level}_centers.csv"
                plots.write_curve_csv(svg_csv, ["center", "count"], zip(centers, counts))
                plots.csv_to_svg(svg_csv, path.with_suffix(".svg"), f"P{level} amplitudes")
                svg_csv.unlink()


def cmd_eval(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise FileExistsError(f"{out_dir} is not empty; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kfold:
        return _kfold(args, cfg, out_dir)
    if not args.checkpoint:
        raise ValidationError("eval needs --checkpoint unless --kfold is given")
    model, cfg = load_model(args.checkpoint)
    x, y = _load_xy(args.data, cfg)
    _, probs = predict(model, x)
    report = evaluate(y, probs, CLASS_NAMES)
    _write_report_files(out_dir, report, cfg, args.svg, checkpoint=str(args.checkpoint))
    _eval_extras(args, model, x, out_dir, cfg)
    print(f"accuracy {report.accuracy:.4f}  macro-F1 {report.macro_f1:.4f}")
    for name, a in report.auc.items():
        print(f"  AUC {name:>6s} {a:.4f}")
    return EXIT_OK


def _kfold(args, cfg: RunConfig, out_dir: Path) -> int:
    x, y = _load_xy(args.data, cfg)
    folds = datagen.kfold_split(len(x), args.kfold, cfg.train.seed)
    rows = []
    for i, test_idx in enumerate(folds, start=1):
        train_idx = np.setdiff1d(np.arange(len(x)), test_idx)
        print(f"fold {i}/{args.kfold}: train {len(train_idx)} test {len(test_idx)}", flush=True)
        model, result = _fit(cfg, x[train_idx], y[train_idx], verbose=True)
        _, probs = predict(model, x[test_idx])
        report = evaluate(y[test_idx], probs, CLASS_NAMES)
        report.history = result.history
        report.epoch_average_f1 = result.epoch_average_f1
        fold_dir = out_dir / f"fold_{i}"
        fold_dir.mkdir(exist_ok=True)
        _write_report_files(fold_dir, report, cfg, args.svg, fold=i, k=args.kfold,
                            train_size=int(len(train_idx)), test_size=int(len(test_idx)))
        rows.append([str(i)] + [f"{100 * v:.2f}" for v in report.f1] +
                    [f"{100 * report.macro_f1:.2f}"])
    mean = np.mean([[float(v) for v in r[1:]] for r in rows], axis=0)
    rows.append(["mean"] + [f"{v:.2f}" for v in mean])
    plots.write_curve_csv(out_dir / "cv_table.csv",
                          ["fold"] + [f"{n}(%)" for n in CLASS_NAMES] + ["AVG(%)"], rows,
                          to_dict(cfg))
    print(f"{args.kfold}-fold mean macro-F1 {mean[-1]:.2f}%")
    return EXIT_OK


def cmd_plot(args, cfg: RunConfig) -> int:
    out = _check_output(args.out or Path(args.csv).with_suffix(".svg"), args.force)
    try:
        plots.csv_to_svg(args.csv, out, args.title)
    except ValueError as exc:
        raise io.ParseError(str(exc), 0) from None
    print(f"wrote {out}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON (or any output embedding one)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="msrt", description="Lightning waveform classification toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--csv", help="also write the CSV twin here")
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--per-class", type=int)
    g.add_argument("--test-per-class", type=int)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("preprocess", parents=[common], help="filter every record of a dataset")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--fs", type=float, help="sample rate in Hz")
    f.add_argument("--cutoff", type=float, help="low-pass cutoff in Hz")
    f.add_argument("--order", type=int, help="low-pass order")
    f.add_argument("--notch-base", type=float, help="mains frequency in Hz")
    f.add_argument("--harmonics", type=int, help="number of notched harmonics")
    f.add_argument("--q", type=float, help="notch quality factor")
    f.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", parents=[common], help="train a model and save a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="report JSON path (default: next to the checkpoint)")
    t.add_argument("--model", choices=("msrt", "baseline"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or run k-fold CV")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--kfold", type=int, help="train and test k models on a k-fold partition")
    e.add_argument("--model", choices=("msrt", "baseline"))
    e.add_argument("--epochs", type=int)
    e.add_argument("--heatmap", type=int, metavar="RECORD", help="window correlation of one record")
    e.add_argument("--window", type=int, default=100)
    e.add_argument("--stride", type=int, default=50)
    e.add_argument("--histograms", type=int, metavar="BINS", help="pyramid amplitude histograms")
    e.add_argument("--svg", action="store_true", help="render every curve CSV as SVG too")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", parents=[common], help="render a curve CSV as SVG")
    pl.add_argument("csv")
    pl.add_argument("--out")
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)
    return p


def _overrides(args) -> dict[str, dict[str, Any]]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "data": {"per_class": get("per_class"), "test_per_class": get("test_per_class")},
        "filter": {"sample_rate_hz": get("fs"), "lowpass_cutoff_hz": get("cutoff"),
                   "lowpass_order": get("order"), "notch_base_hz": get("notch_base"),
                   "notch_harmonics": get("harmonics"), "notch_q": get("q")},
        "model": {"arch": get("model")},
        "train": {"epochs": get("epochs"), "learning_rate": get("lr")},
    }


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.seed, _overrides(args))
        cfg.validate()
        return args.func(args, cfg)
    except (io.ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
