"""``cloudpatch`` command line: synth, mask, train, impute, evaluate, indices, report.

Every stage reads from and writes into one working directory (``--out``):

    scene/      synthetic ground-truth series (synth)
    masks/      masked observations plus the artificial masks (mask)
    models/     checkpoints, per-epoch histories, run summaries (train)
    imputed/<model>/   gap-filled series (impute)
    reports/    evaluation and index CSVs (evaluate, indices, report)

Exit status: 0 success, 1 user error, 2 internal error. Progress goes to
stderr; results only ever go to files.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .baseline import interpolate_image
from .errors import CloudpatchError, ConfigError, UnknownSubcommand
from .indices import IndexSeries, compare_series, series_mean_index
from .maskgen import GrfConfig, mask_series
from .metrics import evaluate_model, read_report, write_report
from .models import KINDS, ModelSpec, load_model, save_model
from .raster import ImageSeries, atomic_write_bytes, read_series, write_series
from .synth import SceneConfig, generate_scene
from .train import TrainConfig, impute_images, multi_run, split_dataset

log = logging.getLogger("cloudpatch")

MODEL_CHOICES = KINDS + ("baseline",)
SUBCOMMANDS = ("synth", "mask", "train", "impute", "evaluate", "indices", "report")


class UserError(CloudpatchError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class IndexOptions:
    kind: str = "ndci"
    orientation: str = "standard"


@dataclass(frozen=True)
class PipelineConfig:
    out: Path = Path("cloudpatch-out")
    manifest: Path | None = None  # ground-truth series; defaults to <out>/scene/manifest.txt
    scene: SceneConfig = SceneConfig()
    grf: GrfConfig = GrfConfig()
    train: TrainConfig = TrainConfig()
    models: tuple[str, ...] = ("cnn", "baseline")
    index: IndexOptions = IndexOptions()
    png: bool = False

    @property
    def truth_manifest(self) -> Path:
        return self.manifest if self.manifest is not None else self.out / "scene" / "manifest.txt"


SECTIONS = {"synth": SceneConfig, "mask": GrfConfig, "train": TrainConfig, "indices": IndexOptions}


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    """(section, key) -> 1-based line, for error messages."""
    out, section = {}, None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
        elif section and "=" in line and not line.startswith(("#", ";")):
            out[(section, line.split("=", 1)[0].strip().lower())] = n
    return out


def _convert(raw: str, kind, where: str, line: int | None):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "split":
            parts = tuple(float(p) for p in raw.split(","))
            if len(parts) != 3:
                raise ValueError(raw)
            return parts
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r}", line, where) from None


def _field_kind(cls, name: str):
    default = getattr(cls(), name)
    if name == "split":
        return "split"
    return type(default)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    lines = _line_numbers(text)
    base = path.parent
    cfg = PipelineConfig()
    known = set(SECTIONS) | {"paths", "models", "report"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]", None, section)
    for section, cls in SECTIONS.items():
        if not parser.has_section(section):
            continue
        names = {f.name for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            where, line = f"{section}.{key}", lines.get((section, key))
            if key not in names:
                raise ConfigError("unknown field", line, where)
            values[key] = _convert(raw, _field_kind(cls, key), where, line)
        try:
            obj = cls(**values)
            if isinstance(obj, SceneConfig):
                obj.validate()
        except (ValueError, TypeError) as exc:
            first = next(iter(values), None)
            raise ConfigError(str(exc), lines.get((section, first)) if first else None, section) from None
        attr = {"synth": "scene", "mask": "grf", "train": "train", "indices": "index"}[section]
        cfg = replace(cfg, **{attr: obj})
    if parser.has_section("paths"):
        for key, raw in parser.items("paths"):
            line = lines.get(("paths", key))
            if key == "out":
                cfg = replace(cfg, out=(base / raw.strip()).resolve())
            elif key == "manifest":
                manifest = (base / raw.strip()).resolve()
                if not manifest.is_file():
                    raise ConfigError(f"manifest {manifest} does not exist", line, "paths.manifest")
                cfg = replace(cfg, manifest=manifest)
            else:
                raise ConfigError("unknown field", line, f"paths.{key}")
    if parser.has_section("models"):
        for key, raw in parser.items("models"):
            line = lines.get(("models", key))
            if key != "kinds":
                raise ConfigError("unknown field", line, f"models.{key}")
            kinds = tuple(k.strip() for k in raw.split(",") if k.strip())
            bad = [k for k in kinds if k not in MODEL_CHOICES]
            if bad or not kinds:
                raise ConfigError(f"model kinds must be a non-empty subset of {', '.join(MODEL_CHOICES)}", line, "models.kinds")
            cfg = replace(cfg, models=kinds)
    if parser.has_section("report"):
        for key, raw in parser.items("report"):
            line = lines.get(("report", key))
            if key != "png":
                raise ConfigError("unknown field", line, f"report.{key}")
            cfg = replace(cfg, png=_convert(raw, bool, "report.png", line))
    _check_index(cfg.index)
    return cfg


def _check_index(opts: IndexOptions) -> None:
    if opts.kind not in ("ndci", "green_red"):
        raise ConfigError("index kind must be ndci or green_red", None, "indices.kind")
    if opts.orientation not in ("standard", "printed"):
        raise ConfigError("orientation must be standard or printed", None, "indices.orientation")


def apply_flags(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    if args.out is not None:
        cfg = replace(cfg, out=Path(args.out))
    if args.seed is not None:
        if args.seed < 0:
            raise UserError("--seed must be non-negative")
        seed_for = {
            "synth": lambda c: replace(c, scene=replace(c.scene, seed=args.seed)),
            "mask": lambda c: replace(c, grf=replace(c.grf, seed=args.seed)),
        }
        default = lambda c: replace(c, train=replace(c.train, base_seed=args.seed))  # noqa: E731
        cfg = seed_for.get(args.command, default)(cfg)
    if args.runs is not None:
        if args.runs < 1:
            raise UserError("--runs must be >= 1")
        cfg = replace(cfg, train=replace(cfg.train, n_runs=args.runs))
    if args.mask_ratio is not None:
        try:
            cfg = replace(cfg, grf=replace(cfg.grf, mask_ratio=args.mask_ratio))
        except ValueError as exc:
            raise UserError(f"--mask-ratio: {exc}") from None
    if args.ndci_orientation is not None:
        cfg = replace(cfg, index=replace(cfg.index, orientation=args.ndci_orientation))
    if args.model is not None:
        cfg = replace(cfg, models=(args.model,))
    if getattr(args, "png", False):
        cfg = replace(cfg, png=True)
    return cfg


# ---------------------------------------------------------------------------
# stages


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise UserError(f"{path} not found; {hint}")
    return path


def _truth(cfg: PipelineConfig) -> ImageSeries:
    series, _ = read_series(_require(cfg.truth_manifest, "run `synth` first or set paths.manifest"))
    return series


def _observed(cfg: PipelineConfig):
    series, masks = read_series(_require(cfg.out / "masks" / "manifest.txt", "run `mask` first"))
    if masks is None:
        raise UserError("masks/manifest.txt lists no mask files")
    return series, masks


def _test_indices(cfg: PipelineConfig, n: int) -> list[int]:
    return split_dataset(n, cfg.train.base_seed, cfg.train.split)[2]


def cmd_synth(cfg: PipelineConfig) -> None:
    series = generate_scene(cfg.scene)
    write_series(cfg.out / "scene", series)
    log.info("synth: %d dates of %dx%d written to %s", len(series), cfg.scene.height, cfg.scene.width, cfg.out / "scene")


def cmd_mask(cfg: PipelineConfig) -> None:
    truth = _truth(cfg)
    masked, masks = mask_series(truth, cfg.grf)
    write_series(cfg.out / "masks", masked, masks)
    log.info("mask: %d masks at ratio %g written to %s", len(masks), cfg.grf.mask_ratio, cfg.out / "masks")


def _history_csv(result) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "epoch", "train_loss", "val_loss"])
    for r in result.records:
        for e, (tl, vl) in enumerate(zip(r.train_history, r.val_history), start=1):
            w.writerow([r.seed, e, repr(tl), repr(vl)])
    return buf.getvalue()


def _summary_json(kind: str, cfg: PipelineConfig, result) -> str:
    doc = {
        "model": kind,
        "train_config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg.train).items()},
        "n_runs": len(result.records),
        "n_diverged": result.n_diverged,
        "runs": [
            {"seed": r.seed, "best_epoch": r.best_epoch, "best_val": r.best_val if r.val_history else None, "diverged": r.diverged}
            for r in result.records
        ],
        "per_band": result.summary,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_train(cfg: PipelineConfig) -> None:
    truth = _truth(cfg)
    _, masks = _observed(cfg)
    out = cfg.out / "models"
    out.mkdir(parents=True, exist_ok=True)
    for kind in cfg.models:
        if kind == "baseline":
            log.info("train: baseline has no parameters, skipping")
            continue
        spec = ModelSpec.for_kind(kind, truth.images[0].height, truth.images[0].width)
        log.info("train: %s, %d run(s) of up to %d epochs", kind, cfg.train.n_runs, cfg.train.max_epochs)
        result = multi_run(spec, truth, masks, cfg.train)
        if result.first_params is None:
            raise UserError(f"{kind}: the run with seed {cfg.train.base_seed} diverged; no checkpoint written")
        save_model(out / f"{kind}.prm", spec, result.first_params)
        atomic_write_bytes(out / f"{kind}_history.csv", _history_csv(result).encode())
        atomic_write_bytes(out / f"{kind}_summary.txt", _summary_json(kind, cfg, result).encode())
        if result.n_diverged:
            log.warning("train: %d of %d %s runs diverged", result.n_diverged, len(result.records), kind)


def cmd_impute(cfg: PipelineConfig) -> None:
    observed, masks = _observed(cfg)
    for kind in cfg.models:
        if kind == "baseline":
            filled = [interpolate_image(img) for img in observed.images]
        else:
            spec, params = load_model(_require(cfg.out / "models" / f"{kind}.prm", "run `train` first"))
            filled = impute_images(spec, params, list(observed.images), masks)
        write_series(cfg.out / "imputed" / kind, observed.replace_images(filled), masks)
        log.info("impute: %s -> %s", kind, cfg.out / "imputed" / kind)


def _imputed(cfg: PipelineConfig, kind: str) -> ImageSeries:
    series, _ = read_series(_require(cfg.out / "imputed" / kind / "manifest.txt", f"run `impute --model {kind}` first"))
    return series


def cmd_evaluate(cfg: PipelineConfig) -> None:
    truth = _truth(cfg)
    _, masks = _observed(cfg)
    test = _test_indices(cfg, len(truth))
    (cfg.out / "reports").mkdir(parents=True, exist_ok=True)
    by_model = {}
    for kind in cfg.models:
        imputed = _imputed(cfg, kind)
        metrics = evaluate_model([truth.images[i] for i in test], [imputed.images[i] for i in test], [masks[i] for i in test])
        by_model[kind] = [metrics]
    write_report(by_model, cfg.out / "reports" / "evaluation.csv")
    log.info("evaluate: %d model(s) on %d test images -> %s", len(by_model), len(test), cfg.out / "reports" / "evaluation.csv")


def _index_csv(series: IndexSeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "index_kind", "mean_value", "category"])
    cats = series.categories or ("",) * len(series.values)
    for d, v, c in zip(series.dates, series.values, cats):
        w.writerow([d.isoformat(), series.kind, repr(v), c])
    return buf.getvalue()


def cmd_indices(cfg: PipelineConfig) -> None:
    opts = cfg.index
    truth = series_mean_index(_truth(cfg), opts.kind, opts.orientation)
    reports = cfg.out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(reports / "indices_truth.csv", _index_csv(truth).encode())
    summary = io.StringIO()
    w = csv.writer(summary, lineterminator="\n")
    w.writerow(["model", "index_kind", "orientation", "pearson_r", "rmse", "n_dates", "fractions_truth", "fractions_model"])
    for kind in cfg.models:
        series = series_mean_index(_imputed(cfg, kind), opts.kind, opts.orientation)
        atomic_write_bytes(reports / f"indices_{kind}.csv", _index_csv(series).encode())
        cmp = compare_series(truth, series)
        fmt = lambda f: "" if f is None else ";".join(f"{k}={v!r}" for k, v in f.items())  # noqa: E731
        w.writerow([kind, opts.kind, opts.orientation, repr(cmp.pearson_r), repr(cmp.rmse), len(series.values), fmt(cmp.observed_fractions), fmt(cmp.imputed_fractions)])
    atomic_write_bytes(reports / "indices_summary.csv", summary.getvalue().encode())
    log.info("indices: %s (%s) for %d model(s) -> %s", opts.kind, opts.orientation, len(cfg.models), reports)


def cmd_report(cfg: PipelineConfig) -> None:
    reports = cfg.out / "reports"
    rows = read_report(_require(reports / "evaluation.csv", "run `evaluate` first"))
    lines = ["# cloudpatch report", "", "## Per-band test metrics", "", "| model | band | rmse | r |", "|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['model']} | {r['band']} | {r['rmse_mean']:.6f} | {r['r_mean']:.4f} |")
    idx = reports / "indices_summary.csv"
    if idx.exists():
        with open(idx, newline="", encoding="utf-8") as f:
            irows = list(csv.DictReader(f))
        lines += ["", "## Lake-mean index series versus ground truth", "", "| model | index | R | RMSE |", "|---|---|---|---|"]
        for r in irows:
            lines.append(f"| {r['model']} | {r['index_kind']} ({r['orientation']}) | {float(r['pearson_r']):.4f} | {float(r['rmse']):.6f} |")
    atomic_write_bytes(reports / "report.md", ("\n".join(lines) + "\n").encode())
    if cfg.png:
        _plot(rows, reports / "rmse_by_band.png")
    log.info("report: %s", reports / "report.md")


def _plot(rows: list[dict], path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise UserError("--png needs matplotlib (pip install 'cloudpatch[plot]')") from None
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for model in sorted({r["model"] for r in rows}):
        sel = [r for r in rows if r["model"] == model]
        ax.plot([r["band"] for r in sel], [r["rmse_mean"] for r in sel], marker="o", label=model)
    ax.set_xlabel("band")
    ax.set_ylabel("RMSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


COMMANDS = {
    "synth": cmd_synth,
    "mask": cmd_mask,
    "train": cmd_train,
    "impute": cmd_impute,
    "evaluate": cmd_evaluate,
    "indices": cmd_indices,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cloudpatch", description="Cloud-gap imputation pipeline for 8-band lake imagery.")
    p.add_argument("--version", action="version", version=f"cloudpatch {__version__}")
    p.add_argument("command", metavar="COMMAND", help=f"one of: {', '.join(SUBCOMMANDS)}")
    p.add_argument("--config", type=Path, help="INI file with [paths] [synth] [mask] [train] [models] [indices] [report]")
    p.add_argument("--seed", type=int, help="scene seed (synth), mask seed (mask) or base training seed (other stages)")
    p.add_argument("--model", choices=MODEL_CHOICES, help="restrict train/impute/evaluate/indices to one model")
    p.add_argument("--runs", type=int, help="number of training runs")
    p.add_argument("--mask-ratio", type=float, help="fraction of cells to mask")
    p.add_argument("--ndci-orientation", choices=("standard", "printed"))
    p.add_argument("--out", help="working directory")
    p.add_argument("--png", action="store_true", help="report: also write a PNG chart (needs matplotlib)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"cloudpatch: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", force=True)
    try:
        if args.command not in COMMANDS:
            raise UnknownSubcommand(f"unknown subcommand {args.command!r}; choose from {', '.join(SUBCOMMANDS)}")
        cfg = load_config(args.config) if args.config else PipelineConfig()
        cfg = apply_flags(cfg, args)
        COMMANDS[args.command](cfg)
    except CloudpatchError as exc:
        log.error("cloudpatch %s: %s", args.command, exc)
        return 1
    except (OSError, ValueError) as exc:
        log.error("cloudpatch %s: %s", args.command, exc)
        return 1
    except Exception:  # noqa: BLE001
        log.exception("cloudpatch %s: internal error", args.command)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
