"""Command-line entry point: gen-data, train, eval, infer, diag.

Exit codes: 0 ok, 2 configuration error, 3 contract violation, 4 I/O or
format error. Failures print exactly one line to stderr starting with
``AAND-ERROR <kind>:``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import datasynth, metrics, scoring
from .corpus import CorpusConfig, load_class_corpus, make_class_corpus, write_class_corpus
from .raa import to_rows
from .teacher import level_masks
from .tensorio import (FORMAT_VERSION, FormatError, atomic_write, load_tensor, read_pgm, save_tensor,
                       write_pgm)
from .trainer import (LOSS_CSV_HEADER, AANDModel, ContractError, TrainConfig, TrainState, append_loss_csv,
                      checkpoint_extras, load_checkpoint, save_checkpoint, synthesize_training_anomalies,
                      train_stage1, train_stage2)

EXIT_OK, EXIT_CONFIG, EXIT_CONTRACT, EXIT_IO = 0, 2, 3, 4
ERROR_PREFIX = "AAND-ERROR"
THRESHOLD_PERCENTILE = 95.0

logger = logging.getLogger("aand")


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# run configuration
# ----------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything a run needs: training knobs, corpus shape and paths."""
    train: TrainConfig
    classes: tuple[str, ...] = datasynth.NORMAL_FAMILIES
    class_name: str = "stripes"
    n_train: int = 200
    n_test_normal: int = 50
    n_test_abnormal: int = 50
    data_dir: str = "data"
    out_dir: str = "runs"
    export_pgm: bool = False
    fpr_limit: float = 0.3

    def corpus_config(self) -> CorpusConfig:
        t = self.train
        return CorpusConfig(classes=self.classes, n_train=self.n_train, n_test_normal=self.n_test_normal,
                            n_test_abnormal=self.n_test_abnormal, image_size=t.image_size,
                            channels=t.in_channels, perlin_periods=t.perlin_periods, seed=t.seed)

    def as_pairs(self) -> list[tuple[str, object]]:
        pairs = [(name, getattr(self.train, name)) for name in TrainConfig.field_names()]
        pairs += [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "train"]
        return sorted(pairs)

    def render(self) -> str:
        return "".join(f"{k}={_format_value(v)}\n" for k, v in self.as_pairs())

    def config_hash(self) -> str:
        return hashlib.sha256(self.render().encode()).hexdigest()


def _run_defaults() -> dict[str, object]:
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    defaults.update({f.name: f.default for f in fields(RunConfig) if f.name != "train"})
    return defaults


KEYS = _run_defaults()


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(key: str, text: str):
    default = KEYS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [x.strip() for x in text.split(",") if x.strip()]
            return tuple(type(default[0])(x) for x in items) if default else tuple(items)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """key=value lines; '#' starts a comment; unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def build_run_config(values: dict[str, object]) -> RunConfig:
    train_keys = set(TrainConfig.field_names())
    try:
        train = TrainConfig(**{k: v for k, v in values.items() if k in train_keys})
        run = RunConfig(train=train, **{k: v for k, v in values.items() if k not in train_keys})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    unknown = [c for c in run.classes if c not in datasynth.NORMAL_FAMILIES]
    if unknown:
        raise ConfigError(f"unknown classes {unknown}; available {list(datasynth.NORMAL_FAMILIES)}")
    if run.class_name not in datasynth.NORMAL_FAMILIES:
        raise ConfigError(f"unknown class_name {run.class_name!r}")
    if not 0.0 < run.fpr_limit <= 1.0:
        raise ConfigError(f"fpr_limit must lie in (0, 1], got {run.fpr_limit}")
    return run


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then command-line flags on top."""
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    for key in KEYS:
        flag = getattr(args, f"opt_{key}", None)
        if flag is not None:
            values[key] = _parse_value(key, flag)
    return build_run_config(values)


def echo_config(run: RunConfig, out_dir: Path) -> None:
    """Record the resolved configuration, its hash and format versions."""
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(out_dir / "run_config.txt", run.render().encode())
    stamp = (f"run_config_hash={run.config_hash()}\n"
             f"train_config_hash={run.train.config_hash()}\n"
             f"format_version={FORMAT_VERSION}\n")
    atomic_write(out_dir / "config_hash.txt", stamp.encode())


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_gen_data(args, run: RunConfig) -> int:
    out = Path(args.out or run.data_dir)
    cfg = run.corpus_config()
    for name in run.classes:
        manifest = write_class_corpus(out, make_class_corpus(cfg, name), export_pgm=run.export_pgm)
        print(f"{name}: {manifest}")
    echo_config(run, out)
    return EXIT_OK


def _stage_paths(out_dir: Path, stage: int) -> tuple[Path, Path]:
    return out_dir / f"stage{stage}.ckpt", out_dir / f"loss_stage{stage}.csv"


def _trim_loss_csv(path: Path, last_epoch: int) -> None:
    """Drop rows past ``last_epoch`` so a resumed run appends without duplicates."""
    if not path.exists():
        return
    rows = list(csv.reader(io.StringIO(path.read_text())))
    if not rows or tuple(rows[0]) != LOSS_CSV_HEADER:
        raise FormatError(f"{path}: not a loss CSV")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_CSV_HEADER)
    writer.writerows(r for r in rows[1:] if int(r[0]) <= last_epoch)
    atomic_write(path, buf.getvalue().encode())


def _training_scores(model: AANDModel, images: np.ndarray, smoothing: bool) -> np.ndarray:
    adv = model.advanced_features(images)
    maps = scoring.anomaly_maps(adv, model.student_features(adv), images.shape[-2:], smoothing)
    return scoring.image_score(maps)


def cmd_train(args, run: RunConfig) -> int:
    cfg = run.train
    out = Path(run.out_dir)
    ckpt, loss_path = _stage_paths(out, args.stage)
    if args.stage == 1 and not cfg.use_raa:
        raise ContractError("stage 1 trains the amplification module, which is disabled (use_raa=false)")
    corpus = load_class_corpus(run.data_dir, run.class_name)
    echo_config(run, out)
    state = None
    if args.resume and ckpt.exists():
        model, state = load_checkpoint(ckpt, cfg)
        if state.stage != args.stage:
            raise ContractError(f"{ckpt} holds stage {state.stage}, cannot resume stage {args.stage}")
        _trim_loss_csv(loss_path, state.epoch)
    elif args.stage == 1:
        model = AANDModel(cfg)
        loss_path.unlink(missing_ok=True)
    else:
        prior = _stage_paths(out, 1)[0]
        if cfg.use_raa:
            if not prior.exists():
                raise ContractError(f"stage 2 needs a stage-1 checkpoint at {prior}")
            model, _ = load_checkpoint(prior, cfg)
        else:
            model = AANDModel(cfg)
        loss_path.unlink(missing_ok=True)

    def on_epoch(st: TrainState) -> None:
        save_checkpoint(ckpt, model, st)
        append_loss_csv(loss_path, st.history[-1:])

    if args.stage == 1:
        images, masks = synthesize_training_anomalies(corpus.train, cfg)
        state = train_stage1(model, images, masks, state=state, on_epoch=on_epoch)
    else:
        state = train_stage2(model, corpus.train, np.zeros(len(corpus.train), int), state=state, on_epoch=on_epoch)
        scores = _training_scores(model, corpus.train, cfg.smoothing)
        threshold = np.array([np.percentile(scores, THRESHOLD_PERCENTILE)])
        save_checkpoint(ckpt, model, state, extra={"threshold": threshold})
    if state.epoch == 0:
        save_checkpoint(ckpt, model, state)
    print(f"stage {args.stage}: {state.epoch} epochs -> {ckpt}")
    return EXIT_OK


def _normalization(maps: np.ndarray) -> tuple[float, float]:
    lo, hi = float(maps.min()), float(maps.max())
    return lo, (hi if hi > lo else lo + 1.0)


def export_maps(out_dir: Path, maps: np.ndarray) -> None:
    """Raw maps as tensors plus 8-bit PGMs under one shared affine scaling (recorded in a sidecar)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = _normalization(maps)
    for i, m in enumerate(maps):
        save_tensor(out_dir / f"{i:04d}.tns", m.astype(np.float32))
        write_pgm(out_dir / f"{i:04d}.pgm", (m - lo) / (hi - lo))
    sidecar = f"# pgm_value = round(255 * (map - min) / (max - min))\nmin={lo!r}\nmax={hi!r}\ncount={len(maps)}\n"
    atomic_write(out_dir / "normalization.txt", sidecar.encode())


def cmd_eval(args, run: RunConfig) -> int:
    out = Path(run.out_dir)
    corpus = load_class_corpus(run.data_dir, run.class_name)
    if len(corpus.test_labels) == 0:
        raise ContractError("test split is empty")
    if args.oracle_gt:
        maps = corpus.test_masks.astype(np.float64)
        config_hash = "oracle-gt"
    else:
        model, _ = load_checkpoint(args.ckpt, run.train)
        adv = model.advanced_features(corpus.test_images)
        maps = scoring.anomaly_maps(adv, model.student_features(adv), corpus.test_images.shape[-2:],
                                    run.train.smoothing)
        config_hash = run.train.config_hash()
    try:
        report = metrics.evaluate_maps(maps, corpus.test_masks, corpus.test_labels, run.class_name,
                                       config_hash, run.fpr_limit)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    echo_config(run, out)
    metrics.write_reports(out / "eval_report.csv", [report])
    export_maps(out / "maps", maps)
    print(metrics.reports_to_csv([report]), end="")
    return EXIT_OK


def read_image(path: Path, channels: int, size: int) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        img = read_pgm(path)[None]
    else:
        img = load_tensor(path)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[-2:] != (size, size):
        raise FormatError(f"{path}: expected a ({channels}, {size}, {size}) image, got shape {img.shape}")
    if img.shape[0] != channels:
        if img.shape[0] == 1:
            img = np.repeat(img, channels, axis=0)
        else:
            raise FormatError(f"{path}: image has {img.shape[0]} channels, model expects {channels}")
    if not np.all(np.isfinite(img)):
        raise FormatError(f"{path}: image contains non-finite values")
    return img.astype(np.float32)


def cmd_infer(args, run: RunConfig | None) -> int:
    model, _ = load_checkpoint(args.ckpt, run.train if run else None)
    cfg = model.cfg
    img = read_image(Path(args.image), cfg.in_channels, cfg.image_size)
    adv = model.advanced_features(img[None])
    amap = scoring.anomaly_maps(adv, model.student_features(adv), img.shape[-2:], cfg.smoothing)[0]
    score = scoring.image_score(amap)
    line = {"image": str(args.image), "score": score}
    threshold = checkpoint_extras(args.ckpt).get("threshold")
    if threshold is not None:
        line["threshold"] = float(threshold.ravel()[0])
        line["anomalous"] = bool(score > line["threshold"])
    if args.map_out:
        save_tensor(args.map_out, amap.astype(np.float32))
    print(json.dumps(line))
    return EXIT_OK


DIAG_HEADER = ("level", "interclass_vanilla", "interclass_advanced", "residual_normal", "residual_abnormal")


def diagnostics(model: AANDModel, images: np.ndarray, masks: np.ndarray) -> list[tuple]:
    """Per level: inter-class cosine distance before/after amplification and gated residual intensities."""
    teacher = model.teacher_features(images)
    lmasks = level_masks(masks, len(teacher))
    gates = model.raa.gates_and_residuals(teacher) if model.cfg.use_raa else None
    rows = []
    for k, t in enumerate(teacher):
        bits = lmasks[k].reshape(-1).astype(bool)
        if bits.all() or not bits.any():
            raise ContractError(f"level {k}: diagnostics need both normal and anomalous patches")
        t_rows = to_rows(t)
        if gates is None:
            a_rows, applied = t_rows, np.zeros_like(t_rows)
        else:
            gate, residual = gates[k]
            applied = to_rows(residual) * gate.reshape(-1, 1)
            a_rows = t_rows + applied
        vanilla = scoring.interclass_distance([t_rows[~bits]], [t_rows[bits]], seed=k)[0]
        advanced = scoring.interclass_distance([a_rows[~bits]], [a_rows[bits]], seed=k)[0]
        rows.append((k, vanilla, advanced, scoring.residual_intensity(applied[~bits]),
                     scoring.residual_intensity(applied[bits])))
    return rows


def cmd_diag(args, run: RunConfig) -> int:
    model, _ = load_checkpoint(args.ckpt, None)
    corpus = load_class_corpus(run.data_dir, run.class_name)
    ab = corpus.test_labels == 1
    if not ab.any():
        raise ContractError("diagnostics need corrupted test images")
    rows = diagnostics(model, corpus.test_images[ab], corpus.test_masks[ab])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DIAG_HEADER)
    writer.writerows((k, f"{v:.8g}", f"{a:.8g}", f"{rn:.8g}", f"{ra:.8g}") for k, v, a, rn, ra in rows)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "diag.csv", buf.getvalue().encode())
    print(buf.getvalue(), end="")
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    group = p.add_argument_group("configuration overrides")
    for key in sorted(KEYS):
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", metavar="VALUE")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aand", description="Anomaly amplification and normality distillation on a toy corpus.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="materialize the toy corpus and manifests")
    p.add_argument("--out", help="corpus root (defaults to data_dir)")
    _add_config_flags(p)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--resume", action="store_true", help="continue from this stage's checkpoint")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="metrics report and anomaly-map export")
    p.add_argument("--ckpt")
    p.add_argument("--oracle-gt", action="store_true", help="score the ground-truth masks themselves")
    _add_config_flags(p)

    p = sub.add_parser("infer", help="anomaly map and score for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--map-out", help="write the anomaly map tensor here")
    _add_config_flags(p)

    p = sub.add_parser("diag", help="inter-class distances and residual intensities per level")
    p.add_argument("--ckpt", required=True)
    _add_config_flags(p)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "diag": cmd_diag}


def _fail(kind: str, message: str, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"{ERROR_PREFIX} {kind}: {text}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "eval" and not args.oracle_gt and not args.ckpt:
            raise ConfigError("eval needs --ckpt unless --oracle-gt is given")
        explicit = args.config or any(getattr(args, f"opt_{k}", None) is not None for k in KEYS)
        run = resolve_config(args) if (explicit or args.command != "infer") else None
        return COMMANDS[args.command](args, run)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except ContractError as exc:
        return _fail("contract", exc, EXIT_CONTRACT)
    except (FormatError, OSError) as exc:
        return _fail("io", exc, EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
