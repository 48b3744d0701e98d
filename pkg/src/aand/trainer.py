"""Two-stage training: anomaly amplification, then normality distillation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from . import losses
from .corpus import derive_seed
from .datasynth import make_sample
from .raa import RAA, to_rows
from .student import Student
from .teacher import EncoderWeights, encode, hash_arrays, level_masks
from .tensorio import (FORMAT_VERSION, FormatError, array_to_int, array_to_text, int_to_array,
                       load_checkpoint_file, save_checkpoint_file, text_to_array)

logger = logging.getLogger(__name__)

LOSS_CSV_HEADER = ("epoch", "stage", "loss_total", "loss_focal", "loss_A", "loss_KD", "loss_HKD")
# fields that may change between a run and its resumption
_UNHASHED = {"stage1_epochs", "stage2_epochs"}


class ContractError(RuntimeError):
    """A training precondition (data contract, checkpoint compatibility) was violated."""


@dataclass
class TrainConfig:
    image_size: int = 64
    in_channels: int = 1
    channels: tuple[int, ...] = (16, 32, 64)
    n_memory: int = 50
    stage1_epochs: int = 20
    stage2_epochs: int = 24
    batch_size: int = 8
    lr: float = 0.005
    alpha: float = 0.3
    k_hard: int = 10
    gamma: float = 2.0
    level_reduction: str = "sum"
    use_raa: bool = True
    use_hkd: bool = True
    zero_init_residual: bool = True
    pos_scale: float = 0.1
    synth_repeats: int = 1
    perlin_periods: tuple[int, ...] = (8, 16)
    smoothing: bool = False
    seed: int = 0
    # the frozen teacher stands in for fixed pre-trained weights, so it does not follow the training seed
    teacher_seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.perlin_periods = tuple(int(p) for p in self.perlin_periods)
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.image_size % 2 ** len(self.channels):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{len(self.channels)}")
        self.loss_config()

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(image_size=256, in_channels=3, stage1_epochs=100, stage2_epochs=120, batch_size=16,
                    smoothing=True)
        base.update(overrides)
        return cls(**base)

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(alpha=self.alpha, k_hard=self.k_hard, gamma=self.gamma,
                                 level_reduction=self.level_reduction)

    def config_hash(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class AANDModel:
    """Frozen teacher, RAA module and student, with named parameter access."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.teacher = EncoderWeights(cfg.in_channels, cfg.channels, seed=cfg.teacher_seed)
        self.raa = RAA(cfg.channels, cfg.image_size, cfg.n_memory, seed=derive_seed(cfg.seed, 2),
                       zero_init_residual=cfg.zero_init_residual, pos_scale=cfg.pos_scale)
        self.student = Student(cfg.channels, seed=derive_seed(cfg.seed, 3))

    def raa_params(self) -> dict[str, gc.Tensor]:
        return self.raa.named_params()

    def student_params(self) -> dict[str, gc.Tensor]:
        return self.student.named_params()

    def group_digests(self) -> dict[str, str]:
        return {
            "teacher": self.teacher.digest(),
            "raa": hash_arrays({k: v.data for k, v in self.raa_params().items()}),
            "student": hash_arrays({k: v.data for k, v in self.student_params().items()}),
        }

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.teacher.arrays)
        out.update({k: v.data for k, v in self.raa_params().items()})
        out.update({k: v.data for k, v in self.student_params().items()})
        return out

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        teacher = {k: v for k, v in arrays.items() if k.startswith("teacher/")}
        if teacher:
            self.teacher = EncoderWeights(self.cfg.in_channels, self.cfg.channels, arrays=teacher)
        for group in (self.raa_params(), self.student_params()):
            for name, p in group.items():
                if name not in arrays:
                    raise FormatError(f"checkpoint is missing parameter {name!r}")
                if arrays[name].shape != p.shape:
                    raise FormatError(f"parameter {name!r}: checkpoint shape {arrays[name].shape}, model {p.shape}")
                p.data = np.array(arrays[name], dtype=np.float32)

    # inference ---------------------------------------------------------------

    def teacher_features(self, images: np.ndarray) -> list[np.ndarray]:
        return encode(images, self.teacher)

    def advanced_features(self, images: np.ndarray | None = None,
                          teacher: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
        if teacher is None:
            teacher = self.teacher_features(images)
        if not self.cfg.use_raa:
            return list(teacher)
        return self.raa.advance(teacher)

    def student_features(self, advanced: Sequence[np.ndarray]) -> list[np.ndarray]:
        return self.student.predict(advanced)


@dataclass
class EpochLog:
    epoch: int
    stage: int
    total: float
    focal: float = 0.0
    amplification: float = 0.0
    kd: float = 0.0
    hkd: float = 0.0

    def row(self) -> tuple:
        return (self.epoch, self.stage, f"{self.total:.8g}", f"{self.focal:.8g}", f"{self.amplification:.8g}",
                f"{self.kd:.8g}", f"{self.hkd:.8g}")


@dataclass
class TrainState:
    """What a checkpoint captures beyond the parameters."""
    stage: int = 0
    epoch: int = 0
    optimizer: gc.Adam | None = None
    history: list[EpochLog] = field(default_factory=list)


def epoch_permutation(seed: int, stage: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 17, stage, epoch]).permutation(n)


def synthesize_training_anomalies(normals: np.ndarray, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """``synth_repeats`` corrupted copies of every normal image, seeded per (repeat, index)."""
    images, masks = [], []
    for r in range(cfg.synth_repeats):
        for i, img in enumerate(normals):
            s = make_sample(np.asarray(img, np.float32), derive_seed(cfg.seed, 5, r, i), cfg.perlin_periods)
            images.append(s.corrupted)
            masks.append(s.mask)
    return np.stack(images), np.stack(masks)


def _stage1_batch_loss(model: AANDModel, feats: list[np.ndarray], masks: list[np.ndarray],
                       lcfg: losses.LossConfig) -> tuple[gc.Tensor, float, float]:
    outs = model.raa.forward(feats, "train", masks)
    focal_terms, amp_terms = [], []
    for k, (out, mk) in enumerate(zip(outs, masks)):
        focal_terms.append(losses.focal_loss(out.gate, mk.reshape(-1), lcfg.gamma))
        n, c, h, w = out.shape
        per_image = []
        teacher_rows = out.teacher.data
        for i in range(n):
            bits = mk[i].reshape(-1).astype(bool)
            if bits.all() or not bits.any():
                continue
            base = i * h * w
            ai = base + np.flatnonzero(bits)
            ni = base + np.flatnonzero(~bits)
            ref = losses.margin_matrix(teacher_rows[ai], teacher_rows[ni], lcfg.alpha, level=k)
            per_image.append(losses.anomaly_amplification_loss(gc.take(out.advanced, ai), teacher_rows[ni], ref))
        if per_image:
            amp_terms.append(gc.mul(losses.reduce_levels(per_image), 1.0 / len(per_image)))
        else:
            logger.warning("level %d: batch has no image with both normal and anomalous patches; "
                           "skipping the amplification loss", k)
    return losses.stage1_loss(focal_terms, amp_terms, lcfg)


def train_stage1(model: AANDModel, images: np.ndarray, masks: np.ndarray, epochs: int | None = None,
                 state: TrainState | None = None,
                 on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Optimize only the RAA parameters on corrupted images and their pixel masks."""
    cfg = model.cfg
    epochs = cfg.stage1_epochs if epochs is None else epochs
    if len(images) == 0:
        raise ContractError("stage 1 needs a non-empty synthetic corpus")
    if len(images) != len(masks):
        raise ContractError(f"{len(images)} images but {len(masks)} masks")
    teacher_digest = model.teacher.digest()
    if state is None or state.stage != 1:
        state = TrainState(stage=1, epoch=0, optimizer=gc.Adam(model.raa_params(), lr=cfg.lr))
    feats = model.teacher_features(images)
    lmasks = level_masks(np.asarray(masks), len(cfg.channels))
    lcfg = cfg.loss_config()
    opt = state.optimizer
    for epoch in range(state.epoch + 1, epochs + 1):
        perm = epoch_permutation(cfg.seed, 1, epoch, len(images))
        totals = np.zeros(3)
        batches = 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            loss, focal, amp = _stage1_batch_loss(model, [f[idx] for f in feats], [m[idx] for m in lmasks], lcfg)
            loss.backward()
            opt.step()
            totals += (float(loss.data), focal, amp)
            batches += 1
        totals /= batches
        state.epoch = epoch
        state.history.append(EpochLog(epoch, 1, totals[0], focal=totals[1], amplification=totals[2]))
        logger.info("stage 1 epoch %d: loss %.5f", epoch, totals[0])
        if on_epoch is not None:
            on_epoch(state)
    if model.teacher.digest() != teacher_digest:
        raise ContractError("teacher weights changed during stage 1")
    return state


def train_stage2(model: AANDModel, images: np.ndarray, labels: np.ndarray | None = None,
                 epochs: int | None = None, state: TrainState | None = None,
                 on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Optimize bottleneck + student decoder on normal images only."""
    cfg = model.cfg
    epochs = cfg.stage2_epochs if epochs is None else epochs
    if len(images) == 0:
        raise ContractError("stage 2 needs a non-empty normal corpus")
    if labels is not None and np.any(np.asarray(labels) != 0):
        raise ContractError("stage 2 corpus contains anomalous images; only normal samples are allowed")
    frozen = {k: v for k, v in model.group_digests().items() if k != "student"}
    if state is None or state.stage != 2:
        state = TrainState(stage=2, epoch=0, optimizer=gc.Adam(model.student_params(), lr=cfg.lr))
    targets = model.advanced_features(images)
    lcfg = cfg.loss_config()
    opt = state.optimizer
    for epoch in range(state.epoch + 1, epochs + 1):
        perm = epoch_permutation(cfg.seed, 2, epoch, len(images))
        totals = np.zeros(3)
        batches = 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = [t[idx] for t in targets]
            opt.zero_grad()
            loss, kd, hkd = losses.stage2_loss(batch, model.student(batch), lcfg, use_hkd=cfg.use_hkd)
            loss.backward()
            opt.step()
            totals += (float(loss.data), kd, hkd)
            batches += 1
        totals /= batches
        state.epoch = epoch
        state.history.append(EpochLog(epoch, 2, totals[0], kd=totals[1], hkd=totals[2]))
        logger.info("stage 2 epoch %d: loss %.5f", epoch, totals[0])
        if on_epoch is not None:
            on_epoch(state)
    now = {k: v for k, v in model.group_digests().items() if k != "student"}
    if now != frozen:
        raise ContractError(f"frozen parameters changed during stage 2: {sorted(k for k in now if now[k] != frozen[k])}")
    return state


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def checkpoint_arrays(model: AANDModel, state: TrainState | None = None,
                      extra: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    out = {
        "meta/format": int_to_array(FORMAT_VERSION),
        "meta/config_hash": text_to_array(model.cfg.config_hash()),
        "meta/config": text_to_array(model.cfg.to_json()),
        "meta/seed": int_to_array(model.cfg.seed),
        "meta/stage": int_to_array(state.stage if state else 0),
        "meta/epoch": int_to_array(state.epoch if state else 0),
    }
    out.update(model.param_arrays())
    if state is not None and state.optimizer is not None:
        out.update(state.optimizer.state_arrays())
    for name, arr in (extra or {}).items():
        out[f"extra/{name}"] = np.asarray(arr, dtype=np.float32)
    return out


def save_checkpoint(path, model: AANDModel, state: TrainState | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    save_checkpoint_file(path, checkpoint_arrays(model, state, extra))


def checkpoint_extras(path) -> dict[str, np.ndarray]:
    """Auxiliary arrays (e.g. a decision threshold) stored beside the parameters."""
    return {k[len("extra/"):]: v for k, v in load_checkpoint_file(path).items() if k.startswith("extra/")}


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[AANDModel, TrainState]:
    """Rebuild model and training state; refuses a checkpoint from another configuration.

    Without ``cfg`` the configuration stored in the checkpoint is used.
    """
    arrays = load_checkpoint_file(path)
    try:
        if cfg is None:
            cfg = TrainConfig.from_json(array_to_text(arrays["meta/config"]))
        version = array_to_int(arrays["meta/format"])
        stored_hash = array_to_text(arrays["meta/config_hash"])
        stage = array_to_int(arrays["meta/stage"])
        epoch = array_to_int(arrays["meta/epoch"])
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint lacks metadata {exc}") from None
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: checkpoint format {version}, expected {FORMAT_VERSION}")
    if stored_hash != cfg.config_hash():
        raise ContractError(f"{path}: config hash {stored_hash[:12]} does not match current {cfg.config_hash()[:12]}")
    model = AANDModel(cfg)
    model.load_param_arrays(arrays)
    state = TrainState(stage=stage, epoch=epoch)
    if "adam/step" in arrays and stage in (1, 2):
        params = model.raa_params() if stage == 1 else model.student_params()
        opt = gc.Adam(params, lr=cfg.lr)
        opt.load_state_arrays(arrays)
        state.optimizer = opt
    return model, state


def loss_csv(history: Sequence[EpochLog], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(LOSS_CSV_HEADER)
    for log in history:
        writer.writerow(log.row())
    return buf.getvalue()


def append_loss_csv(path, logs: Sequence[EpochLog]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        fh.write(loss_csv(logs, header=new))
