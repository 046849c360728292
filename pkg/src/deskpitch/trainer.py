"""Seeded training loop, selective block freezing, and CPK1 checkpoints."""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tn
from .formats import FormatError, TokenSupervision, _Reader, read_manifest, read_mel, read_sup, \
    sup_path_for
from .model import AcousticModel, ModelConfig, SpeakerTable

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


class Block(str, enum.Enum):
    ENCODER = "encoder"
    DECODER = "decoder"
    PITCH = "pitch"
    DURATION = "duration"
    ENERGY = "energy"

    @property
    def prefix(self) -> str:
        return self.value + "."


FreezeSet = frozenset  # of Block

PREDICTORS = frozenset({Block.PITCH, Block.DURATION, Block.ENERGY})

# the seven fine-tuning setups compared per conditioning configuration
FREEZE_SETUPS: "OrderedDict[str, frozenset]" = OrderedDict([
    ("enc", frozenset({Block.ENCODER})),
    ("dec", frozenset({Block.DECODER})),
    ("predictors", PREDICTORS),
    ("pitch", frozenset({Block.PITCH})),
    ("duration", frozenset({Block.DURATION})),
    ("energy", frozenset({Block.ENERGY})),
    ("enc+dec", frozenset({Block.ENCODER, Block.DECODER})),
])

_ALIASES = {
    "enc": [Block.ENCODER], "encoder": [Block.ENCODER],
    "dec": [Block.DECODER], "decoder": [Block.DECODER],
    "pitch": [Block.PITCH], "dur": [Block.DURATION], "duration": [Block.DURATION],
    "energy": [Block.ENERGY], "predictors": sorted(PREDICTORS),
}


def parse_freeze(text: str | None) -> frozenset:
    """Parse ``enc,dec`` / ``predictors`` / ``duration`` style lists. Empty means nothing frozen."""
    if not text or text.strip() in ("", "none"):
        return frozenset()
    blocks: set[Block] = set()
    for part in text.replace("+", ",").split(","):
        part = part.strip().lower()
        if part not in _ALIASES:
            raise ValueError(f"unknown block {part!r} in freeze list")
        blocks.update(_ALIASES[part])
    return frozenset(blocks)


def freeze_label(fs: Iterable[Block]) -> str:
    fs = frozenset(fs)
    for label, setup in FREEZE_SETUPS.items():
        if setup == fs:
            return label
    if not fs:
        return "none"
    return "+".join(sorted(b.value for b in fs))


def block_of(param_name: str) -> Block | None:
    for b in Block:
        if param_name.startswith(b.prefix):
            return b
    return None


@dataclass
class Partition:
    trainable: list[str]
    frozen: list[str]


def apply_freeze(model: AcousticModel, fs: Iterable[Block]) -> Partition:
    """Split parameter names into trainable and frozen, and mark frozen ones as constants."""
    fs = frozenset(fs)
    part = Partition([], [])
    for name, p in model.params.items():
        if block_of(name) in fs:
            part.frozen.append(name)
            p.requires_grad = False
        else:
            part.trainable.append(name)
            p.requires_grad = True
    return part


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    steps: int = 5000
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', not {self.optimizer!r}")

    def to_items(self) -> list[tuple[str, str]]:
        return [(f.name, str(getattr(self, f.name))) for f in fields(self)]

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in items:
                raw = items[f.name]
                kwargs[f.name] = raw if f.type == "str" else (
                    int(raw) if f.type == "int" else float(raw))
        return cls(**kwargs)


# Full-scale settings: batch 16 / 400k steps for base models, batch 1 / 300
# steps for adaptation, lr 0.1. The base numbers diverge on desk-size models.
FULL_SCALE_BASE = TrainConfig(learning_rate=0.1, batch_size=16, steps=400_000)
FULL_SCALE_FINETUNE = TrainConfig(learning_rate=0.1, batch_size=1, steps=300)
DESK_FINETUNE = TrainConfig(learning_rate=1e-3, batch_size=1, steps=300)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Example:
    tokens: list[int]
    sup: TokenSupervision
    frames: np.ndarray
    speaker: str
    relpath: str = ""


def load_examples(corpus_dir, manifest: str = "train.txt") -> list[Example]:
    from .corpus import token_id

    root = Path(corpus_dir)
    out = []
    for e in read_manifest(root / manifest):
        mel_path = root / e.relpath
        if not mel_path.exists():
            raise FileNotFoundError(f"missing feature file {mel_path}")
        frames = read_mel(mel_path).frames
        sup = read_sup(sup_path_for(mel_path))
        out.append(Example([token_id(t) for t in e.tokens], sup, frames, e.speaker, e.relpath))
    return out


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> list[int]:
    start = step * batch_size
    epoch_cache: dict[int, np.ndarray] = {}
    out = []
    for i in range(start, start + batch_size):
        epoch, pos = divmod(i, n)
        if epoch not in epoch_cache:
            epoch_cache[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(epoch_cache[epoch][pos]))
    return out


def batch_loss(model: AcousticModel, batch: Sequence[Example], backward: bool = True) -> float:
    """Mean over the batch of each utterance's total loss; accumulates gradients if asked."""
    values = []
    for ex in batch:
        bundle = model.forward_train(ex.tokens, ex.sup, ex.frames, ex.speaker)
        values.append(float(bundle.total.data))
        if backward:
            tn.backward(tn.scale(bundle.total, 1.0 / len(batch)))
    return math.fsum(values) / len(values)


def corpus_loss(model: AcousticModel, examples: Sequence[Example]) -> dict[str, float]:
    sums: dict[str, list[float]] = {}
    for ex in examples:
        for k, v in model.forward_train(ex.tokens, ex.sup, ex.frames, ex.speaker).values().items():
            sums.setdefault(k, []).append(v)
    return {k: math.fsum(v) / len(v) for k, v in sums.items()}


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    speakers: SpeakerTable
    optimizer_state: "OrderedDict[str, np.ndarray]"
    step: int
    train_config: TrainConfig | None = None

    @classmethod
    def capture(cls, model: AcousticModel, optimizer_state=None, step: int = 0,
                train_config: TrainConfig | None = None) -> "Checkpoint":
        opt = OrderedDict((k, np.array(v, copy=True)) for k, v in (optimizer_state or {}).items())
        return cls(model.config, model.state_arrays(), model.speakers.copy(),
                   opt, step, train_config)

    def to_model(self) -> AcousticModel:
        model = AcousticModel(self.model_config, self.speakers.copy())
        model.load_arrays(self.params)
        return model

    def digest(self) -> str:
        h = hashlib.sha256(encode_checkpoint(self))
        return h.hexdigest()


@dataclass
class TrainLog:
    losses: list[tuple[int, float]] = field(default_factory=list)
    seconds: float = 0.0
    updated_per_step: int = 0
    trainable: list[str] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)

    def write(self, path) -> None:
        Path(path).write_text("".join(f"{s}\t{l!r}\n" for s, l in self.losses), encoding="utf-8")


class Trainer:
    """Owns the optimiser state and global step for one model instance."""

    def __init__(self, model: AcousticModel, cfg: TrainConfig, freeze: Iterable[Block] = (),
                 optimizer_state=None, step: int = 0):
        self.model = model
        self.cfg = cfg
        self.freeze = frozenset(freeze)
        self.partition = apply_freeze(model, self.freeze)
        self.step = step
        state = OrderedDict(optimizer_state or {})
        self.opt_t = int(state.pop("adam.t", 0))
        # frozen parameters carry no optimiser state
        self.moments: dict[str, list[np.ndarray]] = {}
        if cfg.optimizer == "adam":
            for name in self.partition.trainable:
                shape = model.params[name].shape
                m = state.get("adam.m/" + name)
                v = state.get("adam.v/" + name)
                self.moments[name] = [np.array(m, copy=True) if m is not None else np.zeros(shape),
                                      np.array(v, copy=True) if v is not None else np.zeros(shape)]

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: TrainConfig,
                        freeze: Iterable[Block] = ()) -> "Trainer":
        return cls(ckpt.to_model(), cfg, freeze, ckpt.optimizer_state, ckpt.step)

    def optimizer_state(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        if self.cfg.optimizer == "adam":
            out["adam.t"] = np.asarray(float(self.opt_t))
            for name, (m, v) in self.moments.items():
                out["adam.m/" + name] = m
                out["adam.v/" + name] = v
        return out

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.capture(self.model, self.optimizer_state(), self.step, self.cfg)

    def _update(self) -> None:
        cfg = self.cfg
        self.opt_t += 1
        for name in self.partition.trainable:
            p = self.model.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if cfg.optimizer == "sgd":
                p.data = p.data - cfg.learning_rate * g
                continue
            m, v = self.moments[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** self.opt_t)
            vhat = v / (1 - cfg.beta2 ** self.opt_t)
            p.data = p.data - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)

    def run(self, examples: Sequence[Example], steps: int | None = None) -> TrainLog:
        if not examples:
            raise ValueError("training corpus is empty")
        steps = self.cfg.steps if steps is None else steps
        if steps < 1:
            raise ValueError("steps must be >= 1")
        unknown = sorted({ex.speaker for ex in examples} - set(self.model.speakers.ids))
        if unknown:
            raise KeyError(f"speakers not in the speaker table: {unknown}")
        out = TrainLog(trainable=list(self.partition.trainable),
                       frozen=list(self.partition.frozen),
                       updated_per_step=self.model.n_parameters(self.partition.trainable))
        t0 = time.perf_counter()
        for _ in range(steps):
            idx = batch_indices(self.step, self.cfg.batch_size, len(examples), self.cfg.seed)
            self.model.zero_grad()
            loss = batch_loss(self.model, [examples[i] for i in idx])
            if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {loss!r} at step {self.step}; "
                                       f"lower the learning rate (now {self.cfg.learning_rate})")
            self._update()
            self.step += 1
            out.losses.append((self.step, loss))
            if self.step % 500 == 0:
                log.info("step %d loss %.6f", self.step, loss)
        out.seconds = time.perf_counter() - t0
        self.model.zero_grad()
        return out


def train(model: AcousticModel, examples: Sequence[Example], cfg: TrainConfig,
          freeze: Iterable[Block] = ()) -> tuple[Checkpoint, TrainLog]:
    trainer = Trainer(model, cfg, freeze)
    run_log = trainer.run(examples)
    return trainer.checkpoint(), run_log


def finetune(ckpt: Checkpoint, examples: Sequence[Example], fs: Iterable[Block],
             cfg: TrainConfig = DESK_FINETUNE) -> tuple[Checkpoint, TrainLog]:
    """Resume training from ``ckpt`` on a new corpus with blocks in ``fs`` frozen."""
    trainer = Trainer.from_checkpoint(ckpt, cfg, fs)
    run_log = trainer.run(examples)
    return trainer.checkpoint(), run_log


# ---------------------------------------------------------------------------
# CPK1 serialisation
# ---------------------------------------------------------------------------

def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _read_record(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.string()
    rank = r.u32()
    dims = tuple(r.u32() for _ in range(rank))
    n = int(np.prod(dims)) if dims else 1
    return name, r.f64(n).reshape(dims)


def _config_block(ckpt: Checkpoint) -> str:
    lines = [f"{k}={v}" for k, v in ckpt.model_config.to_items()]
    lines.append(f"config_hash={ckpt.model_config.digest()}")
    lines.append("speaker_ids=" + ",".join(ckpt.speakers.ids))
    if ckpt.train_config is not None:
        lines += [f"train.{k}={v}" for k, v in ckpt.train_config.to_items()]
    return "".join(l + "\n" for l in lines)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = _config_block(ckpt).encode("utf-8")
    out = [b"CPK1", struct.pack("<I", len(cfg)), cfg]
    params = list(ckpt.params.items()) + [("speaker_table", ckpt.speakers.embeddings)]
    out.append(struct.pack("<I", len(params)))
    out += [_record(k, v) for k, v in params]
    out.append(struct.pack("<I", len(ckpt.optimizer_state)))
    out += [_record(k, v) for k, v in ckpt.optimizer_state.items()]
    out.append(struct.pack("<Q", ckpt.step))
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def decode_checkpoint(buf: bytes, what: str = "checkpoint",
                      expect: ModelConfig | None = None) -> Checkpoint:
    r = _Reader(buf, what)
    r.magic(b"CPK1")
    text = r.take(r.u32()).decode("utf-8")
    items: dict[str, str] = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{what}: malformed config line {line!r}")
        items[key] = value
    model_cfg = ModelConfig.from_items(items)
    if items.get("config_hash") != model_cfg.digest():
        raise FormatError(f"{what}: config hash does not match its config block")
    if expect is not None and expect.digest() != model_cfg.digest():
        raise ValueError(f"{what}: checkpoint config differs from the expected model config")
    train_items = {k[6:]: v for k, v in items.items() if k.startswith("train.")}
    train_cfg = TrainConfig.from_items(train_items) if train_items else None
    ids = [s for s in items.get("speaker_ids", "").split(",") if s]

    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(r.u32()):
        k, v = _read_record(r)
        params[k] = v
    table = params.pop("speaker_table", None)
    if table is None:
        raise FormatError(f"{what}: no speaker table")
    opt: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(r.u32()):
        k, v = _read_record(r)
        opt[k] = v
    step = r.u64()
    r.done()
    speakers = SpeakerTable(ids, table.reshape(len(ids), model_cfg.d_spk))
    return Checkpoint(model_cfg, params, speakers, opt, step, train_cfg)


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes(), str(path), expect)
    # validates parameter names and shapes against the config
    ckpt.to_model()
    return ckpt
