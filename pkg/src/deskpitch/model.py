"""FastPitch-style acoustic model with a selectable speaker-conditioning point.

Pipeline: token embedding -> encoder FFTr stack -> hidden sequence ``h``;
pitch, duration and energy predictors read ``h``; pitch and energy are
projected to ``d_model`` and summed into ``h``; the length regulator repeats
each row by its duration; the decoder FFTr stack maps frames to mel channels.

The projected speaker embedding is added to the input of exactly one block:
the encoder, all three predictors, or the decoder. Every speaker, pitch and
energy projection is bias-free, so a zero embedding leaves the signal path
untouched bit for bit.
"""

from __future__ import annotations

import enum
import functools
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tn
from .formats import MelFeature, TokenSupervision
from .tensor import Tensor

PREDICTOR_HEADS = ("pitch", "duration", "energy")


class EmptySynthesis(ValueError):
    """Every predicted duration rounded to zero, so there are no frames to decode."""


class ConditioningPoint(str, enum.Enum):
    ENCODER = "encoder"
    PREDICTORS = "predictors"
    DECODER = "decoder"

    @classmethod
    def parse(cls, value) -> "ConditioningPoint":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown conditioning point {value!r}; "
                             f"choose from {[c.value for c in cls]}") from None


@dataclass
class ModelConfig:
    vocab_size: int = 12
    d_model: int = 32
    n_heads: int = 2
    n_enc_layers: int = 1
    n_dec_layers: int = 1
    ffn_kernel: int = 3
    ffn_hidden: int = 64
    predictor_kernel: int = 3
    predictor_hidden: int = 32
    n_mels: int = 8
    d_spk: int = 192
    conditioning: ConditioningPoint = ConditioningPoint.PREDICTORS
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.conditioning = ConditioningPoint.parse(self.conditioning)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers",
                     "ffn_hidden", "predictor_hidden", "n_mels", "d_spk"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("ffn_kernel", "predictor_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"{name} must be odd")
        if len(self.loss_weights) != 4 or min(self.loss_weights) < 0:
            raise ValueError("loss_weights must be four non-negative numbers")

    def to_items(self) -> list[tuple[str, str]]:
        items = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "conditioning":
                v = v.value
            elif f.name == "loss_weights":
                v = ",".join(repr(w) for w in v)
            items.append((f.name, str(v)))
        return items

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name == "conditioning":
                kwargs[f.name] = ConditioningPoint.parse(raw)
            elif f.name == "loss_weights":
                kwargs[f.name] = tuple(float(x) for x in raw.split(","))
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)

    def digest(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in self.to_items())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def gradcheck_config(conditioning="predictors", seed: int = 0) -> ModelConfig:
    """The smallest useful model: every element gets a finite-difference probe in well under a minute."""
    return ModelConfig(vocab_size=6, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                       ffn_hidden=8, predictor_hidden=4, n_mels=8, d_spk=8,
                       conditioning=conditioning, seed=seed)


@dataclass
class LossBundle:
    mel: Tensor
    pitch: Tensor
    dur: Tensor
    energy: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("mel", "pitch", "dur", "energy", "total")}


@dataclass
class InferenceTrace:
    """Everything :meth:`AcousticModel.infer` computes on the way to the mel."""

    hidden: np.ndarray
    pitch: np.ndarray
    duration: np.ndarray
    energy: np.ndarray
    durations: np.ndarray
    mel: MelFeature


class SpeakerTable:
    """Externally initialised speaker embeddings. Never trained.

    Rows can be appended for new speakers; existing rows are never rewritten.
    """

    def __init__(self, ids: list[str], embeddings: np.ndarray):
        embeddings = np.array(embeddings, dtype=np.float64, copy=True)
        if embeddings.ndim != 2 or embeddings.shape[0] != len(ids):
            raise ValueError("speaker table needs one row per id")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate speaker id in table")
        embeddings.setflags(write=False)
        self._ids = list(ids)
        self._emb = embeddings

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def embeddings(self) -> np.ndarray:
        return self._emb

    @property
    def frozen(self) -> bool:
        return True

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, speaker_id: str) -> bool:
        return speaker_id in self._ids

    def index(self, speaker_id: str) -> int:
        try:
            return self._ids.index(speaker_id)
        except ValueError:
            raise KeyError(f"unknown speaker {speaker_id!r}") from None

    def row(self, speaker_id: str) -> np.ndarray:
        return self._emb[self.index(speaker_id)]

    def copy(self) -> "SpeakerTable":
        return SpeakerTable(self._ids, self._emb)

    def append(self, speaker_id: str, embedding: np.ndarray) -> int:
        if speaker_id in self._ids:
            raise ValueError(f"speaker {speaker_id!r} already registered")
        embedding = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
        if self._emb.shape[0] and embedding.shape[1] != self._emb.shape[1]:
            raise ValueError("embedding width does not match the table")
        grown = np.concatenate([self._emb.reshape(-1, embedding.shape[1]), embedding], axis=0)
        grown.setflags(write=False)
        self._ids.append(speaker_id)
        self._emb = grown
        return len(self._ids) - 1


# ---------------------------------------------------------------------------
# stateless building blocks
# ---------------------------------------------------------------------------

def inject_conditioning(x: Tensor, e, proj: Tensor) -> Tensor:
    """Add ``e @ proj`` (no bias) to every row of ``x``."""
    e_row = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=np.float64).reshape(1, -1)
    if e_row.shape[1] != proj.shape[0] or proj.shape[1] != x.shape[1]:
        raise ValueError(f"conditioning shape mismatch: x {x.dims}, e {e_row.shape}, "
                         f"proj {proj.dims}")
    return x + tn.matmul(Tensor(e_row), proj)


def length_regulate(x: Tensor, durations) -> Tensor:
    """Repeat row ``t`` of ``x`` ``durations[t]`` times, keeping order."""
    durations = np.asarray(durations, dtype=np.int64)
    if durations.ndim != 1 or len(durations) != x.shape[0]:
        raise ValueError("need one duration per input row")
    if (durations < 0).any():
        raise ValueError("durations must be non-negative")
    index = np.repeat(np.arange(len(durations)), durations)
    return tn.gather_rows(x, index)


@functools.lru_cache(maxsize=64)
def positional_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table


def round_durations(pred: np.ndarray) -> np.ndarray:
    return np.floor(np.maximum(0.0, pred) + 0.5).astype(np.int64)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class AcousticModel:
    def __init__(self, config: ModelConfig, speakers: SpeakerTable | None = None):
        self.config = config
        if speakers is None:
            speakers = SpeakerTable([], np.zeros((0, config.d_spk)))
        if len(speakers) and speakers.embeddings.shape[1] != config.d_spk:
            raise ValueError("speaker table width differs from d_spk")
        self.speakers = speakers
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._init_params(np.random.default_rng(config.seed))

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def _dense(self, rng, name, n_in, n_out):
        self._add(name, rng.standard_normal((n_in, n_out)) / np.sqrt(n_in))

    def _norm(self, name, d):
        self._add(name + ".g", np.ones(d))
        self._add(name + ".b", np.zeros(d))

    def _conv(self, rng, name, k, c_in, c_out):
        self._add(name + ".w", rng.standard_normal((k, c_in, c_out)) / np.sqrt(k * c_in))
        self._add(name + ".b", np.zeros(c_out))

    def _fftr_layer(self, rng, prefix):
        c = self.config
        d = c.d_model
        self._norm(prefix + ".ln1", d)
        for w in ("wq", "wk", "wv", "wo"):
            self._dense(rng, f"{prefix}.{w}", d, d)
        self._norm(prefix + ".ln2", d)
        self._conv(rng, prefix + ".conv1", c.ffn_kernel, d, c.ffn_hidden)
        self._conv(rng, prefix + ".conv2", c.ffn_kernel, c.ffn_hidden, d)

    def _init_params(self, rng) -> None:
        c = self.config
        d = c.d_model
        self._add("tok_emb", rng.standard_normal((c.vocab_size, d)) * 0.3)
        for i in range(c.n_enc_layers):
            self._fftr_layer(rng, f"encoder.layer{i}")
        self._norm("encoder.ln_f", d)
        if c.conditioning is ConditioningPoint.ENCODER:
            self._dense(rng, "encoder.spk_proj", c.d_spk, d)
        for head in PREDICTOR_HEADS:
            ph = c.predictor_hidden
            self._conv(rng, head + ".conv1", c.predictor_kernel, d, ph)
            self._norm(head + ".ln1", ph)
            self._conv(rng, head + ".conv2", c.predictor_kernel, ph, ph)
            self._norm(head + ".ln2", ph)
            self._dense(rng, head + ".out.w", ph, 1)
            self._add(head + ".out.b", np.zeros(1))
            if c.conditioning is ConditioningPoint.PREDICTORS:
                self._dense(rng, head + ".spk_proj", c.d_spk, d)
        self._add("pitch_proj", rng.standard_normal((1, d)) * 0.3)
        self._add("energy_proj", rng.standard_normal((1, d)) * 0.3)
        for i in range(c.n_dec_layers):
            self._fftr_layer(rng, f"decoder.layer{i}")
        self._norm("decoder.ln_f", d)
        if c.conditioning is ConditioningPoint.DECODER:
            self._dense(rng, "decoder.spk_proj", c.d_spk, d)
        self._dense(rng, "decoder.out.w", d, c.n_mels)
        self._add("decoder.out.b", np.zeros(c.n_mels))

    def n_parameters(self, names=None) -> int:
        names = self.params.keys() if names is None else names
        return sum(self.params[n].data.size for n in names)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {a.shape} != {p.shape}")
            p.data = a.copy()
            p.grad = None

    # -- blocks ---------------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return tn.layer_norm(x, self._p(name + ".g"), self._p(name + ".b"), eps=1e-5)

    def _conv1d(self, x: Tensor, name: str) -> Tensor:
        return tn.conv1d_same(x, self._p(name + ".w"), self._p(name + ".b"))

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        H = self.config.n_heads
        dk = self.config.d_model // H
        q = tn.matmul(x, self._p(prefix + ".wq"))
        k = tn.matmul(x, self._p(prefix + ".wk"))
        v = tn.matmul(x, self._p(prefix + ".wv"))
        heads = []
        for h in range(H):
            lo, hi = h * dk, (h + 1) * dk
            qh, kh, vh = (tn.slice_cols(t, lo, hi) if H > 1 else t for t in (q, k, v))
            scores = tn.scale(tn.matmul(qh, tn.transpose(kh)), 1.0 / np.sqrt(dk))
            heads.append(tn.matmul(tn.softmax_rows(scores), vh))
        mixed = tn.concat_cols(heads) if H > 1 else heads[0]
        return tn.matmul(mixed, self._p(prefix + ".wo"))

    def _fftr(self, x: Tensor, prefix: str, n_layers: int) -> Tensor:
        # pre-norm: x + attn(ln(x)), then x + ffn(ln(x))
        for i in range(n_layers):
            lp = f"{prefix}.layer{i}"
            x = x + self._attention(self._ln(x, lp + ".ln1"), lp)
            y = tn.relu(self._conv1d(self._ln(x, lp + ".ln2"), lp + ".conv1"))
            x = x + self._conv1d(y, lp + ".conv2")
        return self._ln(x, prefix + ".ln_f")

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(list(tokens), dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("need a non-empty token sequence")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        return ids

    def encode(self, tokens, e=None) -> Tensor:
        """Hidden sequence ``h`` with one row per token.

        ``e`` is only used when the model is encoder-conditioned.
        """
        ids = self._check_tokens(tokens)
        x = tn.embedding_lookup(self._p("tok_emb"), ids)
        x = x + Tensor(positional_encoding(len(ids), self.config.d_model))
        if e is not None and self.config.conditioning is ConditioningPoint.ENCODER:
            x = inject_conditioning(x, e, self._p("encoder.spk_proj"))
        return self._fftr(x, "encoder", self.config.n_enc_layers)

    def predict(self, head: str, h: Tensor, e=None) -> Tensor:
        """Per-token scalar for ``head`` (pitch, duration or energy), as ``[T, 1]``."""
        if head not in PREDICTOR_HEADS:
            raise ValueError(f"unknown predictor {head!r}")
        x = h
        if e is not None and self.config.conditioning is ConditioningPoint.PREDICTORS:
            x = inject_conditioning(x, e, self._p(head + ".spk_proj"))
        x = self._ln(tn.relu(self._conv1d(x, head + ".conv1")), head + ".ln1")
        x = self._ln(tn.relu(self._conv1d(x, head + ".conv2")), head + ".ln2")
        return tn.matmul(x, self._p(head + ".out.w")) + self._p(head + ".out.b")

    def add_prosody(self, h: Tensor, pitch, energy) -> Tensor:
        pitch = pitch if isinstance(pitch, Tensor) else Tensor(np.reshape(pitch, (-1, 1)))
        energy = energy if isinstance(energy, Tensor) else Tensor(np.reshape(energy, (-1, 1)))
        return (h + tn.matmul(pitch, self._p("pitch_proj"))
                + tn.matmul(energy, self._p("energy_proj")))

    def decode(self, u: Tensor, e=None) -> Tensor:
        if u.shape[0] == 0:
            raise ValueError("decoder input has no frames")
        x = u + Tensor(positional_encoding(u.shape[0], self.config.d_model))
        if e is not None and self.config.conditioning is ConditioningPoint.DECODER:
            x = inject_conditioning(x, e, self._p("decoder.spk_proj"))
        x = self._fftr(x, "decoder", self.config.n_dec_layers)
        return tn.matmul(x, self._p("decoder.out.w")) + self._p("decoder.out.b")

    # -- speaker lookup -------------------------------------------------------

    def embedding_for(self, speaker) -> np.ndarray | None:
        """Resolve a speaker id, row index or raw vector to a frozen embedding."""
        if speaker is None:
            return None
        if isinstance(speaker, str):
            return self.speakers.row(speaker)
        if isinstance(speaker, (int, np.integer)):
            return self.speakers.embeddings[int(speaker)]
        e = np.asarray(speaker, dtype=np.float64).reshape(-1)
        if e.size != self.config.d_spk:
            raise ValueError(f"embedding has {e.size} values, expected {self.config.d_spk}")
        return e

    # -- training / inference ---------------------------------------------------

    def forward_train(self, tokens, sup: TokenSupervision, mel_gt, speaker) -> LossBundle:
        frames = mel_gt.frames if isinstance(mel_gt, MelFeature) else np.asarray(mel_gt)
        if int(sup.durations.sum()) != frames.shape[0]:
            raise ValueError(f"durations sum to {int(sup.durations.sum())} "
                             f"but the mel has {frames.shape[0]} frames")
        if len(sup.durations) != len(tokens):
            raise ValueError("supervision length differs from token count")
        e = self.embedding_for(speaker)
        h = self.encode(tokens, e)
        pitch_hat = self.predict("pitch", h, e)
        dur_hat = self.predict("duration", h, e)
        energy_hat = self.predict("energy", h, e)
        # teacher forcing: ground-truth prosody and durations drive upsampling
        hp = self.add_prosody(h, sup.pitch, sup.energy)
        mel_hat = self.decode(length_regulate(hp, sup.durations), e)

        w_mel, w_pitch, w_dur, w_energy = self.config.loss_weights
        l_mel = tn.mse(mel_hat, frames)
        l_pitch = tn.mse(pitch_hat, sup.pitch.reshape(-1, 1))
        l_dur = tn.mse(dur_hat, sup.durations.astype(np.float64).reshape(-1, 1))
        l_energy = tn.mse(energy_hat, sup.energy.reshape(-1, 1))
        total = (tn.scale(l_mel, w_mel) + tn.scale(l_pitch, w_pitch)
                 + tn.scale(l_dur, w_dur) + tn.scale(l_energy, w_energy))
        return LossBundle(l_mel, l_pitch, l_dur, l_energy, total)

    def infer_trace(self, tokens, speaker=None) -> InferenceTrace:
        """Inference keeping the intermediate tracks.

        ``speaker=None`` disables injection entirely, which is the reference
        the zero-embedding path must reproduce.
        """
        e = self.embedding_for(speaker)
        h = self.encode(tokens, e)
        pitch = self.predict("pitch", h, e).data[:, 0]
        dur = self.predict("duration", h, e).data[:, 0]
        energy = self.predict("energy", h, e).data[:, 0]
        durations = round_durations(dur)
        if durations.sum() == 0:
            raise EmptySynthesis("every predicted duration rounds to zero; nothing to synthesize")
        hp = self.add_prosody(h, pitch, energy)
        mel = self.decode(length_regulate(hp, durations), e)
        return InferenceTrace(h.data, pitch, dur, energy, durations, MelFeature(mel.data))

    def infer(self, tokens, speaker) -> MelFeature:
        return self.infer_trace(tokens, speaker).mel

    def synthesize_anonymous(self, tokens) -> MelFeature:
        """Speak with the speaker embedding multiplied by zero."""
        return self.infer(tokens, np.zeros(self.config.d_spk))

    def config_hash(self) -> str:
        return self.config.digest()
