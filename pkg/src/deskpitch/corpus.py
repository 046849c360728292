"""Seeded synthetic speech corpus with oracle recogniser and speaker embedder.

Each phoneme token owns a prototype feature vector and a fixed duration.
A speaker is an additive offset in feature space plus a base pitch tied to
that offset, so an utterance is ``prototype[token] + offset + noise``
repeated over the token's frames. Because the generative tables all derive
from the seed, the oracles can be rebuilt from ``corpus.cfg`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .formats import (ManifestEntry, MelFeature, TokenSupervision, read_mel, write_manifest,
                      write_mel, write_speakers, write_sup)

MAX_REJECTIONS = 1000
EMBEDDER_SEED = 1234


@dataclass
class CorpusSpec:
    n_phonemes: int = 12
    n_mels: int = 8
    n_speakers: int = 3
    utts_per_speaker: int = 20
    min_len: int = 4
    max_len: int = 10
    speaker_offset_scale: float = 0.6
    noise_scale: float = 0.02
    seed: int = 0
    d_spk: int = 192
    prototype_scale: float = 1.0
    n_heldout: int = 1
    heldout_utts: int = 8

    def __post_init__(self):
        if self.speaker_offset_scale < 0 or self.noise_scale < 0:
            raise ValueError("noise and offset scales must be non-negative")
        if self.n_phonemes < 2:
            raise ValueError("need at least two phonemes")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.n_speakers < 1 or self.utts_per_speaker < 1:
            raise ValueError("need at least one speaker and one utterance")

    @property
    def separation(self) -> float:
        """Minimum pairwise prototype distance the generator enforces."""
        return 4 * self.speaker_offset_scale + 6 * self.noise_scale

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "CorpusSpec":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown corpus key {key!r}")
            kwargs[key] = float(raw) if types[key] == "float" else int(raw)
        return cls(**kwargs)


@dataclass
class SpeakerProfile:
    id: str
    offset: np.ndarray
    base_pitch: float


def token_name(i: int) -> str:
    return f"p{i}"


def token_id(name: str) -> int:
    if not name.startswith("p") or not name[1:].isdigit():
        raise ValueError(f"not a phoneme token: {name!r}")
    return int(name[1:])


class ToyEmbedder:
    """Time-mean of frames through a fixed random projection, L2-normalised."""

    def __init__(self, n_mels: int, d_spk: int, seed: int = EMBEDDER_SEED):
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((n_mels, d_spk)) / np.sqrt(d_spk)

    def __call__(self, frames) -> np.ndarray:
        frames = frames.frames if isinstance(frames, MelFeature) else np.asarray(frames)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ValueError("cannot embed an empty feature sequence")
        v = frames.mean(axis=0) @ self.projection
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ValueError("embedding has zero norm")
        return v / norm


@dataclass
class Recognition:
    tokens: list[int]
    durations: np.ndarray
    offset: np.ndarray


class CorpusOracle:
    """The generative tables of a corpus, shared by generator and oracles."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        self.prototypes = self._draw_prototypes(rng)
        self.durations = rng.integers(1, 5, size=spec.n_phonemes)
        self.jitter = rng.uniform(-0.3, 0.3, size=spec.n_phonemes)
        axis = rng.standard_normal(spec.n_mels)
        self.pitch_axis = axis / np.linalg.norm(axis)
        self.embedder = ToyEmbedder(spec.n_mels, spec.d_spk)

    def _draw_prototypes(self, rng) -> np.ndarray:
        s = self.spec
        for _ in range(MAX_REJECTIONS):
            p = rng.standard_normal((s.n_phonemes, s.n_mels)) * s.prototype_scale
            p -= p.mean(axis=0)
            if min_pairwise_distance(p) > s.separation:
                return p
        raise ValueError(f"could not draw prototypes separated by > {s.separation:.3f} "
                         f"after {MAX_REJECTIONS} attempts")

    def speaker(self, index: int, heldout: bool = False) -> SpeakerProfile:
        s = self.spec
        rng = np.random.default_rng([s.seed, 1 if not heldout else 2, index])
        offset = rng.standard_normal(s.n_mels) * s.speaker_offset_scale
        bound = s.speaker_offset_scale * np.sqrt(s.n_mels)
        norm = np.linalg.norm(offset)
        if norm > bound:
            offset *= bound / norm
        sid = f"new{index:02d}" if heldout else f"spk{index:02d}"
        return SpeakerProfile(sid, offset, self.base_pitch(offset))

    def base_pitch(self, offset: np.ndarray) -> float:
        return float(offset @ self.pitch_axis)

    def utterance(self, profile: SpeakerProfile, rng) -> tuple[list[int], np.ndarray,
                                                                TokenSupervision]:
        s = self.spec
        n = int(rng.integers(s.min_len, s.max_len + 1))
        tokens = [int(rng.integers(s.n_phonemes))]
        while len(tokens) < n:
            # no immediate repeats, so collapsing recognised frames is lossless
            t = int(rng.integers(s.n_phonemes - 1))
            tokens.append(t if t < tokens[-1] else t + 1)
        durs = self.durations[tokens]
        clean = np.repeat(self.prototypes[tokens], durs, axis=0) + profile.offset
        frames = clean + rng.standard_normal(clean.shape) * s.noise_scale
        pitch = profile.base_pitch + self.jitter[tokens]
        energy = token_energy(frames, durs)
        return tokens, frames, TokenSupervision(durs, pitch, energy)

    def recognise(self, mel, max_iter: int = 10) -> Recognition:
        """Oracle ASR: label frames by nearest prototype after removing the speaker offset.

        The offset starts at the frame mean and is re-estimated from the
        residuals of the current labelling until labels stop changing.
        """
        frames = mel.frames if isinstance(mel, MelFeature) else np.asarray(mel)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ValueError("cannot recognise an empty feature sequence")
        offset = frames.mean(axis=0) - self.prototypes.mean(axis=0)
        labels = None
        for _ in range(max_iter):
            d = ((frames - offset)[:, None, :] - self.prototypes[None, :, :]) ** 2
            new = d.sum(axis=2).argmin(axis=1)
            offset = (frames - self.prototypes[new]).mean(axis=0)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
        tokens, runs = collapse(labels)
        return Recognition(tokens, runs, offset)

    def asr(self, mel) -> list[str]:
        return [token_name(t) for t in self.recognise(mel).tokens]

    def measure(self, mel) -> tuple[list[int], TokenSupervision]:
        """Re-derive tokens and per-token supervision from features alone."""
        frames = mel.frames if isinstance(mel, MelFeature) else np.asarray(mel)
        rec = self.recognise(frames)
        pitch = self.base_pitch(rec.offset) + self.jitter[rec.tokens]
        energy = token_energy(frames, rec.durations)
        return rec.tokens, TokenSupervision(rec.durations, pitch, energy)


def min_pairwise_distance(points: np.ndarray) -> float:
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    d[np.diag_indices_from(d)] = np.inf
    return float(d.min())


def token_energy(frames: np.ndarray, durations) -> np.ndarray:
    """Mean frame L2 norm over each token's span."""
    norms = np.linalg.norm(frames, axis=1)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    return np.array([norms[a:b].mean() if b > a else 0.0
                     for a, b in zip(bounds[:-1], bounds[1:])])


def collapse(labels) -> tuple[list[int], np.ndarray]:
    tokens: list[int] = []
    runs: list[int] = []
    for lab in np.asarray(labels).tolist():
        if tokens and tokens[-1] == lab:
            runs[-1] += 1
        else:
            tokens.append(int(lab))
            runs.append(1)
    return tokens, np.asarray(runs, dtype=np.int64)


# ---------------------------------------------------------------------------
# on-disk corpus
# ---------------------------------------------------------------------------

@dataclass
class GeneratedCorpus:
    root: Path
    spec: CorpusSpec
    speakers: list[SpeakerProfile]
    heldout: list[SpeakerProfile]


def export_speaker_table(path, profiles: list[SpeakerProfile], features: dict[str, list[np.ndarray]],
                         embedder: ToyEmbedder) -> np.ndarray:
    """Write one toy embedding per speaker, computed over all its reference features."""
    if not profiles:
        raise ValueError("need at least one speaker")
    ids = [p.id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate speaker id")
    ids = sorted(ids)
    rows = np.stack([embedder(np.concatenate(features[i], axis=0)) for i in ids])
    write_speakers(path, ids, rows)
    return rows


def generate_corpus(spec: CorpusSpec, out_dir) -> GeneratedCorpus:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    oracle = CorpusOracle(spec)
    (root / "corpus.cfg").write_text(spec.to_text(), encoding="utf-8")
    write_mel(root / "prototypes.mel", oracle.prototypes)

    speakers = [oracle.speaker(i) for i in range(spec.n_speakers)]
    entries: list[ManifestEntry] = []
    features: dict[str, list[np.ndarray]] = {}
    for si, prof in enumerate(speakers):
        spk_dir = root / "mels" / prof.id
        spk_dir.mkdir(parents=True, exist_ok=True)
        for ui in range(spec.utts_per_speaker):
            rng = np.random.default_rng([spec.seed, 3, si, ui])
            tokens, frames, sup = oracle.utterance(prof, rng)
            rel = f"mels/{prof.id}/{prof.id}_u{ui:03d}.mel"
            write_mel(root / rel, frames)
            write_sup((root / rel).with_suffix(".sup"), sup)
            entries.append(ManifestEntry(rel, [token_name(t) for t in tokens], prof.id))
            features.setdefault(prof.id, []).append(frames)

    order = np.random.default_rng([spec.seed, 4]).permutation(len(entries))
    n_val = max(1, len(entries) // 10) if len(entries) > 1 else 0
    val_idx = set(order[:n_val].tolist())
    train = [e for i, e in enumerate(entries) if i not in val_idx]
    val = [e for i, e in enumerate(entries) if i in val_idx]
    write_manifest(root / "train.txt", train)
    write_manifest(root / "val.txt", val)

    train_feats: dict[str, list[np.ndarray]] = {}
    for i, e in enumerate(entries):
        if i not in val_idx:
            train_feats.setdefault(e.speaker, []).append(features[e.speaker][_utt_index(e)])
    export_speaker_table(root / "speakers.spk", speakers, train_feats, oracle.embedder)

    heldout = [oracle.speaker(i, heldout=True) for i in range(spec.n_heldout)]
    for hi, prof in enumerate(heldout):
        d = root / "heldout" / prof.id
        d.mkdir(parents=True, exist_ok=True)
        for ui in range(spec.heldout_utts):
            rng = np.random.default_rng([spec.seed, 5, hi, ui])
            _, frames, _ = oracle.utterance(prof, rng)
            write_mel(d / f"{prof.id}_u{ui:03d}.mel", frames)
    return GeneratedCorpus(root, spec, speakers, heldout)


def _utt_index(entry: ManifestEntry) -> int:
    return int(Path(entry.relpath).stem.rsplit("_u", 1)[1])


def load_spec(corpus_dir) -> CorpusSpec:
    return CorpusSpec.from_text(Path(corpus_dir, "corpus.cfg").read_text(encoding="utf-8"))


def load_oracle(corpus_dir) -> CorpusOracle:
    oracle = CorpusOracle(load_spec(corpus_dir))
    stored = read_mel(Path(corpus_dir, "prototypes.mel")).frames
    if not np.array_equal(stored, oracle.prototypes):
        raise ValueError("prototypes.mel does not match the corpus seed")
    return oracle
