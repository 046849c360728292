"""Little-endian binary formats for features, supervision and speaker tables.

MEL1  magic, u32 F, u32 n_mels, F*n_mels f64 (row-major)
SUP1  magic, u32 T, T u32 durations, T f64 pitch, T f64 energy
SPK1  magic, u32 S, u32 d_spk, S*d_spk f64, then S length-prefixed UTF-8 ids

Manifests are UTF-8 text, one ``relpath.mel|tok1 tok2 ...|speakerID`` per line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A file is truncated, has the wrong magic, or is otherwise malformed."""


@dataclass
class MelFeature:
    frames: np.ndarray  # [F, n_mels]

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class TokenSupervision:
    durations: np.ndarray  # int64 [T]
    pitch: np.ndarray  # float64 [T]
    energy: np.ndarray  # float64 [T]

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.pitch = np.asarray(self.pitch, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        n = len(self.durations)
        if len(self.pitch) != n or len(self.energy) != n:
            raise ValueError("supervision tracks must have one value per token")
        if (self.durations < 0).any():
            raise ValueError("durations must be non-negative")


@dataclass
class ManifestEntry:
    relpath: str
    tokens: list[str]
    speaker: str

    def line(self) -> str:
        return f"{self.relpath}|{' '.join(self.tokens)}|{self.speaker}"


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected))
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def u32s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<u4").astype(np.int64)

    def string(self) -> str:
        n = self.u32()
        return self.take(n).decode("utf-8")

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


def _f64_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _str_bytes(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


# --- MEL1 -----------------------------------------------------------------

def encode_mel(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("mel frames must be a [F, n_mels] matrix")
    F, n = frames.shape
    return b"MEL1" + struct.pack("<II", F, n) + _f64_bytes(frames)


def decode_mel(buf: bytes, what: str = "MEL1") -> MelFeature:
    r = _Reader(buf, what)
    r.magic(b"MEL1")
    F, n = r.u32(), r.u32()
    frames = r.f64(F * n).reshape(F, n)
    r.done()
    return MelFeature(frames)


def write_mel(path, frames: np.ndarray) -> None:
    Path(path).write_bytes(encode_mel(frames))


def read_mel(path) -> MelFeature:
    return decode_mel(Path(path).read_bytes(), what=str(path))


# --- SUP1 -----------------------------------------------------------------

def write_sup(path, sup: TokenSupervision) -> None:
    T = len(sup.durations)
    buf = (b"SUP1" + struct.pack("<I", T)
           + np.ascontiguousarray(sup.durations, dtype="<u4").tobytes()
           + _f64_bytes(sup.pitch) + _f64_bytes(sup.energy))
    Path(path).write_bytes(buf)


def read_sup(path) -> TokenSupervision:
    r = _Reader(Path(path).read_bytes(), str(path))
    r.magic(b"SUP1")
    T = r.u32()
    durations = r.u32s(T)
    pitch = r.f64(T)
    energy = r.f64(T)
    r.done()
    return TokenSupervision(durations, pitch, energy)


# --- SPK1 -----------------------------------------------------------------

def write_speakers(path, ids: list[str], embeddings: np.ndarray) -> None:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(ids):
        raise ValueError("need one embedding row per speaker id")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate speaker id")
    S, d = embeddings.shape
    buf = b"SPK1" + struct.pack("<II", S, d) + _f64_bytes(embeddings)
    buf += b"".join(_str_bytes(i) for i in ids)
    Path(path).write_bytes(buf)


def read_speakers(path) -> tuple[list[str], np.ndarray]:
    r = _Reader(Path(path).read_bytes(), str(path))
    r.magic(b"SPK1")
    S, d = r.u32(), r.u32()
    emb = r.f64(S * d).reshape(S, d)
    ids = [r.string() for _ in range(S)]
    r.done()
    return ids, emb


# --- manifests ------------------------------------------------------------

def parse_manifest_line(line: str) -> ManifestEntry:
    parts = line.rstrip("\n").split("|")
    if len(parts) != 3:
        raise FormatError(f"manifest line needs 3 '|'-separated fields: {line!r}")
    relpath, text, speaker = parts
    return ManifestEntry(relpath, text.split(), speaker)


def read_manifest(path) -> list[ManifestEntry]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [parse_manifest_line(l) for l in lines if l.strip()]


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    text = "".join(e.line() + "\n" for e in entries)
    Path(path).write_text(text, encoding="utf-8")


def sup_path_for(mel_path) -> Path:
    return Path(mel_path).with_suffix(".sup")
