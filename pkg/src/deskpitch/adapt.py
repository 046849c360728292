"""New-speaker adaptation: reference features in, fine-tuned checkpoint out.

Preparation has two branches. One embeds the concatenated reference
features with the toy speaker embedder; the other transcribes each file with
the oracle recogniser, re-measures per-token supervision, and writes train
and validation manifests. Adaptation appends the embedding to the frozen
speaker table and resumes training with a chosen set of blocks frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import CorpusOracle, token_name
from .evaluation import evaluate_tts
from .formats import (FormatError, ManifestEntry, decode_mel, read_manifest, read_sup,
                      read_speakers, write_manifest, write_mel, write_speakers, write_sup)
from .metrics import EvalReport, EvalRow
from .trainer import (DESK_FINETUNE, FREEZE_SETUPS, Block, Checkpoint, Example, TrainConfig,
                      TrainLog, finetune, freeze_label, save_checkpoint)

log = logging.getLogger(__name__)


@dataclass
class AdaptationBundle:
    speaker_id: str
    root: Path
    embedding: np.ndarray
    train: list[ManifestEntry]
    val: list[ManifestEntry]
    total_frames: int

    @property
    def train_manifest(self) -> Path:
        return self.root / "train.txt"

    @property
    def val_manifest(self) -> Path:
        return self.root / "val.txt"

    def examples(self, which: str = "train") -> list[Example]:
        from .corpus import token_id
        from .formats import read_mel

        entries = self.train if which == "train" else self.val if which == "val" else \
            self.train + self.val
        out = []
        for e in entries:
            mel = self.root / e.relpath
            out.append(Example([token_id(t) for t in e.tokens], read_sup(mel.with_suffix(".sup")),
                               read_mel(mel).frames, e.speaker, e.relpath))
        return out

    @classmethod
    def load(cls, root) -> "AdaptationBundle":
        from .formats import read_mel

        root = Path(root)
        ids, emb = read_speakers(root / "embedding.spk")
        if len(ids) != 1:
            raise FormatError(f"{root}/embedding.spk must hold exactly one speaker")
        train = read_manifest(root / "train.txt")
        val = read_manifest(root / "val.txt") if (root / "val.txt").exists() else []
        frames = sum(read_mel(root / e.relpath).n_frames for e in train + val)
        return cls(ids[0], root, emb[0], train, val, frames)


@dataclass
class AdaptationResult:
    checkpoint: Checkpoint
    speaker_row: int
    report: EvalReport
    log: TrainLog
    checkpoint_path: Path | None = None


@dataclass
class SweepResult:
    report: EvalReport
    base_digest: str
    digests: dict[str, str] = field(default_factory=dict)
    logs: dict[str, TrainLog] = field(default_factory=dict)


def prepare_reference(feature_dir, speaker_id: str, oracle: CorpusOracle,
                      out_dir=None) -> AdaptationBundle:
    """Turn a directory of MEL1 reference files into an adaptation bundle.

    The bundle lands in ``out_dir/<speaker_id>`` (default: next to the input
    directory's parent). With two or more files, the last one by name is the
    validation utterance.
    """
    feature_dir = Path(feature_dir)
    files = sorted(feature_dir.glob("*.mel"))
    if not files:
        raise FileNotFoundError(f"no .mel reference files in {feature_dir}")
    frames = []
    for f in files:
        try:
            frames.append(decode_mel(f.read_bytes(), what=str(f)).frames)
        except FormatError as exc:
            raise FormatError(f"cannot decode reference file: {exc}") from exc

    root = Path(out_dir if out_dir is not None else feature_dir.parent / "bundles") / speaker_id
    root.mkdir(parents=True, exist_ok=True)

    # upper branch: identity embedding over all reference material
    embedding = oracle.embedder(np.concatenate(frames, axis=0))
    write_speakers(root / "embedding.spk", [speaker_id], embedding[None, :])

    # lower branch: transcription, supervision, metadata
    entries = []
    for f, fr in zip(files, frames):
        tokens, sup = oracle.measure(fr)
        if int(sup.durations.sum()) != fr.shape[0]:
            raise AssertionError("re-measured durations do not cover the file")
        rel = f.name
        write_mel(root / rel, fr)
        write_sup((root / rel).with_suffix(".sup"), sup)
        entries.append(ManifestEntry(rel, [token_name(t) for t in tokens], speaker_id))
    train, val = (entries[:-1], entries[-1:]) if len(entries) >= 2 else (entries, [])
    write_manifest(root / "train.txt", train)
    write_manifest(root / "val.txt", val)
    total = sum(fr.shape[0] for fr in frames)
    log.info("bundle %s: %d train / %d val files, %d frames", speaker_id, len(train), len(val),
             total)
    return AdaptationBundle(speaker_id, root, embedding, train, val, total)


def adapt_speaker(ckpt: Checkpoint, bundle: AdaptationBundle, fs: Iterable[Block],
                  cfg: TrainConfig = DESK_FINETUNE, oracle: CorpusOracle | None = None,
                  mix: Sequence[Example] = (), out_path=None) -> AdaptationResult:
    """Register the bundle's speaker and fine-tune on its data with ``fs`` frozen.

    ``ckpt`` is left untouched; the adapted state is a new checkpoint.
    ``mix`` optionally adds examples from the original corpus to the
    fine-tuning set.
    """
    if bundle.speaker_id in ckpt.speakers:
        raise ValueError(f"speaker {bundle.speaker_id!r} is already in the checkpoint")
    if bundle.embedding.shape != (ckpt.model_config.d_spk,):
        raise ValueError(f"bundle embedding has width {bundle.embedding.shape}, "
                         f"checkpoint expects {ckpt.model_config.d_spk}")
    base = Checkpoint(ckpt.model_config, ckpt.params, ckpt.speakers.copy(),
                      ckpt.optimizer_state, ckpt.step, ckpt.train_config)
    row = base.speakers.append(bundle.speaker_id, bundle.embedding)
    examples = bundle.examples("train") + list(mix)
    adapted, run_log = finetune(base, examples, fs, cfg)

    rows: list[EvalRow] = []
    if oracle is not None and bundle.val:
        rows.append(evaluate_tts(adapted.to_model(), bundle.val, oracle,
                                 label=f"freeze={freeze_label(fs)}"))
    path = None
    if out_path is not None:
        path = Path(out_path)
        save_checkpoint(adapted, path)
    return AdaptationResult(adapted, row, EvalReport(rows), run_log, path)


def sweep_freeze_setups(ckpt: Checkpoint, bundle: AdaptationBundle, oracle: CorpusOracle,
                        cfg: TrainConfig = DESK_FINETUNE) -> SweepResult:
    """Adapt once per freeze setup, each from the same base checkpoint."""
    result = SweepResult(EvalReport(), ckpt.digest())
    for label, fs in FREEZE_SETUPS.items():
        if ckpt.digest() != result.base_digest:
            raise AssertionError("base checkpoint changed during the sweep")
        res = adapt_speaker(ckpt, bundle, fs, cfg, oracle)
        row = res.report.rows[0] if res.report.rows else EvalRow(f"freeze={label}", *[np.nan] * 5)
        result.report.rows.append(row)
        result.digests[label] = res.checkpoint.digest()
        result.logs[label] = res.log
        log.info("freeze=%s: %.2fs, %d params/step", label, res.log.seconds,
                 res.log.updated_per_step)
    return result
