"""Model-level evaluation: intelligibility and identity scores for synthesized speech."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import CorpusOracle, token_id
from .formats import ManifestEntry
from .metrics import EvalReport, EvalRow, UtteranceScore, aggregate, cosine_similarity, score
from .model import AcousticModel, ConditioningPoint, EmptySynthesis, SpeakerTable

CONFIG_LABELS = {
    ConditioningPoint.ENCODER: "Encoder based",
    ConditioningPoint.PREDICTORS: "Predictors based",
    ConditioningPoint.DECODER: "Decoder based",
}


def config_label(model: AcousticModel) -> str:
    return CONFIG_LABELS[model.config.conditioning]


def _ids(tokens) -> list[int]:
    return [t if isinstance(t, (int, np.integer)) else token_id(t) for t in tokens]


def evaluate_tts(model: AcousticModel, entries: Sequence[ManifestEntry], oracle: CorpusOracle,
                 label: str | None = None) -> EvalRow:
    """Synthesize each entry with its own speaker and score it.

    Rates compare the oracle transcription with the entry text; similarity
    compares the embedded output with the speaker's table row. An utterance
    that synthesizes to nothing counts as an empty hypothesis with similarity 0.
    """
    scores = []
    for e in entries:
        ids = _ids(e.tokens)
        try:
            mel = model.infer(ids, e.speaker)
        except EmptySynthesis:
            scores.append(UtteranceScore(score(ids, []), 0.0))
            continue
        hyp = oracle.recognise(mel).tokens
        scores.append(UtteranceScore(score(ids, hyp),
                                     cosine_similarity(oracle.embedder(mel),
                                                       model.speakers.row(e.speaker))))
    return aggregate(label or config_label(model), scores)


def evaluate_ground_truth(frames: Sequence[np.ndarray], entries: Sequence[ManifestEntry],
                          oracle: CorpusOracle, speakers: SpeakerTable | None = None,
                          label: str = "Ground truth") -> EvalRow:
    """Score reference features directly; the ceiling any model can reach.

    Similarity is against the speaker's table row when ``speakers`` is given,
    otherwise against the utterance's own embedding (always 1).
    """
    scores = []
    for f, e in zip(frames, entries):
        ids = _ids(e.tokens)
        emb = oracle.embedder(f)
        ref = speakers.row(e.speaker) if speakers is not None else emb
        scores.append(UtteranceScore(score(ids, oracle.recognise(f).tokens),
                                     cosine_similarity(emb, ref)))
    return aggregate(label, scores)


@dataclass
class AnonymousResult:
    row: EvalRow
    per_speaker: dict[str, float]  # phrase-averaged similarity to each known speaker

    @property
    def max_similarity(self) -> float:
        return max(self.per_speaker.values())

    @property
    def mean_similarity(self) -> float:
        return float(np.mean(list(self.per_speaker.values())))


def evaluate_anonymous(model: AcousticModel, phrases: Sequence[Sequence], oracle: CorpusOracle,
                       label: str | None = None) -> AnonymousResult:
    """Synthesize every phrase with the zero embedding and compare it to every known speaker."""
    if not len(model.speakers):
        raise ValueError("no reference speakers to compare against")
    scores = []
    sims = {sid: [] for sid in model.speakers.ids}
    for phrase in phrases:
        ids = _ids(phrase)
        try:
            mel = model.synthesize_anonymous(ids)
        except EmptySynthesis:
            for sid in sims:
                sims[sid].append(0.0)
            scores.append(UtteranceScore(score(ids, []), 0.0))
            continue
        emb = oracle.embedder(mel)
        per = {sid: cosine_similarity(emb, model.speakers.row(sid)) for sid in model.speakers.ids}
        for sid, s in per.items():
            sims[sid].append(s)
        scores.append(UtteranceScore(score(ids, oracle.recognise(mel).tokens),
                                     float(np.mean(list(per.values())))))
    row = aggregate(label or config_label(model), scores)
    return AnonymousResult(row, {sid: float(np.mean(v)) for sid, v in sims.items()})


def report(rows: Sequence[EvalRow]) -> EvalReport:
    return EvalReport(list(rows))
