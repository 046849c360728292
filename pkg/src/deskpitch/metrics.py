"""Edit-alignment intelligibility rates, cosine similarity, and report tables.

Rates follow the usual jiwer definitions::

    WER = (S + D + I) / N_ref
    MER = (S + D + I) / (H + S + D + I)
    WIP = (H / N_ref) * (H / N_hyp)
    WIL = 1 - WIP
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Sequence

import numpy as np

# backtrace preference when several moves reach the same optimum
_MATCH, _SUB, _DEL, _INS = 0, 1, 2, 3


@dataclass(frozen=True)
class AlignmentCounts:
    H: int
    S: int
    D: int
    I: int

    @property
    def errors(self) -> int:
        return self.S + self.D + self.I


@dataclass(frozen=True)
class Rates:
    wer: float
    mer: float
    wil: float
    wip: float


def align(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> AlignmentCounts:
    """Minimal unit-cost edit alignment of ``hyp`` against ``ref``.

    Among alignments with the fewest edits the one with the most hits wins;
    remaining ties are broken match > substitution > deletion > insertion
    while tracing back, which does not change the counts.
    """
    n, m = len(ref), len(hyp)
    if n == 0:
        raise ValueError("reference must be non-empty")
    # cost[i][j] = (edits, -hits) for ref[:i] vs hyp[:j]
    cost = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, 0)
    for j in range(1, m + 1):
        cost[0][j] = (j, 0)
    for i in range(1, n + 1):
        r = ref[i - 1]
        row, prev = cost[i], cost[i - 1]
        for j in range(1, m + 1):
            e, h = prev[j - 1]
            diag = (e, h - 1) if r == hyp[j - 1] else (e + 1, h)
            e, h = prev[j]
            up = (e + 1, h)
            e, h = row[j - 1]
            left = (e + 1, h)
            row[j] = min(diag, up, left)

    H = S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = cost[i][j]
        if i > 0 and j > 0:
            e, h = cost[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1] and (e, h - 1) == here:
                H += 1
                i, j = i - 1, j - 1
                continue
            if ref[i - 1] != hyp[j - 1] and (e + 1, h) == here:
                S += 1
                i, j = i - 1, j - 1
                continue
        if i > 0:
            e, h = cost[i - 1][j]
            if (e + 1, h) == here:
                D += 1
                i -= 1
                continue
        I += 1
        j -= 1
    return AlignmentCounts(H, S, D, I)


def rates(c: AlignmentCounts, n_ref: int, n_hyp: int) -> Rates:
    if n_ref == 0:
        raise ValueError("reference length must be positive")
    if c.H + c.S + c.D != n_ref or c.H + c.S + c.I != n_hyp:
        raise ValueError(f"counts {c} inconsistent with lengths {n_ref}/{n_hyp}")
    wer = c.errors / n_ref
    mer = c.errors / (c.H + c.S + c.D + c.I)
    wip = 0.0 if n_hyp == 0 else (c.H / n_ref) * (c.H / n_hyp)
    return Rates(wer, mer, 1.0 - wip, wip)


def score(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> Rates:
    return rates(align(ref, hyp), len(ref), len(hyp))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

HEADER = ["config", "WER", "MER", "WIL", "WIP", "CosSim"]


@dataclass
class EvalRow:
    config: str
    wer: float
    mer: float
    wil: float
    wip: float
    cos_sim: float

    def rounded(self) -> "EvalRow":
        """Values as the TSV stores them: rates to 0.01 %, similarity to 0.01."""
        return EvalRow(self.config, *(round(v * 100, 2) / 100 for v in
                                      (self.wer, self.mer, self.wil, self.wip)),
                       round(self.cos_sim, 2))


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["\t".join(HEADER)]
        for r in self.rows:
            if "\t" in r.config or "\n" in r.config:
                raise ValueError(f"config label {r.config!r} cannot contain tabs or newlines")
            lines.append("\t".join([r.config] + [f"{v * 100:.2f}" for v in
                                                 (r.wer, r.mer, r.wil, r.wip)]
                                   + [f"{r.cos_sim:.2f}"]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "EvalReport":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines or lines[0].split("\t") != HEADER:
            raise ValueError("report is missing the expected header")
        rows = []
        for l in lines[1:]:
            parts = l.split("\t")
            if len(parts) != len(HEADER):
                raise ValueError(f"malformed report row {l!r}")
            pct = [float(x) / 100 for x in parts[1:5]]
            rows.append(EvalRow(parts[0], *pct, float(parts[5])).rounded())
        return cls(rows)

    def rounded(self) -> "EvalReport":
        return EvalReport([r.rounded() for r in self.rows])

    def write(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EvalReport":
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))


@dataclass
class UtteranceScore:
    rates: Rates
    cos_sim: float


def aggregate(label: str, scores: Sequence[UtteranceScore]) -> EvalRow:
    """Per-utterance mean of every column."""
    if not scores:
        raise ValueError("nothing to aggregate")

    def avg(xs):
        return math.fsum(xs) / len(xs)

    wip = avg([s.rates.wip for s in scores])
    return EvalRow(label,
                   avg([s.rates.wer for s in scores]),
                   avg([s.rates.mer for s in scores]),
                   1.0 - wip,
                   wip,
                   avg([s.cos_sim for s in scores]))


def score_utterance(ref_tokens, mel, asr: Callable, embed: Callable,
                    reference_embedding) -> UtteranceScore:
    hyp = asr(mel)
    return UtteranceScore(score(list(ref_tokens), list(hyp)),
                          cosine_similarity(embed(mel), reference_embedding))
