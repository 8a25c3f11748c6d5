"""Character error rate and language-identification accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .model import BaseModel, Prompting
from .synthdata import Utterance


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int
    ref_length: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        return self.distance / max(1, self.ref_length)

    @property
    def empty_reference(self) -> bool:
        return self.ref_length == 0


def edit_counts(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> EditCounts:
    """Unit-cost Levenshtein alignment via the full DP table.

    Among minimum-distance alignments the backtrace prefers substitution/match,
    then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev, row = d[-1], [i]
        r = ref[i - 1]
        for j in range(1, m + 1):
            row.append(min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1))
        d.append(row)
    i, j = n, m
    subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(subs), dels, ins, n)


def cer(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> tuple[EditCounts, float]:
    counts = edit_counts(ref, hyp)
    return counts, counts.rate


@dataclass
class CerReport:
    utterances: list[tuple[str, EditCounts]] = field(default_factory=list)
    trainable_params: dict[str, int] = field(default_factory=dict)

    def add(self, language: str, counts: EditCounts) -> None:
        self.utterances.append((language, counts))

    @property
    def languages(self) -> list[str]:
        return sorted({lang for lang, _ in self.utterances})

    def _rate(self, rows) -> float:
        edits = sum(c.distance for c in rows)
        ref = sum(c.ref_length for c in rows)
        return edits / max(1, ref)

    def language_cer(self, language: str) -> float:
        rows = [c for lang, c in self.utterances if lang == language]
        if not rows:
            raise KeyError(language)
        return self._rate(rows)

    @property
    def cer(self) -> float:
        """Edit-weighted corpus CER: total edits over total reference length."""
        return self._rate([c for _, c in self.utterances])

    @property
    def empty_references(self) -> int:
        return sum(c.empty_reference for _, c in self.utterances)

    def table(self, method: str = "model") -> str:
        """Per-language CER (%) columns plus avg and trainable parameter count."""
        langs = self.languages
        head = ["method", *langs, "avg", "#params"]
        params = sum(self.trainable_params.values())
        row = [method, *(f"{100 * self.language_cer(l):.2f}" for l in langs),
               f"{100 * self.cer:.2f}", str(params) if self.trainable_params else "/"]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        lines = [" | ".join(h.ljust(w) for h, w in zip(head, widths)),
                 "-+-".join("-" * w for w in widths),
                 " | ".join(r.ljust(w) for r, w in zip(row, widths))]
        if self.empty_references:
            lines.append(f"note: {self.empty_references} empty reference(s) scored with denominator 1")
        return "\n".join(lines)


Activation = tuple[int, Prompting]


def transcribe(model: BaseModel, activation: Callable[[str], Activation],
               utterances: Sequence[Utterance], batch_size: int = 64) -> list[list[int]]:
    """Greedy hypotheses in input order, one language batch at a time."""
    by_lang: dict[str, list[int]] = {}
    for i, u in enumerate(utterances):
        by_lang.setdefault(u.language, []).append(i)
    out: list[list[int]] = [[] for _ in utterances]
    for lang in sorted(by_lang):
        token, prompting = activation(lang)
        idx = by_lang[lang]
        for s in range(0, len(idx), batch_size):
            chunk = idx[s: s + batch_size]
            decoded = model.greedy_decode_batch([utterances[i].features for i in chunk],
                                                [token] * len(chunk), prompting)
            for i, d in zip(chunk, decoded):
                out[i] = list(d.tokens)
    return out


def score(utterances: Sequence[Utterance], hypotheses: Sequence[Sequence[int]]) -> CerReport:
    if len(utterances) != len(hypotheses):
        raise ValueError("one hypothesis per utterance is required")
    report = CerReport()
    for u, h in zip(utterances, hypotheses):
        report.add(u.language, edit_counts(u.transcript, h))
    return report


def evaluate(model: BaseModel, activation: Callable[[str], Activation],
             utterances: Sequence[Utterance], batch_size: int = 64) -> CerReport:
    """Greedy-decode every utterance under its language's activation and score it.

    `activation(tag)` returns (language token id, prompting) and raises KeyError
    for unregistered languages.
    """
    return score(utterances, transcribe(model, activation, utterances, batch_size))


def lid_accuracy(model: BaseModel, segments: Sequence[Utterance], batch_size: int = 64) -> float:
    """Fraction of segments whose language-ID argmax (lowest index on ties) is the label."""
    if not segments:
        return 0.0
    tags = model.config.base_languages
    correct = 0
    for s in range(0, len(segments), batch_size):
        chunk = segments[s: s + batch_size]
        post = model.language_posteriors([u.features for u in chunk])
        for u, p in zip(chunk, post):
            correct += tags[int(np.argmax(p))] == u.language
    return correct / len(segments)
