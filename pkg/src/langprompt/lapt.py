"""Language-aware prompt tuning.

Step 1 picks the base language the frozen model most often confuses a new
language with: each of M sampled segments votes for the argmax of its
normalized language-ID posterior, and a base language's similarity is its
vote share.

Step 2 turns the similar language's pretrained token embedding into a
language prompt through a small MLP (the prompt encoder) and places it ahead
of the encoder soft prompt: encoder input is [LP, P, proj(X)]. The new
language also gets its own decoder language token whose embedding starts as a
copy of the similar language's row and is trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import BaseModel, Prompting
from .numerics import Tensor
from .spt import PromptSet, check_context
from .synthdata import Utterance

VARIANTS = ("shared", "separate")


@dataclass(frozen=True)
class SimilarityVector:
    base_tags: tuple[str, ...]
    counts: tuple[int, ...]

    @property
    def M(self) -> int:
        return sum(self.counts)

    @property
    def sim(self) -> tuple[float, ...]:
        return tuple(c / self.M for c in self.counts)

    def fractions(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(c, self.M) for c in self.counts)

    def report(self) -> str:
        """One `key=value` line per base language, then a summary line."""
        lines = [f"tag={t} sim={s:.6f} votes={c} M={self.M}"
                 for t, s, c in zip(self.base_tags, self.sim, self.counts)]
        lines.append(f"most_similar={most_similar(self)} M={self.M} tie_break=lowest_index")
        return "\n".join(lines)


def votes(posteriors: np.ndarray) -> np.ndarray:
    """Per-segment argmax over base languages; ties go to the lowest index."""
    posteriors = np.asarray(posteriors)
    if posteriors.ndim != 2 or posteriors.shape[0] == 0:
        raise ValueError("need an (M, n_base) posterior matrix with M >= 1")
    return np.argmax(posteriors, axis=1)


def similarity_from_posteriors(posteriors: np.ndarray, base_tags: Sequence[str]) -> SimilarityVector:
    v = votes(posteriors)
    if posteriors.shape[1] != len(base_tags):
        raise ValueError("posterior width must match the number of base languages")
    counts = np.bincount(v, minlength=len(base_tags))
    return SimilarityVector(tuple(base_tags), tuple(int(c) for c in counts))


def estimate_similarity(segments: Sequence[Utterance | np.ndarray], model: BaseModel) -> SimilarityVector:
    if not segments:
        raise ValueError("estimate_similarity needs at least one segment (M >= 1)")
    feats = [s.features if isinstance(s, Utterance) else s for s in segments]
    post = np.concatenate([model.language_posteriors(feats[i: i + 64])
                           for i in range(0, len(feats), 64)])
    return similarity_from_posteriors(post, model.config.base_languages)


def sample_segments(data: Sequence[Utterance], M: int, seed: int) -> list[Utterance]:
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data), size=min(M, len(data)), replace=False)
    return [data[i] for i in sorted(idx)]


def most_similar(sim: SimilarityVector) -> str:
    return sim.base_tags[int(np.argmax(sim.counts))]


# ---------------------------------------------------------------------------
# language prompts
# ---------------------------------------------------------------------------

@dataclass
class PromptEncoder:
    """Two-layer GELU MLP mapping an embedding row to n_lp prompt rows."""

    id: str
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    n_lp: int = 1

    @classmethod
    def init(cls, enc_id: str, e: int, seed: int, n_lp: int = 1) -> "PromptEncoder":
        rng = np.random.default_rng(seed)
        hidden = 2 * e

        def t(arr, part):
            return Tensor(arr.astype(np.float32).astype(np.float64), requires_grad=True,
                          name=f"{enc_id}.{part}")

        return cls(enc_id,
                   t(rng.normal(0, 1 / math.sqrt(e), (e, hidden)), "w1"),
                   t(np.zeros(hidden), "b1"),
                   t(rng.normal(0, 1 / math.sqrt(hidden), (hidden, n_lp * e)), "w2"),
                   t(np.zeros(n_lp * e), "b2"),
                   n_lp)

    @property
    def e(self) -> int:
        return self.w1.shape[0]

    def __call__(self, source: Tensor) -> Tensor:
        h = nx.gelu(nx.add_bias(nx.matmul(source, self.w1), self.b1))
        out = nx.add_bias(nx.matmul(h, self.w2), self.b2)
        return nx.reshape(out, (self.n_lp, self.e))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


@dataclass
class LanguagePrompt:
    tag: str
    similar: str
    token_id: int
    source: np.ndarray = field(repr=False)      # (e,) copy of a pretrained embedding row
    lang_row: Tensor = field(repr=False)        # (1, e) trainable language-token embedding
    encoder_id: str = ""

    def parameters(self) -> list[Tensor]:
        return [self.lang_row]


def build_language_prompt(tag: str, similar: str, model: BaseModel, seed: int, token_id: int,
                          encoder: PromptEncoder | None = None, n_lp: int = 1,
                          sim: SimilarityVector | None = None,
                          encoder_id: str | None = None) -> tuple[LanguagePrompt, PromptEncoder]:
    """Language prompt seeded from `similar`'s language-token embedding.

    Passing `encoder` reuses it (shared variant); otherwise a new one is
    initialized from `seed`. With `sim`, the source embedding is the
    similarity-weighted blend of all base-language rows instead of a copy.
    """
    cfg = model.config
    if similar not in cfg.base_languages:
        raise KeyError(f"unknown base language {similar!r}")
    if token_id not in cfg.spare_language_token_ids:
        raise ValueError(f"token {token_id} is not a spare language token")
    E = model.token_embedding.data
    if sim is None:
        source = E[cfg.language_token(similar)].copy()
    else:
        rows = E[list(cfg.base_language_token_ids)]
        source = np.asarray(sim.sim) @ rows
    source = source.astype(np.float32).astype(np.float64)
    if encoder is None:
        encoder = PromptEncoder.init(encoder_id or f"{tag}.penc", cfg.e, seed, n_lp)
    lang_row = Tensor(source[None].copy(), requires_grad=True, name=f"{tag}.lang_row")
    return LanguagePrompt(tag, similar, token_id, source, lang_row, encoder.id), encoder


def language_prompt_rows(lp: LanguagePrompt, encoder: PromptEncoder) -> Tensor:
    return encoder(Tensor(lp.source[None]))


def lapt_prompting(lp: LanguagePrompt, encoder: PromptEncoder, prompt_set: PromptSet) -> Prompting:
    rows = language_prompt_rows(lp, encoder)
    enc_prefix = rows if prompt_set.P is None else nx.concat_rows([rows, prompt_set.P])
    return Prompting(enc_prefix, prompt_set.P_dec, lp.lang_row)


def compose_lapt_input(lp: LanguagePrompt | None, encoder: PromptEncoder | None,
                       prompt_set: PromptSet, X: np.ndarray, g: Sequence[int],
                       model: BaseModel) -> tuple[Tensor, Tensor]:
    """Encoder input [LP, P, proj(X)] and decoder prefix [P′, sot, lang, task, notimestamps].

    With `lp=None` this is exactly `spt.apply`.
    """
    from .spt import apply

    if lp is None:
        return apply(prompt_set, X, g, model)
    n_lp = encoder.n_lp
    check_context(model.config, n_lp + prompt_set.n_enc, prompt_set.n_dec, max_frames=X.shape[0])
    x = model.project(X[None].astype(np.float64))
    x = nx.reshape(x, x.shape[1:])
    parts = [language_prompt_rows(lp, encoder)]
    if prompt_set.P is not None:
        parts.append(prompt_set.P)
    enc_in = nx.concat_rows(parts + [x])
    E = model.token_embedding
    prefix = nx.concat_rows([nx.embedding(E, [g[0]]), lp.lang_row, nx.embedding(E, list(g[2:]))])
    dec_in = prefix if prompt_set.P_dec is None else nx.concat_rows([prompt_set.P_dec, prefix])
    return enc_in, dec_in
