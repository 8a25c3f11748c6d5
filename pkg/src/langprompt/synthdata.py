"""Seeded synthetic multilingual corpora.

A language is a small vocabulary of token ids plus one emission vector per
token. An utterance is a random transcript; its feature matrix repeats each
token's emission `frame_rate` times and adds Gaussian noise. Derived languages
share a fraction of their parent's vocabulary and emission rows, which is what
makes cross-language similarity measurable.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

CORPUS_MAGIC = b"SPTC"
CORPUS_VERSION = 1


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LanguageSpec:
    tag: str
    vocab: tuple[int, ...]
    emissions: np.ndarray = field(repr=False)   # (len(vocab), feature_dim)
    sigma: float = 0.1
    frame_rate: int = 2
    parent: str | None = None
    rho: float = 0.0
    seed: int = 0
    pool: tuple[int, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if self.emissions.shape[0] != len(self.vocab):
            raise ValueError("one emission row per vocabulary entry is required")
        if self.frame_rate < 1:
            raise ValueError("frame_rate must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.emissions.shape[1]

    def emission_of(self, token: int) -> np.ndarray:
        return self.emissions[self.vocab.index(token)]


@dataclass
class Utterance:
    features: np.ndarray          # (l, feature_dim) float32
    transcript: list[int]
    language: str

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.language == other.language and self.transcript == other.transcript
                and self.features.dtype == other.features.dtype
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes())


@dataclass
class Corpus:
    language: str
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]

    def split(self, name: str) -> list[Utterance]:
        if name not in ("train", "dev", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def __len__(self) -> int:
        return len(self.train) + len(self.dev) + len(self.test)


def base_language(tag: str, vocab: Sequence[int], feature_dim: int, seed: int,
                  sigma: float = 0.1, frame_rate: int = 2,
                  pool: Sequence[int] = ()) -> LanguageSpec:
    rng = np.random.default_rng(seed)
    emissions = rng.normal(0.0, 1.0, (len(vocab), feature_dim))
    return LanguageSpec(tag, tuple(int(v) for v in vocab), emissions, sigma, frame_rate,
                        None, 0.0, seed, tuple(pool))


def derive_language(parent: LanguageSpec, rho: float, seed: int, tag: str | None = None,
                    pool: Sequence[int] | None = None, relabel: bool = False) -> LanguageSpec:
    """Child language sharing ceil(rho * V) vocabulary entries and emission rows.

    Shared positions keep the parent's token and emission; the others get a
    fresh token drawn from `pool` (default: the parent's pool minus the
    parent's vocabulary) and a fresh emission. With `relabel`, the shared
    positions keep the parent's emission but are assigned fresh tokens, so the
    same sounds spell different symbols.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    V = len(parent.vocab)
    n_shared = math.ceil(rho * V - 1e-12)
    rng = np.random.default_rng(seed)
    shared = np.zeros(V, dtype=bool)
    shared[rng.choice(V, size=n_shared, replace=False)] = True
    candidates = [t for t in (parent.pool if pool is None else pool) if t not in parent.vocab]
    n_fresh = V if relabel else V - n_shared
    if n_fresh > len(candidates):
        raise ValueError(f"token pool too small: need {n_fresh}, have {len(candidates)}")
    fresh_tokens = iter(rng.choice(candidates, size=n_fresh, replace=False).tolist())
    fresh_rows = rng.normal(0.0, 1.0, (V, parent.feature_dim))
    vocab, rows = [], []
    for i in range(V):
        if shared[i]:
            vocab.append(next(fresh_tokens) if relabel else parent.vocab[i])
            rows.append(parent.emissions[i])
        else:
            vocab.append(next(fresh_tokens))
            rows.append(fresh_rows[i])
    return LanguageSpec(tag or f"{parent.tag}-child", tuple(int(v) for v in vocab), np.array(rows),
                        parent.sigma, parent.frame_rate, parent.tag, rho, seed,
                        parent.pool if pool is None else tuple(pool))


def synthesize(spec: LanguageSpec, transcript: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    rows = np.repeat(np.array([spec.emission_of(t) for t in transcript]), spec.frame_rate, axis=0)
    if spec.sigma > 0:
        rows = rows + spec.sigma * rng.normal(0.0, 1.0, rows.shape)
    return rows.astype(np.float32)


def _split_key(index: int) -> bytes:
    return hashlib.blake2b(index.to_bytes(8, "little"), digest_size=8).digest()


def split_indices(count: int) -> tuple[list[int], list[int], list[int]]:
    """70/10/20 split of range(count) ordered by a stable hash of the index."""
    order = sorted(range(count), key=_split_key)
    n_train = round(0.7 * count)
    n_dev = round(0.1 * count)
    return (sorted(order[:n_train]), sorted(order[n_train:n_train + n_dev]),
            sorted(order[n_train + n_dev:]))


def generate_utterances(spec: LanguageSpec, count: int, length_range: tuple[int, int],
                        seed: int) -> list[Utterance]:
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad length range {length_range}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        k = int(rng.integers(lo, hi + 1))
        transcript = [spec.vocab[j] for j in rng.integers(0, len(spec.vocab), size=k)]
        out.append(Utterance(synthesize(spec, transcript, rng), transcript, spec.tag))
    return out


def generate_corpus(spec: LanguageSpec, count: int, length_range: tuple[int, int] = (3, 8),
                    seed: int = 0) -> Corpus:
    if count < 3:
        raise ValueError("count must be >= 3")
    utts = generate_utterances(spec, count, length_range, seed)
    tr, dv, te = split_indices(count)
    return Corpus(spec.tag, [utts[i] for i in tr], [utts[i] for i in dv], [utts[i] for i in te])


# ---------------------------------------------------------------------------
# corpus container
# ---------------------------------------------------------------------------

def _write_text(f: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def write_utterances(path: str | Path, utterances: Iterable[Utterance]) -> None:
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<H", CORPUS_VERSION))
        for u in utterances:
            l, d = u.features.shape
            _write_text(f, u.language)
            f.write(struct.pack("<II", l, d))
            f.write(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
            f.write(struct.pack("<I", len(u.transcript)))
            f.write(np.asarray(u.transcript, dtype="<u4").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CorpusFormatError("corpus file ended unexpectedly")
    return b


def read_utterances(path: str | Path) -> list[Utterance]:
    out = []
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CORPUS_MAGIC:
            raise CorpusFormatError(f"{path}: not a corpus file (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(f, 2))
        if version != CORPUS_VERSION:
            raise CorpusFormatError(f"{path}: unsupported corpus version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CorpusFormatError("corpus file ended unexpectedly")
            (n,) = struct.unpack("<I", head)
            tag = _read_exact(f, n).decode("utf-8")
            l, d = struct.unpack("<II", _read_exact(f, 8))
            feats = np.frombuffer(_read_exact(f, 4 * l * d), dtype="<f4").reshape(l, d).astype(np.float32)
            (k,) = struct.unpack("<I", _read_exact(f, 4))
            toks = np.frombuffer(_read_exact(f, 4 * k), dtype="<u4").astype(int).tolist()
            out.append(Utterance(feats, toks, tag))
    return out


def write_corpus(directory: str | Path, corpus: Corpus) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in ("train", "dev", "test"):
        p = directory / f"{corpus.language}.{name}.sptc"
        write_utterances(p, corpus.split(name))
        paths[name] = p
    return paths


def read_corpus(directory: str | Path, language: str) -> Corpus:
    directory = Path(directory)
    splits = {name: read_utterances(directory / f"{language}.{name}.sptc")
              for name in ("train", "dev", "test")}
    return Corpus(language, splits["train"], splits["dev"], splits["test"])
