"""Small Whisper-style encoder-decoder transformer.

The encoder consumes a feature matrix (frames x feature_dim), projects it to
the model width and runs a pre-LN transformer stack with sinusoidal positions.
The decoder is a pre-LN stack with learned positions, causal self-attention,
cross-attention over every encoder row, and logits tied to the token
embedding matrix.

Soft prompts are spliced in from outside through `Prompting`: rows prepended to
the projected features, rows placed ahead of the special-token prefix, and an
optional replacement for the language-slot embedding. The base parameters are
never touched by that path.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

CONFIG_SCHEMA = 1


class ContextOverflowError(ValueError):
    """A sequence does not fit in the encoder or decoder context."""


@dataclass(frozen=True)
class ModelConfig:
    e: int = 64
    feature_dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    enc_ctx: int = 256
    dec_ctx: int = 64
    vocab_size: int = 256
    eot: int = 0
    sot: int = 1
    transcribe: int = 2
    notimestamps: int = 3
    prev: int = 4
    base_languages: tuple[str, ...] = ("base0", "base1", "base2")
    base_language_token_ids: tuple[int, ...] = (5, 6, 7)
    spare_language_token_ids: tuple[int, ...] = tuple(range(8, 21))
    # "contiguous": prompt rows take positions 0..n-1 and shift the rest;
    # "restart": content rows keep the positions they have without prompts and
    # prompt rows get no positional term.
    prompt_positions: str = "restart"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "base_languages", tuple(self.base_languages))
        object.__setattr__(self, "base_language_token_ids", tuple(self.base_language_token_ids))
        object.__setattr__(self, "spare_language_token_ids", tuple(self.spare_language_token_ids))
        if self.e % self.heads:
            raise ValueError(f"e={self.e} is not divisible by heads={self.heads}")
        if self.dec_ctx < 5:
            raise ValueError("dec_ctx must leave room for the 4 special tokens and one target")
        ids = [self.eot, self.sot, self.transcribe, self.notimestamps, self.prev,
               *self.base_language_token_ids, *self.spare_language_token_ids]
        if len(set(ids)) != len(ids):
            raise ValueError("special and language token ids must be distinct")
        if min(ids) < 0 or max(ids) >= self.vocab_size:
            raise ValueError("special token ids must lie in [0, vocab_size)")
        if len(self.base_languages) != len(self.base_language_token_ids):
            raise ValueError("one token id per base language is required")
        if not self.base_languages:
            raise ValueError("at least one base language is required")
        if self.prompt_positions not in ("contiguous", "restart"):
            raise ValueError(f"unknown prompt_positions {self.prompt_positions!r}")

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset([self.eot, self.sot, self.transcribe, self.notimestamps, self.prev,
                          *self.base_language_token_ids, *self.spare_language_token_ids])

    @property
    def text_token_ids(self) -> list[int]:
        special = self.special_ids
        return [i for i in range(self.vocab_size) if i not in special]

    def language_token(self, tag: str) -> int:
        try:
            return self.base_language_token_ids[self.base_languages.index(tag)]
        except ValueError:
            raise KeyError(f"unknown base language {tag!r}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = CONFIG_SCHEMA
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"unsupported model config schema {schema}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**d)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


@dataclass
class Prompting:
    """Trainable rows spliced around the frozen model.

    enc_prefix: (n_enc, e) rows placed before the projected features.
    dec_prompt: (n_dec, e) rows placed before the special-token prefix.
    lang_row:   (1, e) replacement for the language-slot embedding.
    """

    enc_prefix: Tensor | None = None
    dec_prompt: Tensor | None = None
    lang_row: Tensor | None = None

    @property
    def n_enc(self) -> int:
        return 0 if self.enc_prefix is None else self.enc_prefix.shape[0]

    @property
    def n_dec(self) -> int:
        return 0 if self.dec_prompt is None else self.dec_prompt.shape[0]


NO_PROMPTING = Prompting()


@dataclass
class Encoded:
    states: Tensor            # (B, T, e)
    key_pad: np.ndarray       # (B, T) True where the row is padding
    n_prefix: int
    lengths: list[int]


@dataclass
class DecodeResult:
    tokens: list[int]
    truncated: bool = False


def sinusoids(length: int, channels: int) -> np.ndarray:
    half = channels // 2
    inc = math.log(10000) / max(half - 1, 1)
    inv = np.exp(-inc * np.arange(half))
    t = np.arange(length)[:, None] * inv[None, :]
    return np.concatenate([np.sin(t), np.cos(t)], axis=1)


def pad_features(feats: Sequence[np.ndarray], feature_dim: int) -> tuple[np.ndarray, list[int]]:
    lengths = [int(x.shape[0]) for x in feats]
    for x in feats:
        if x.ndim != 2 or x.shape[1] != feature_dim:
            raise nx.ShapeError("encode", x.shape, detail=f"feature_dim must be {feature_dim}")
        if x.shape[0] < 1:
            raise nx.ShapeError("encode", x.shape, detail="empty feature sequence")
    out = np.zeros((len(feats), max(lengths), feature_dim))
    for i, x in enumerate(feats):
        out[i, : x.shape[0]] = x
    return out, lengths


def _init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    e = cfg.e
    p: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out, bias=True):
        p[f"{name}.w"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))
        if bias:
            p[f"{name}.b"] = np.zeros(fan_out)

    def norm(name):
        p[f"{name}.g"] = np.ones(e)
        p[f"{name}.b"] = np.zeros(e)

    def attn(name):
        linear(f"{name}.q", e, e)
        linear(f"{name}.k", e, e, bias=False)
        linear(f"{name}.v", e, e)
        linear(f"{name}.o", e, e)

    def mlp(name):
        linear(f"{name}.fc1", e, 4 * e)
        linear(f"{name}.fc2", 4 * e, e)

    linear("frontend", cfg.feature_dim, e)
    for i in range(cfg.enc_layers):
        norm(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        norm(f"enc.{i}.ln2")
        mlp(f"enc.{i}.mlp")
    norm("enc.ln_post")
    p["dec.tok"] = rng.normal(0.0, 0.02, (cfg.vocab_size, e))
    p["dec.pos"] = rng.normal(0.0, 0.02, (cfg.dec_ctx, e))
    for i in range(cfg.dec_layers):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3")
        mlp(f"dec.{i}.mlp")
    norm("dec.ln")
    return p


def content_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class BaseModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None) -> None:
        self.config = config
        raw = _init_params(config) if params is None else params
        expected = _init_params_shapes(config)
        if set(raw) != set(expected):
            missing = sorted(set(expected) - set(raw))
            extra = sorted(set(raw) - set(expected))
            raise ValueError(f"parameter set mismatch: missing={missing} extra={extra}")
        for k, shape in expected.items():
            if tuple(raw[k].shape) != shape:
                raise nx.ShapeError("BaseModel", tuple(raw[k].shape), shape, detail=k)
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(raw[k], dtype=np.float64), name=f"base.{k}") for k in sorted(raw)
        }
        self._enc_pos = sinusoids(config.enc_ctx, config.e)

    # -- parameter management -------------------------------------------

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def freeze(self) -> "BaseModel":
        for t in self.params.values():
            t.requires_grad = False
        return self

    def unfreeze(self) -> "BaseModel":
        for t in self.params.values():
            t.requires_grad = True
        return self

    def content_hash(self) -> str:
        return content_hash(self.params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def copy(self) -> "BaseModel":
        return BaseModel(self.config, self.state())

    def round_to_f32(self) -> None:
        """Make in-memory weights exactly representable in the checkpoint format."""
        for t in self.params.values():
            t.data = t.data.astype(np.float32).astype(np.float64)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    @property
    def token_embedding(self) -> Tensor:
        return self.params["dec.tok"]

    # -- building blocks --------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        y = nx.matmul(x, self.params[f"{name}.w"])
        b = self.params.get(f"{name}.b")
        return y if b is None else nx.add_bias(y, b)

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return nx.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _split_heads(self, x: Tensor) -> Tensor:
        B, T, e = x.shape
        H = self.config.heads
        return nx.transpose(nx.reshape(x, (B, T, H, e // H)), (0, 2, 1, 3))

    def _attention(self, name: str, xq: Tensor, xkv: Tensor, mask: np.ndarray | None) -> Tensor:
        B, Tq, e = xq.shape
        d = e // self.config.heads
        q = self._split_heads(self._linear(xq, f"{name}.q"))
        k = self._split_heads(self._linear(xkv, f"{name}.k"))
        v = self._split_heads(self._linear(xkv, f"{name}.v"))
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        if mask is not None:
            scores = nx.mask_fill(scores, mask)
        w = nx.softmax(scores)
        o = nx.transpose(nx.matmul(w, v), (0, 2, 1, 3))
        return self._linear(nx.reshape(o, (B, Tq, e)), f"{name}.o")

    def _mlp(self, x: Tensor, name: str) -> Tensor:
        return self._linear(nx.gelu(self._linear(x, f"{name}.fc1")), f"{name}.fc2")

    def _positions(self, table: np.ndarray, B: int, n_prefix: int, T: int,
                   offsets: Sequence[int] | None) -> np.ndarray:
        content = T - n_prefix
        offs = [0] * B if offsets is None else list(offsets)
        out = np.empty((B, T, table.shape[1]))
        for i, o in enumerate(offs):
            if self.config.prompt_positions == "contiguous":
                out[i] = table[o: o + T]
            else:
                out[i, :n_prefix] = 0.0
                out[i, n_prefix:] = table[o: o + content]
        return out

    # -- encoder ------------------------------------------------------------

    def project(self, feats: np.ndarray) -> Tensor:
        """Frontend projection of a padded feature batch (B, L, feature_dim)."""
        return self._linear(Tensor(feats), "frontend")

    def encode_batch(self, feats: Sequence[np.ndarray], enc_prefix: Tensor | None = None,
                     pos_offsets: Sequence[int] | None = None) -> Encoded:
        cfg = self.config
        X, lengths = pad_features(feats, cfg.feature_dim)
        B, L, _ = X.shape
        n = 0 if enc_prefix is None else enc_prefix.shape[0]
        extra = 0 if pos_offsets is None else max(pos_offsets)
        if n + L + extra > cfg.enc_ctx:
            raise ContextOverflowError(
                f"encoder context overflow: {n} prompt rows + {L} frames > enc_ctx={cfg.enc_ctx}")
        h = self.project(X)
        if enc_prefix is not None:
            if enc_prefix.shape[1] != cfg.e:
                raise nx.ShapeError("encode", enc_prefix.shape, detail=f"prompt width must be {cfg.e}")
            h = nx.concat_rows([nx.tile_batch(enc_prefix, B), h])
        T = n + L
        h = nx.add(h, Tensor(self._positions(self._enc_pos, B, n, T, pos_offsets)))
        key_pad = np.zeros((B, T), dtype=bool)
        for i, l in enumerate(lengths):
            key_pad[i, n + l:] = True
        mask = key_pad[:, None, None, :]
        for i in range(cfg.enc_layers):
            x = self._norm(h, f"enc.{i}.ln1")
            h = nx.add(h, self._attention(f"enc.{i}.attn", x, x, mask))
            h = nx.add(h, self._mlp(self._norm(h, f"enc.{i}.ln2"), f"enc.{i}.mlp"))
        h = self._norm(h, "enc.ln_post")
        return Encoded(h, key_pad, n, lengths)

    def encode(self, X: np.ndarray, enc_prompt: Tensor | None = None) -> Tensor:
        """Encoder states for one utterance: (n+l, e) with a prompt, (l, e) without."""
        enc = self.encode_batch([X], enc_prompt)
        return nx.reshape(enc.states, enc.states.shape[1:])

    # -- decoder ------------------------------------------------------------

    def special_prefix(self, lang_ids: Sequence[int], lang_row: Tensor | None = None) -> Tensor:
        """Embedded ⟨sot⟩ ⟨lang⟩ ⟨transcribe⟩ ⟨notimestamps⟩ rows, (B, 4, e)."""
        cfg = self.config
        B = len(lang_ids)
        E = self.token_embedding
        sot = nx.embedding(E, np.full((B, 1), cfg.sot))
        if lang_row is None:
            lang = nx.embedding(E, np.asarray(lang_ids).reshape(B, 1))
        else:
            lang = nx.tile_batch(lang_row, B)
        task = nx.embedding(E, np.tile([cfg.transcribe, cfg.notimestamps], (B, 1)))
        return nx.concat_rows([sot, lang, task])

    def decoder_forward_batch(self, enc: Encoded, prefix: Tensor, tokens: np.ndarray | None,
                              dec_prompt: Tensor | None = None,
                              pos_offsets: Sequence[int] | None = None) -> Tensor:
        """Logits (B, n_dec + prefix_rows + K, |v|) for [P′, prefix, embed(tokens)]."""
        cfg = self.config
        B = prefix.shape[0]
        parts = []
        if dec_prompt is not None:
            if dec_prompt.shape[1] != cfg.e:
                raise nx.ShapeError("decoder", dec_prompt.shape, detail=f"prompt width must be {cfg.e}")
            parts.append(nx.tile_batch(dec_prompt, B))
        parts.append(prefix)
        if tokens is not None and np.asarray(tokens).size:
            parts.append(nx.embedding(self.token_embedding, tokens))
        n = 0 if dec_prompt is None else dec_prompt.shape[0]
        T = sum(p.shape[1] for p in parts)
        extra = 0 if pos_offsets is None else max(pos_offsets)
        if T + extra > cfg.dec_ctx:
            raise ContextOverflowError(
                f"decoder context overflow: {T} rows (prompt {n}) > dec_ctx={cfg.dec_ctx}")
        h = nx.concat_rows(parts) if len(parts) > 1 else parts[0]
        pos = self.params["dec.pos"]
        if pos_offsets is None and (n == 0 or cfg.prompt_positions == "contiguous"):
            h = nx.add_bias(h, nx.slice_rows(pos, 0, T))
        elif cfg.prompt_positions == "contiguous":
            idx = np.stack([np.arange(o, o + T) for o in pos_offsets])
            h = nx.add(h, nx.embedding(pos, idx))
        else:
            # prompt rows carry no positional term
            offs = [0] * B if pos_offsets is None else pos_offsets
            idx = np.stack([np.arange(o, o + T - n) for o in offs])
            content = nx.add(nx.slice_rows(h, n, T), nx.embedding(pos, idx))
            h = nx.concat_rows([nx.slice_rows(h, 0, n), content]) if n else content
        self_mask = nx.causal_mask(T)
        cross_mask = enc.key_pad[:, None, None, :]
        for i in range(cfg.dec_layers):
            x = self._norm(h, f"dec.{i}.ln1")
            h = nx.add(h, self._attention(f"dec.{i}.self", x, x, self_mask))
            h = nx.add(h, self._attention(f"dec.{i}.cross", self._norm(h, f"dec.{i}.ln2"),
                                          enc.states, cross_mask))
            h = nx.add(h, self._mlp(self._norm(h, f"dec.{i}.ln3"), f"dec.{i}.mlp"))
        h = self._norm(h, "dec.ln")
        return nx.matmul(h, nx.transpose(self.token_embedding, (1, 0)))

    def decoder_forward(self, prefix_rows: Tensor, targets: Sequence[int], enc_states: Tensor) -> Tensor:
        """Single-utterance decoder pass.

        prefix_rows: (n+4, e) or (4, e) already-assembled prefix (prompt rows
        included); enc_states: (rows, e). Returns logits (rows+len(targets), |v|).
        """
        T = enc_states.shape[0]
        enc = Encoded(nx.reshape(enc_states, (1, *enc_states.shape)),
                      np.zeros((1, T), dtype=bool), 0, [T])
        toks = np.asarray(targets, dtype=np.int64).reshape(1, -1) if len(targets) else None
        logits = self.decoder_forward_batch(enc, nx.reshape(prefix_rows, (1, *prefix_rows.shape)), toks)
        return nx.reshape(logits, logits.shape[1:])

    # -- objectives -------------------------------------------------------

    def forward_batch(self, feats: Sequence[np.ndarray], lang_ids: Sequence[int],
                      targets: Sequence[Sequence[int]], prompting: Prompting = NO_PROMPTING,
                      enc_offsets: Sequence[int] | None = None,
                      dec_offsets: Sequence[int] | None = None) -> Tensor:
        """Teacher-forced logits for a batch; targets are padded with eot."""
        enc = self.encode_batch(feats, prompting.enc_prefix, enc_offsets)
        prefix = self.special_prefix(lang_ids, prompting.lang_row)
        K = max(len(t) for t in targets)
        toks = np.full((len(targets), K), self.config.eot, dtype=np.int64)
        for i, t in enumerate(targets):
            toks[i, : len(t)] = t
        return self.decoder_forward_batch(enc, prefix, toks if K else None,
                                          prompting.dec_prompt, dec_offsets)

    def loss(self, logits: Tensor, targets: Sequence[Sequence[int]], n_prompt: int = 0) -> Tensor:
        """Mean CE over transcript tokens plus eot; prompt and special rows are unsupervised."""
        B, T, _ = logits.shape
        labels = np.full((B, T), self.config.eot, dtype=np.int64)
        weights = np.zeros((B, T))
        start = n_prompt + 3  # row of ⟨notimestamps⟩ predicts the first token
        for i, t in enumerate(targets):
            seq = list(t) + [self.config.eot]
            labels[i, start: start + len(seq)] = seq
            weights[i, start: start + len(seq)] = 1.0
        return nx.cross_entropy(logits, labels, weights)

    def lid_loss(self, logits: Tensor, lang_ids: Sequence[int], n_prompt: int = 0) -> Tensor:
        """CE of the language token predicted from the ⟨sot⟩ row."""
        B, T, _ = logits.shape
        labels = np.full((B, T), self.config.eot, dtype=np.int64)
        weights = np.zeros((B, T))
        labels[:, n_prompt] = lang_ids
        weights[:, n_prompt] = 1.0
        return nx.cross_entropy(logits, labels, weights)

    # -- inference ----------------------------------------------------------

    def greedy_decode_batch(self, feats: Sequence[np.ndarray], lang_ids: Sequence[int],
                            prompting: Prompting = NO_PROMPTING) -> list[DecodeResult]:
        cfg = self.config
        B = len(feats)
        with nx.no_grad():
            enc = self.encode_batch(feats, prompting.enc_prefix)
            prefix = self.special_prefix(lang_ids, prompting.lang_row)
            n = prompting.n_dec
            out: list[list[int]] = [[] for _ in range(B)]
            done = [False] * B
            truncated = [False] * B
            toks = np.zeros((B, 0), dtype=np.int64)
            while not all(done):
                if n + 4 + toks.shape[1] > cfg.dec_ctx:
                    for i in range(B):
                        if not done[i]:
                            truncated[i] = True
                    break
                logits = self.decoder_forward_batch(enc, prefix, toks if toks.shape[1] else None,
                                                    prompting.dec_prompt)
                nxt = np.argmax(logits.data[:, -1, :], axis=-1)
                for i in range(B):
                    if done[i]:
                        continue
                    if nxt[i] == cfg.eot:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
                nxt = np.where(done, cfg.eot, nxt)
                toks = np.concatenate([toks, nxt[:, None]], axis=1)
        return [DecodeResult(o, t) for o, t in zip(out, truncated)]

    def greedy_decode(self, X: np.ndarray, language_token: int,
                      prompting: Prompting = NO_PROMPTING) -> DecodeResult:
        if language_token not in (*self.config.base_language_token_ids,
                                  *self.config.spare_language_token_ids):
            raise ValueError(f"{language_token} is not a language token")
        return self.greedy_decode_batch([X], [language_token], prompting)[0]

    def language_posteriors(self, feats: Sequence[np.ndarray]) -> np.ndarray:
        """(B, n_base) language-ID distributions restricted to base languages."""
        cfg = self.config
        with nx.no_grad():
            enc = self.encode_batch(feats)
            sot = nx.embedding(self.token_embedding, np.full((len(feats), 1), cfg.sot))
            logits = self.decoder_forward_batch(enc, sot, None).data[:, 0, :]
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        rel = p[:, list(cfg.base_language_token_ids)]
        return rel / rel.sum(axis=-1, keepdims=True)

    def identify_language(self, X: np.ndarray) -> np.ndarray:
        return self.language_posteriors([X])[0]


def _init_params_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in _init_params(cfg).items()}
