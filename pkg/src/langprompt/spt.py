"""Soft prompts for the encoder, the decoder, or both, and their training loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .model import BaseModel, ContextOverflowError, ModelConfig, Prompting
from .numerics import Tensor
from .synthdata import Utterance
from .training import LossFn, TrainConfig, TrainResult, fit, transcript_loss

MODES = ("encoder", "decoder", "entire")


class FrozenBaseViolation(RuntimeError):
    pass


@dataclass
class PromptSet:
    id: str
    mode: str
    P: Tensor | None          # encoder prompt (n_enc, e)
    P_dec: Tensor | None      # decoder prompt (n_dec, e)
    owner: str = "shared"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        want_enc = self.mode in ("encoder", "entire")
        want_dec = self.mode in ("decoder", "entire")
        if (self.P is not None) != want_enc or (self.P_dec is not None) != want_dec:
            raise ValueError(f"mode={self.mode} requires "
                             f"P {'present' if want_enc else 'absent'} and "
                             f"P′ {'present' if want_dec else 'absent'}")

    @property
    def n_enc(self) -> int:
        return 0 if self.P is None else self.P.shape[0]

    @property
    def n_dec(self) -> int:
        return 0 if self.P_dec is None else self.P_dec.shape[0]

    def parameters(self) -> list[Tensor]:
        return [t for t in (self.P, self.P_dec) if t is not None]

    def tensors(self) -> dict[str, np.ndarray]:
        return {t.name: t.data for t in self.parameters()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def prompting(self) -> Prompting:
        return Prompting(self.P, self.P_dec)

    def round_to_f32(self) -> None:
        for t in self.parameters():
            t.data = t.data.astype(np.float32).astype(np.float64)


def check_context(config: ModelConfig, n_enc: int, n_dec: int, max_target: int = 1,
                  max_frames: int = 1) -> None:
    if n_enc + max_frames > config.enc_ctx:
        raise ContextOverflowError(
            f"encoder prompt length {n_enc} + {max_frames} frames exceeds enc_ctx={config.enc_ctx}")
    if n_dec + 4 + max_target > config.dec_ctx:
        raise ContextOverflowError(
            f"decoder prompt length {n_dec} + 4 special tokens + {max_target} targets "
            f"exceeds dec_ctx={config.dec_ctx}")


def init_prompts(mode: str, n_enc: int, n_dec: int, seed: int, model: BaseModel,
                 set_id: str = "shared", owner: str = "shared", max_target: int = 1) -> PromptSet:
    """Prompt rows copied from seeded, uniformly sampled rows of the token embedding."""
    if mode not in MODES:
        raise ValueError(f"unknown prompt mode {mode!r}")
    use_enc = mode in ("encoder", "entire")
    use_dec = mode in ("decoder", "entire")
    n_enc = n_enc if use_enc else 0
    n_dec = n_dec if use_dec else 0
    if (use_enc and n_enc < 1) or (use_dec and n_dec < 1):
        raise ValueError(f"mode={mode} needs positive prompt lengths")
    check_context(model.config, n_enc, n_dec, max_target)
    # stored prompts are float32-exact from the start, so lr=0 is a no-op
    E = model.token_embedding.data.astype(np.float32).astype(np.float64)
    rng = np.random.default_rng(seed)
    rows_enc = rng.integers(0, E.shape[0], size=n_enc)
    rows_dec = rng.integers(0, E.shape[0], size=n_dec)
    P = Tensor(E[rows_enc].copy(), requires_grad=True, name=f"{set_id}.P") if use_enc else None
    P_dec = Tensor(E[rows_dec].copy(), requires_grad=True, name=f"{set_id}.P_dec") if use_dec else None
    return PromptSet(set_id, mode, P, P_dec, owner)


def special_tokens(config: ModelConfig, language_token: int) -> list[int]:
    return [config.sot, language_token, config.transcribe, config.notimestamps]


def apply(prompt_set: PromptSet | None, X: np.ndarray, g: Sequence[int],
          model: BaseModel) -> tuple[Tensor, Tensor]:
    """Encoder input [P, proj(X)] and decoder prefix [P′, embed(g)] for one utterance."""
    cfg = model.config
    if len(g) != 4:
        raise ValueError("the special-token prefix must have exactly 4 tokens")
    n_enc = 0 if prompt_set is None else prompt_set.n_enc
    n_dec = 0 if prompt_set is None else prompt_set.n_dec
    check_context(cfg, n_enc, n_dec, max_frames=X.shape[0])
    x = model.project(X[None].astype(np.float64))
    x = nx.reshape(x, x.shape[1:])
    enc_in = x if n_enc == 0 else nx.concat_rows([prompt_set.P, x])
    prefix = nx.embedding(model.token_embedding, np.asarray(g))
    dec_in = prefix if n_dec == 0 else nx.concat_rows([prompt_set.P_dec, prefix])
    return enc_in, dec_in


def train_prompts(prompt_set: PromptSet, data: Sequence[Utterance], model: BaseModel,
                  config: TrainConfig, language_token: int,
                  prompting: Callable[[], Prompting] | None = None,
                  extra_params: Sequence[Tensor] = (),
                  loss_fn: LossFn | None = None) -> TrainResult:
    """Tune only the prompt parameters (plus `extra_params`) on `data`.

    `prompting` is a factory overriding how the prompt set is spliced in (used
    by LAPT). It is called once per step so that derived rows are recorded on
    that step's tape. The base model must be frozen and its content hash is
    verified unchanged afterwards. `loss_fn` replaces the single-language
    transcript loss, e.g. for batches mixing several languages.
    """
    if not model.frozen:
        raise FrozenBaseViolation("train_prompts requires a frozen base model")
    check_context(model.config, prompt_set.n_enc, prompt_set.n_dec,
                  max_target=max(len(u.transcript) for u in data),
                  max_frames=max(u.features.shape[0] for u in data))
    before = model.content_hash()
    factory = prompting if prompting is not None else prompt_set.prompting
    params = prompt_set.parameters() + list(extra_params)
    for p in params:
        p.requires_grad = True
    if loss_fn is None:
        loss_fn = transcript_loss(model, language_token, lambda _: factory())
    result = fit(params, data, loss_fn, config)
    for p in params:
        p.data = p.data.astype(np.float32).astype(np.float64)
    if model.content_hash() != before:
        raise FrozenBaseViolation("base model parameters changed during prompt training")
    return result
