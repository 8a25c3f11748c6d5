"""Language expansion on a frozen base: registry, activation, forgetting audits, FFT baseline."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .evaluation import Activation, score, transcribe
from .lapt import (LanguagePrompt, PromptEncoder, SimilarityVector, build_language_prompt,
                   estimate_similarity, lapt_prompting, most_similar, sample_segments)
from .model import NO_PROMPTING, BaseModel, Prompting
from .numerics import Tensor
from .spt import MODES, FrozenBaseViolation, PromptSet, init_prompts, train_prompts
from .storage import REGISTRY_MAGIC, atomic_write, decode_container, encode_container
from .synthdata import Corpus, Utterance
from .training import TrainConfig, TrainResult, fit, transcript_loss

REGISTRY_SCHEMA = 1
LAPT_OPTIONS = ("off", "shared", "separate")
SHARED_ID = "shared"
_TAG = re.compile(r"^[A-Za-z0-9_-]+$")

# Full fine-tuning at desk scale: the base was pretrained at 2e-3, so 1e-6 would
# leave it practically unchanged within a few epochs.
FFT_TRAIN = TrainConfig(lr=3e-4, epochs=5, batch_size=8)


class RegistryError(ValueError):
    pass


class CheckpointMismatchError(RegistryError):
    pass


class UnknownLanguageError(KeyError):
    pass


@dataclass
class RegistryEntry:
    tag: str
    status: str                       # "base" or "expanded"
    token_id: int
    prompt_set: str | None = None
    mode: str | None = None
    lapt: str = "off"
    sharing: str | None = None        # "shared" or "separate" for expanded languages
    similar: str | None = None
    metadata: dict = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegistryEntry":
        return cls(**d)


@dataclass
class ActiveLanguage:
    """What inference needs for one language: its token and its prompts."""

    tag: str
    language_token: int
    prompt_set: PromptSet | None = None
    language_prompt: LanguagePrompt | None = None
    encoder: PromptEncoder | None = None

    @property
    def prompt_set_id(self) -> str | None:
        return None if self.prompt_set is None else self.prompt_set.id

    def prompting(self) -> Prompting:
        if self.prompt_set is None:
            return NO_PROMPTING
        if self.language_prompt is not None:
            return lapt_prompting(self.language_prompt, self.encoder, self.prompt_set)
        return self.prompt_set.prompting()


def _hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


class LanguageRegistry:
    def __init__(self, checkpoint_digest: str, base_hash: str) -> None:
        self.checkpoint_digest = checkpoint_digest
        self.base_hash = base_hash
        self.entries: dict[str, RegistryEntry] = {}
        self.prompt_sets: dict[str, PromptSet] = {}
        self.encoders: dict[str, PromptEncoder] = {}
        self.language_prompts: dict[str, LanguagePrompt] = {}
        self.journal: list[dict] = []

    @classmethod
    def for_model(cls, model: BaseModel) -> "LanguageRegistry":
        cfg = model.config
        reg = cls(cfg.digest(), model.content_hash())
        for tag, tok in zip(cfg.base_languages, cfg.base_language_token_ids):
            reg.entries[tag] = RegistryEntry(tag, "base", tok)
        return reg

    def check_model(self, model: BaseModel) -> None:
        if model.config.digest() != self.checkpoint_digest:
            raise CheckpointMismatchError("registry was built for a checkpoint with a different config digest")
        if model.content_hash() != self.base_hash:
            raise CheckpointMismatchError("registry was built for different base weights")

    # -- queries --------------------------------------------------------------

    @property
    def expanded(self) -> list[str]:
        return [t for t, e in self.entries.items() if e.status == "expanded"]

    def activate(self, tag: str) -> ActiveLanguage:
        entry = self.entries.get(tag)
        if entry is None:
            raise UnknownLanguageError(f"language {tag!r} is not registered")
        if entry.status == "base":
            return ActiveLanguage(tag, entry.token_id)
        lp = self.language_prompts.get(tag)
        enc = None if lp is None else self.encoders[lp.encoder_id]
        return ActiveLanguage(tag, entry.token_id, self.prompt_sets[entry.prompt_set], lp, enc)

    def activation(self, tag: str) -> Activation:
        a = self.activate(tag)
        return a.language_token, a.prompting()

    def stored_parameter_count(self) -> int:
        """Prompt-side parameters stored for all expanded languages."""
        return (sum(p.num_parameters() for p in self.prompt_sets.values())
                + sum(e.num_parameters() for e in self.encoders.values())
                + sum(lp.lang_row.size for lp in self.language_prompts.values()))

    def next_token_id(self, spare: Sequence[int]) -> int:
        used = {e.token_id for e in self.entries.values()}
        for t in spare:
            if t not in used:
                return t
        raise RegistryError("no spare language token ids left")

    # -- serialization --------------------------------------------------------

    def to_document(self) -> dict:
        return {
            "schema": REGISTRY_SCHEMA,
            "checkpoint_digest": self.checkpoint_digest,
            "base_hash": self.base_hash,
            "entries": {t: e.to_dict() for t, e in self.entries.items()},
            "prompt_sets": {i: {"mode": p.mode, "owner": p.owner,
                                "P": None if p.P is None else p.P.name,
                                "P_dec": None if p.P_dec is None else p.P_dec.name}
                            for i, p in self.prompt_sets.items()},
            "encoders": {i: {"n_lp": e.n_lp} for i, e in self.encoders.items()},
            "language_prompts": {t: {"similar": lp.similar, "token_id": lp.token_id,
                                     "encoder_id": lp.encoder_id}
                                 for t, lp in self.language_prompts.items()},
            "journal": self.journal,
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for p in self.prompt_sets.values():
            out.update(p.tensors())
        for e in self.encoders.values():
            out.update({t.name: t.data for t in e.parameters()})
        for tag, lp in self.language_prompts.items():
            out[lp.lang_row.name] = lp.lang_row.data
            out[f"{tag}.source"] = lp.source
        if len(out) != sum(1 for _ in self._tensor_names()):
            raise RegistryError("tensor name collision inside the registry")
        return out

    def _tensor_names(self):
        for p in self.prompt_sets.values():
            yield from (t.name for t in p.parameters())
        for e in self.encoders.values():
            yield from (t.name for t in e.parameters())
        for tag, lp in self.language_prompts.items():
            yield lp.lang_row.name
            yield f"{tag}.source"

    def to_bytes(self) -> bytes:
        return encode_container(REGISTRY_MAGIC, self.checkpoint_digest, self.to_document(), self.tensors())

    @classmethod
    def from_bytes(cls, data: bytes) -> "LanguageRegistry":
        digest, doc, tensors = decode_container(data, REGISTRY_MAGIC)
        if doc.get("schema") != REGISTRY_SCHEMA:
            raise RegistryError(f"unsupported registry schema {doc.get('schema')}")
        if doc["checkpoint_digest"] != digest:
            raise RegistryError("registry header digest does not match its document")

        def t(name):
            if name is None:
                return None
            return Tensor(tensors[name], name=name)

        reg = cls(digest, doc["base_hash"])
        reg.entries = {k: RegistryEntry.from_dict(v) for k, v in doc["entries"].items()}
        for i, p in doc["prompt_sets"].items():
            reg.prompt_sets[i] = PromptSet(i, p["mode"], t(p["P"]), t(p["P_dec"]), p["owner"])
        for i, e in doc["encoders"].items():
            reg.encoders[i] = PromptEncoder(i, t(f"{i}.w1"), t(f"{i}.b1"), t(f"{i}.w2"),
                                            t(f"{i}.b2"), e["n_lp"])
        for tag, lp in doc["language_prompts"].items():
            reg.language_prompts[tag] = LanguagePrompt(tag, lp["similar"], lp["token_id"],
                                                       tensors[f"{tag}.source"],
                                                       t(f"{tag}.lang_row"), lp["encoder_id"])
        reg.journal = doc["journal"]
        return reg

    def __eq__(self, other) -> bool:
        return isinstance(other, LanguageRegistry) and self.to_bytes() == other.to_bytes()


def save_registry(path: str | Path, registry: LanguageRegistry) -> None:
    atomic_write(path, registry.to_bytes())


def load_registry(path: str | Path, model: BaseModel | None = None) -> LanguageRegistry:
    reg = LanguageRegistry.from_bytes(Path(path).read_bytes())
    if model is not None:
        reg.check_model(model)
    return reg


# ---------------------------------------------------------------------------
# forgetting audits
# ---------------------------------------------------------------------------

def outputs_digest(hypotheses: Sequence[Sequence[int]]) -> str:
    h = hashlib.sha256()
    for hyp in hypotheses:
        h.update(np.asarray(hyp, dtype="<u4").tobytes() + b"\xff\xff\xff\xff")
    return h.hexdigest()


@dataclass
class ForgettingReport:
    event: str
    hash_before: str
    hash_after: str
    cer_before: dict[str, float] = field(default_factory=dict)
    cer_after: dict[str, float] = field(default_factory=dict)
    outputs_equal: dict[str, bool] = field(default_factory=dict)
    digest_before: dict[str, str] = field(default_factory=dict)
    digest_after: dict[str, str] = field(default_factory=dict)
    # earlier expanded languages (only filled for shared-prompt expansions)
    expanded_cer_before: dict[str, float] = field(default_factory=dict)
    expanded_cer_after: dict[str, float] = field(default_factory=dict)

    @property
    def hash_equal(self) -> bool:
        return self.hash_before == self.hash_after

    @property
    def deltas(self) -> dict[str, float]:
        return {t: self.cer_after[t] - self.cer_before[t] for t in self.cer_before}

    @property
    def expanded_deltas(self) -> dict[str, float]:
        return {t: self.expanded_cer_after[t] - self.expanded_cer_before[t]
                for t in self.expanded_cer_before}

    @property
    def max_delta(self) -> float:
        return max(self.deltas.values(), default=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ForgettingReport":
        return cls(**d)

    def to_text(self) -> str:
        lines = [f"event={self.event} hash_before={self.hash_before} hash_after={self.hash_after} "
                 f"hash_equal={str(self.hash_equal).lower()}"]
        for t in sorted(self.cer_before):
            lines.append(f"language={t} kind=seen cer_before={self.cer_before[t]:.6f} "
                         f"cer_after={self.cer_after[t]:.6f} delta={self.deltas[t]:.6f} "
                         f"outputs_equal={str(self.outputs_equal[t]).lower()}")
        for t in sorted(self.expanded_cer_before):
            lines.append(f"language={t} kind=expanded cer_before={self.expanded_cer_before[t]:.6f} "
                         f"cer_after={self.expanded_cer_after[t]:.6f} "
                         f"delta={self.expanded_deltas[t]:.6f}")
        return "\n".join(lines)


def _decode_by_language(model: BaseModel, activation: Callable[[str], Activation],
                        corpora: Mapping[str, Sequence[Utterance]]) -> dict[str, tuple[list, float]]:
    out = {}
    for tag in sorted(corpora):
        utts = list(corpora[tag])
        if not utts:
            raise ValueError(f"empty audit corpus for {tag!r}")
        hyps = transcribe(model, activation, utts)
        out[tag] = (hyps, score(utts, hyps).cer)
    return out


def _base_activation(model: BaseModel) -> Callable[[str], Activation]:
    return lambda tag: (model.config.language_token(tag), NO_PROMPTING)


def _report(event: str, hash_before: str, hash_after: str, before: dict, after: dict) -> ForgettingReport:
    r = ForgettingReport(event, hash_before, hash_after)
    for tag in sorted(before):
        hb, cb = before[tag]
        ha, ca = after[tag]
        r.cer_before[tag], r.cer_after[tag] = cb, ca
        r.outputs_equal[tag] = hb == ha
        r.digest_before[tag], r.digest_after[tag] = outputs_digest(hb), outputs_digest(ha)
    return r


def audit_forgetting(corpora: Mapping[str, Sequence[Utterance]], before: BaseModel,
                     after: BaseModel, event: str = "audit") -> ForgettingReport:
    """Decode seen-language test sets, prompt-free, under two checkpoints and compare."""
    if before.config.digest() != after.config.digest():
        raise CheckpointMismatchError("checkpoints have different config digests")
    unknown = set(corpora) - set(before.config.base_languages)
    if unknown:
        raise UnknownLanguageError(f"not seen languages of this checkpoint: {sorted(unknown)}")
    b = _decode_by_language(before, _base_activation(before), corpora)
    a = _decode_by_language(after, _base_activation(after), corpora)
    return _report(event, before.content_hash(), after.content_hash(), b, a)


# ---------------------------------------------------------------------------
# expansion
# ---------------------------------------------------------------------------

@dataclass
class Expansion:
    entry: RegistryEntry
    report: ForgettingReport
    train: TrainResult
    similarity: SimilarityVector | None = None


def _mixed_loss(model: BaseModel, routes: dict[str, tuple[int, Callable[[], Prompting]]]):
    """Transcript loss for batches mixing languages, weighted by utterance count."""

    def fn(batch: list[Utterance]) -> Tensor:
        groups: dict[str, list[Utterance]] = {}
        for u in batch:
            groups.setdefault(u.language, []).append(u)
        total = None
        for lang in sorted(groups):
            tok, factory = routes[lang]
            part = transcript_loss(model, tok, lambda _: factory())(groups[lang])
            part = nx.scale(part, len(groups[lang]) / len(batch))
            total = part if total is None else nx.add(total, part)
        return total

    return fn


def expand_language(registry: LanguageRegistry, model: BaseModel, tag: str, corpus: Corpus,
                    mode: str = "entire", lapt: str = "off",
                    train_config: TrainConfig = TrainConfig(), *,
                    n_enc: int = 16, n_dec: int = 16, sharing: str | None = None,
                    n_lp: int = 1, M: int = 32, seed: int = 0,
                    audit_data: Mapping[str, Sequence[Utterance]] | None = None,
                    interleave: Mapping[str, Sequence[Utterance]] | None = None,
                    sim_weighted_init: bool = False) -> Expansion:
    """Add `tag` to the registry by prompt tuning on `corpus.train`.

    `lapt` selects LAPT and its variant. Without LAPT, `sharing` picks between
    one prompt set for all new languages and one per language (default
    separate). `audit_data` maps registered tags to held-out utterances: seen
    languages are decoded prompt-free before and after, and for shared prompt
    sets earlier expanded languages are re-scored. `interleave` supplies
    training data of earlier expanded languages to mix into shared training.
    """
    registry.check_model(model)
    if not _TAG.match(tag):
        raise ValueError(f"language tag {tag!r} must match {_TAG.pattern}")
    if tag in registry.entries:
        raise RegistryError(f"language {tag!r} is already registered")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if lapt not in LAPT_OPTIONS:
        raise ValueError(f"unknown lapt option {lapt!r}")
    if lapt != "off":
        if sharing not in (None, lapt):
            raise ValueError(f"lapt={lapt} conflicts with sharing={sharing}")
        sharing = lapt
    sharing = sharing or "separate"
    if sharing not in ("shared", "separate"):
        raise ValueError(f"unknown sharing {sharing!r}")
    if not corpus.train:
        raise ValueError("the new-language corpus has no training utterances")
    if interleave and sharing != "shared":
        raise ValueError("interleaving only applies to a shared prompt set")
    cfg = model.config
    audit_data = dict(audit_data or {})
    for t in audit_data:
        if t not in registry.entries:
            raise UnknownLanguageError(f"audit data for unregistered language {t!r}")
    seen = {t: u for t, u in audit_data.items() if registry.entries[t].status == "base"}
    earlier = {t: u for t, u in audit_data.items()
               if registry.entries[t].status == "expanded"
               and registry.entries[t].prompt_set == SHARED_ID and sharing == "shared"}

    hash_before = model.content_hash()
    before = _decode_by_language(model, registry.activation, seen)
    earlier_before = _decode_by_language(model, registry.activation, earlier)

    token_id = registry.next_token_id(cfg.spare_language_token_ids)
    similarity = similar = None
    if lapt != "off":
        similarity = estimate_similarity(sample_segments(corpus.train, M, seed), model)
        similar = most_similar(similarity)

    max_target = max(len(u.transcript) for u in corpus.train)
    set_id = SHARED_ID if sharing == "shared" else tag
    ps = registry.prompt_sets.get(set_id)
    if ps is None:
        ps = init_prompts(mode, n_enc, n_dec, seed, model, set_id=set_id,
                          owner=SHARED_ID if sharing == "shared" else tag, max_target=max_target)
    elif ps.mode != mode:
        raise RegistryError(f"shared prompt set has mode {ps.mode}, not {mode}")
    new_prompt_set = set_id not in registry.prompt_sets

    lp = enc = None
    extra: list[Tensor] = []
    if lapt != "off":
        enc_id = f"{SHARED_ID}.penc" if lapt == "shared" else f"{tag}.penc"
        enc = registry.encoders.get(enc_id)
        lp, enc = build_language_prompt(tag, similar, model, seed, token_id, encoder=enc, n_lp=n_lp,
                                        sim=similarity if sim_weighted_init else None,
                                        encoder_id=enc_id)
        extra = enc.parameters() + lp.parameters()
    new = ActiveLanguage(tag, token_id, ps, lp, enc)

    loss_fn = None
    data = list(corpus.train)
    if interleave:
        routes = {tag: (token_id, new.prompting)}
        for t, utts in sorted(interleave.items()):
            if t not in registry.entries or registry.entries[t].prompt_set != SHARED_ID:
                raise ValueError(f"cannot interleave {t!r}: it does not use the shared prompt set")
            a = registry.activate(t)
            routes[t] = (a.language_token, a.prompting)
            data += list(utts)
        loss_fn = _mixed_loss(model, routes)

    result = train_prompts(ps, data, model, train_config, token_id, prompting=new.prompting,
                           extra_params=extra, loss_fn=loss_fn)
    for p in ps.parameters() + extra:
        p.requires_grad = False
    if model.content_hash() != hash_before:
        raise FrozenBaseViolation("base weights changed during expansion")

    registry.prompt_sets[set_id] = ps
    if lp is not None:
        registry.encoders[enc.id] = enc
        registry.language_prompts[tag] = lp
    settings = {"mode": mode, "lapt": lapt, "sharing": sharing, "n_enc": ps.n_enc,
                "n_dec": ps.n_dec, "n_lp": n_lp if lapt != "off" else 0, "M": M, "seed": seed,
                "sim_weighted_init": sim_weighted_init,
                "interleave": sorted(interleave) if interleave else [],
                "train": train_config.to_dict()}
    metadata = {"event": len(registry.journal), "train_utterances": len(data),
                "initial_loss": result.initial_loss, "final_loss": result.final_loss,
                "new_prompt_set": new_prompt_set}
    if similarity is not None:
        metadata["similarity"] = dict(zip(similarity.base_tags, similarity.counts))
    entry = RegistryEntry(tag, "expanded", token_id, set_id, mode, lapt, sharing, similar,
                          metadata, _hash(settings))
    registry.entries[tag] = entry

    after = _decode_by_language(model, registry.activation, seen)
    report = _report(f"expand:{tag}", hash_before, model.content_hash(), before, after)
    if earlier:
        earlier_after = _decode_by_language(model, registry.activation, earlier)
        report.expanded_cer_before = {t: c for t, (_, c) in earlier_before.items()}
        report.expanded_cer_after = {t: c for t, (_, c) in earlier_after.items()}
    registry.journal.append({"event": len(registry.journal), "action": "expand", "tag": tag,
                             "settings": settings, "report": report.to_dict()})
    return Expansion(entry, report, result, similarity)


# ---------------------------------------------------------------------------
# full fine-tuning baseline
# ---------------------------------------------------------------------------

@dataclass
class FineTune:
    model: BaseModel
    report: ForgettingReport
    train: TrainResult
    token_id: int


def fft_baseline(model: BaseModel, tag: str, corpus: Corpus,
                 train_config: TrainConfig = FFT_TRAIN,
                 audit_data: Mapping[str, Sequence[Utterance]] | None = None,
                 token_id: int | None = None) -> FineTune:
    """Train every parameter of a copy of `model` on the new language.

    The input model is left untouched; the returned model is frozen and
    rounded to float32 like any checkpoint.
    """
    if not corpus.train:
        raise ValueError("the new-language corpus has no training utterances")
    cfg = model.config
    token_id = cfg.spare_language_token_ids[0] if token_id is None else token_id
    if token_id not in cfg.spare_language_token_ids:
        raise ValueError(f"token {token_id} is not a spare language token")
    hash_before = model.content_hash()
    tuned = model.copy().unfreeze()
    try:
        result = fit(list(tuned.params.values()), corpus.train,
                     transcript_loss(tuned, token_id), train_config)
    finally:
        tuned.freeze()
    tuned.round_to_f32()
    if model.content_hash() != hash_before:
        raise FrozenBaseViolation("fft_baseline modified its input model")
    if audit_data:
        report = audit_forgetting(audit_data, model, tuned, event=f"fft:{tag}")
    else:
        report = ForgettingReport(f"fft:{tag}", hash_before, tuned.content_hash())
    return FineTune(tuned, report, result, token_id)
