"""Run configuration: schema, defaults, validation, and the synthetic language suite it describes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .synthdata import Corpus, LanguageSpec, base_language, derive_language, generate_corpus
from .training import PretrainConfig, TrainConfig

RUN_SCHEMA = 1


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class BaseDataConfig:
    count: int = 300
    vocab_per_language: int = 24
    length_range: tuple[int, int] = (3, 8)
    sigma: float = 0.1
    frame_rate: int = 2
    seed: int = 100


@dataclass(frozen=True)
class DerivedLanguageConfig:
    tag: str
    parent: str
    rho: float
    seed: int
    count: int = 400
    relabel: bool = False


DEFAULT_DERIVED = (
    DerivedLanguageConfig("new0", "base0", 0.8, seed=300),
    DerivedLanguageConfig("new1", "base1", 0.8, seed=310),
    # same sounds as base0 spelled with other symbols: full fine-tuning on it must conflict
    DerivedLanguageConfig("adv0", "base0", 1.0, seed=320, count=200, relabel=True),
)


@dataclass(frozen=True)
class DataConfig:
    base: BaseDataConfig = BaseDataConfig()
    derived: tuple[DerivedLanguageConfig, ...] = DEFAULT_DERIVED


@dataclass(frozen=True)
class PromptConfig:
    mode: str = "entire"
    lapt: str = "off"
    sharing: str = "separate"
    n_enc: int = 16
    n_dec: int = 16
    n_lp: int = 1
    M: int = 32
    seed: int = 0
    sim_weighted_init: bool = False
    interleave: bool = False


@dataclass(frozen=True)
class PathsConfig:
    data: str = "data"
    checkpoint: str = "work/base.sptw"
    registry: str = "work/registry.sptr"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    pretrain: PretrainConfig = PretrainConfig()
    prompt: PromptConfig = PromptConfig()
    train: TrainConfig = TrainConfig()
    fft: TrainConfig = TrainConfig(lr=3e-4, epochs=5, batch_size=8)
    paths: PathsConfig = PathsConfig()

    def to_dict(self) -> dict:
        d = {
            "schema": RUN_SCHEMA,
            "model": self.model.to_dict(),
            "data": _plain(asdict(self.data)),
            "pretrain": _plain(asdict(self.pretrain)),
            "prompt": asdict(self.prompt),
            "train": self.train.to_dict(),
            "fft": self.fft.to_dict(),
            "paths": asdict(self.paths),
        }
        return d

    def provenance(self) -> dict:
        """Everything except paths, so artifacts do not depend on where they were written."""
        d = self.to_dict()
        del d["paths"]
        return d

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return parse_run_config(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _check_keys(d: Any, cls, path: str, extra: tuple[str, ...] = ()) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(path, f"expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)} | set(extra)
    for k in sorted(d):
        if k not in known:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")
    return d


def _build(cls, d: dict, path: str, **overrides):
    d = {**_check_keys(d, cls, path), **overrides}
    for f in fields(cls):
        if f.name in d and f.name not in overrides:
            _check_type(d[f.name], f.type, f"{path}.{f.name}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from None


def _check_type(value, annotation: str, path: str) -> None:
    ann = str(annotation)
    if ann == "int" and (not isinstance(value, int) or isinstance(value, bool)):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if ann == "float" and (not isinstance(value, (int, float)) or isinstance(value, bool)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if ann == "bool" and not isinstance(value, bool):
        raise ConfigError(path, f"expected true or false, got {value!r}")
    if ann == "str" and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")


def _train(d: Any, path: str, default: TrainConfig) -> TrainConfig:
    return _build(TrainConfig, {**default.to_dict(), **_check_keys(d, TrainConfig, path)}, path)


def _validate(cfg: RunConfig) -> None:
    m = cfg.model
    b = cfg.data.base
    n_base = len(m.base_languages)
    for name in ("count", "vocab_per_language", "frame_rate"):
        if getattr(b, name) < 1:
            raise ConfigError(f"data.base.{name}", "must be >= 1")
    if b.count < 3:
        raise ConfigError("data.base.count", "must be >= 3")
    lo, hi = b.length_range
    if lo < 1 or hi < lo:
        raise ConfigError("data.base.length_range", f"need 1 <= lo <= hi, got {[lo, hi]}")
    if not (b.sigma >= 0 and math.isfinite(b.sigma)):
        raise ConfigError("data.base.sigma", "must be finite and >= 0")
    if b.vocab_per_language * n_base > len(m.text_token_ids):
        raise ConfigError("data.base.vocab_per_language", "base vocabularies exceed the text vocabulary")
    tags = set(m.base_languages)
    for i, d in enumerate(cfg.data.derived):
        p = f"data.derived[{i}]"
        if not (0.0 <= d.rho <= 1.0):
            raise ConfigError(f"{p}.rho", f"must lie in [0, 1], got {d.rho}")
        if d.parent not in m.base_languages:
            raise ConfigError(f"{p}.parent", f"unknown base language {d.parent!r}")
        if d.tag in tags:
            raise ConfigError(f"{p}.tag", f"duplicate language tag {d.tag!r}")
        if d.count < 3:
            raise ConfigError(f"{p}.count", "must be >= 3")
        tags.add(d.tag)
    if len(cfg.data.derived) > len(m.spare_language_token_ids):
        raise ConfigError("data.derived", "more derived languages than spare language tokens")
    pr = cfg.prompt
    if pr.mode not in ("encoder", "decoder", "entire"):
        raise ConfigError("prompt.mode", f"unknown mode {pr.mode!r}")
    if pr.lapt not in ("off", "shared", "separate"):
        raise ConfigError("prompt.lapt", f"unknown lapt option {pr.lapt!r}")
    if pr.sharing not in ("shared", "separate"):
        raise ConfigError("prompt.sharing", f"unknown sharing {pr.sharing!r}")
    for name in ("n_enc", "n_dec", "n_lp", "M"):
        if getattr(pr, name) < 1:
            raise ConfigError(f"prompt.{name}", "must be >= 1")
    if cfg.pretrain.lid_weight < 0:
        raise ConfigError("pretrain.lid_weight", "must be >= 0")


def parse_run_config(d: dict) -> RunConfig:
    d = _check_keys(d, RunConfig, "", extra=("schema",))
    schema = d.get("schema", RUN_SCHEMA)
    if schema != RUN_SCHEMA:
        raise ConfigError("schema", f"unsupported schema version {schema}")
    default = RunConfig()
    kw: dict[str, Any] = {}
    if "model" in d:
        _check_keys(d["model"], ModelConfig, "model", extra=("schema",))
        try:
            kw["model"] = ModelConfig.from_dict({**default.model.to_dict(), **d["model"]})
        except (TypeError, ValueError) as exc:
            raise ConfigError("model", str(exc)) from None
    if "data" in d:
        dd = _check_keys(d["data"], DataConfig, "data")
        base = default.data.base
        if "base" in dd:
            raw = dict(_check_keys(dd["base"], BaseDataConfig, "data.base"))
            if "length_range" in raw:
                lr = raw["length_range"]
                if not (isinstance(lr, list) and len(lr) == 2 and all(isinstance(v, int) for v in lr)):
                    raise ConfigError("data.base.length_range", "expected two integers")
                raw["length_range"] = tuple(lr)
            base = _build(BaseDataConfig, {**asdict(base), **raw}, "data.base",
                          length_range=raw.get("length_range", base.length_range))
        derived = default.data.derived
        if "derived" in dd:
            if not isinstance(dd["derived"], list):
                raise ConfigError("data.derived", "expected a list")
            derived = tuple(_build(DerivedLanguageConfig, item, f"data.derived[{i}]")
                            for i, item in enumerate(dd["derived"]))
        kw["data"] = DataConfig(base, derived)
    if "pretrain" in d:
        pd = _check_keys(d["pretrain"], PretrainConfig, "pretrain")
        train = _train(pd.get("train", {}), "pretrain.train", default.pretrain.train)
        rest = {k: v for k, v in pd.items() if k != "train"}
        kw["pretrain"] = _build(PretrainConfig, {**asdict(default.pretrain), **rest}, "pretrain",
                                train=train)
    if "prompt" in d:
        kw["prompt"] = _build(PromptConfig, {**asdict(default.prompt), **d["prompt"]}, "prompt")
        _check_keys(d["prompt"], PromptConfig, "prompt")
    for name in ("train", "fft"):
        if name in d:
            kw[name] = _train(d[name], name, getattr(default, name))
    if "paths" in d:
        kw["paths"] = _build(PathsConfig, {**asdict(default.paths), **d["paths"]}, "paths")
        _check_keys(d["paths"], PathsConfig, "paths")
    cfg = replace(default, **kw)
    _validate(cfg)
    return cfg


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        _validate(cfg)
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    return parse_run_config(doc)


# ---------------------------------------------------------------------------
# the synthetic language suite
# ---------------------------------------------------------------------------

def build_languages(cfg: RunConfig) -> dict[str, LanguageSpec]:
    """Base languages on disjoint vocabulary blocks, then the derived languages.

    Fresh tokens of derived languages come from the union of base
    vocabularies, so every symbol is one the base model was trained to emit.
    """
    m, b = cfg.model, cfg.data.base
    V = b.vocab_per_language
    text = m.text_token_ids
    pool = text[: V * len(m.base_languages)]
    specs: dict[str, LanguageSpec] = {}
    for i, tag in enumerate(m.base_languages):
        specs[tag] = base_language(tag, text[V * i: V * (i + 1)], m.feature_dim, seed=b.seed + i,
                                   sigma=b.sigma, frame_rate=b.frame_rate, pool=pool)
    for d in cfg.data.derived:
        specs[d.tag] = derive_language(specs[d.parent], d.rho, seed=d.seed, tag=d.tag,
                                       relabel=d.relabel)
    return specs


def corpus_seed(cfg: RunConfig, tag: str) -> int:
    m = cfg.model
    if tag in m.base_languages:
        return cfg.data.base.seed + 100 + m.base_languages.index(tag)
    for d in cfg.data.derived:
        if d.tag == tag:
            return d.seed + 1000
    raise KeyError(tag)


def build_corpus(cfg: RunConfig, tag: str, specs: dict[str, LanguageSpec] | None = None) -> Corpus:
    specs = specs if specs is not None else build_languages(cfg)
    count = cfg.data.base.count
    for d in cfg.data.derived:
        if d.tag == tag:
            count = d.count
    return generate_corpus(specs[tag], count, cfg.data.base.length_range, seed=corpus_seed(cfg, tag))
