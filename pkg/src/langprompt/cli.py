"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
Environment overrides (paths and threads only): LANGPROMPT_DATA, LANGPROMPT_CHECKPOINT,
LANGPROMPT_REGISTRY, LANGPROMPT_THREADS.
"""

from __future__ import annotations

import os

_threads = os.environ.get("LANGPROMPT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import contextlib  # noqa: E402
import dataclasses  # noqa: E402
import fcntl  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import continual as cl  # noqa: E402
from .config import (RunConfig, build_corpus, build_languages, load_run_config,  # noqa: E402
                     parse_run_config)
from .evaluation import evaluate, lid_accuracy  # noqa: E402
from .lapt import estimate_similarity, sample_segments  # noqa: E402
from .model import NO_PROMPTING, BaseModel  # noqa: E402
from .numerics import NonFiniteError  # noqa: E402
from .storage import canonical_json, load_checkpoint, save_checkpoint  # noqa: E402
from .synthdata import read_corpus, read_utterances, write_corpus  # noqa: E402
from .training import NumericalError, pretrain  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ENV_PATHS = {"data": "LANGPROMPT_DATA", "checkpoint": "LANGPROMPT_CHECKPOINT",
             "registry": "LANGPROMPT_REGISTRY"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _out(text: str = "") -> None:
    print(text, flush=True)


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    paths = dataclasses.asdict(cfg.paths)
    for key, var in ENV_PATHS.items():
        if os.environ.get(var):
            paths[key] = os.environ[var]
    for key in paths:
        flag = getattr(args, key if key != "data" else "data_dir", None)
        if flag:
            paths[key] = flag
    doc = cfg.to_dict()
    doc["paths"] = paths
    prompt = doc["prompt"]
    for key in ("mode", "lapt", "sharing", "n_enc", "n_dec", "n_lp", "M", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            prompt[key] = value
    if getattr(args, "interleave", False):
        prompt["interleave"] = True
    section = "fft" if args.command == "fft" else "train"
    for key in ("epochs", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            doc[section][key] = value
    return parse_run_config(doc)


@contextlib.contextmanager
def _locked(path: Path):
    """Advisory exclusive lock held for the whole mutation."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{path}.lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _split(data_dir: Path, tag: str, split: str):
    path = data_dir / f"{tag}.{split}.sptc"
    if not path.exists():
        raise FileNotFoundError(f"missing corpus file {path} (run gen-data first)")
    return read_utterances(path)


def _languages(arg: str | None, default: list[str]) -> list[str]:
    if not arg:
        return default
    return [t for t in arg.split(",") if t]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(cfg.paths.data)
    specs = build_languages(cfg)
    manifest = {"config": cfg.provenance(), "languages": {}}
    for tag, spec in specs.items():
        corpus = build_corpus(cfg, tag, specs)
        write_corpus(out, corpus)
        manifest["languages"][tag] = {"parent": spec.parent, "rho": spec.rho,
                                      "vocab": list(spec.vocab),
                                      "sizes": [len(corpus.train), len(corpus.dev), len(corpus.test)]}
        _out(f"language={tag} parent={spec.parent or '-'} rho={spec.rho} "
             f"train={len(corpus.train)} dev={len(corpus.dev)} test={len(corpus.test)}")
    (out / "manifest.json").write_text(canonical_json(manifest) + "\n")
    _out(f"wrote {len(specs)} corpora to {out}")
    return EXIT_OK


def _base_activation(model: BaseModel):
    return lambda tag: (model.config.language_token(tag), NO_PROMPTING)


def cmd_pretrain(args, cfg: RunConfig) -> int:
    data_dir = Path(cfg.paths.data)
    tags = list(cfg.model.base_languages)
    train = {t: _split(data_dir, t, "train") for t in tags}
    dev = [u for t in tags for u in _split(data_dir, t, "dev")]
    model = BaseModel(cfg.model)
    result = pretrain(model, train, cfg.pretrain)
    ckpt = Path(cfg.paths.checkpoint)
    save_checkpoint(ckpt, model, {"run": cfg.provenance(), "kind": "base",
                                  "final_train_loss": result.history[-1] if result.history else None})
    reloaded, _ = load_checkpoint(ckpt)
    if reloaded.content_hash() != model.content_hash():
        raise cl.RegistryError("checkpoint did not round-trip")
    report = evaluate(reloaded, _base_activation(reloaded), dev)
    _out(report.table("base (dev)"))
    _out(f"lid_accuracy={lid_accuracy(reloaded, dev):.6f}")
    _out(f"checkpoint={ckpt} hash={reloaded.content_hash()}")
    return EXIT_OK


def cmd_similarity(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(cfg.paths.checkpoint)
    utts = _split(Path(cfg.paths.data), args.language, args.split)
    segments = sample_segments(utts, cfg.prompt.M, cfg.prompt.seed)
    sim = estimate_similarity(segments, model)
    _out(f"language={args.language}")
    _out(sim.report())
    return EXIT_OK


def _load_or_create_registry(path: Path, model: BaseModel) -> cl.LanguageRegistry:
    if path.exists():
        return cl.load_registry(path, model)
    return cl.LanguageRegistry.for_model(model)


def cmd_expand(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(cfg.paths.checkpoint)
    data_dir = Path(cfg.paths.data)
    reg_path = Path(cfg.paths.registry)
    tag = args.language
    corpus = read_corpus(data_dir, tag)
    pr = cfg.prompt
    with _locked(reg_path):
        registry = _load_or_create_registry(reg_path, model)
        audit = {t: _split(data_dir, t, "test") for t in model.config.base_languages}
        sharing = pr.lapt if pr.lapt != "off" else pr.sharing
        interleave = None
        if sharing == "shared":
            for t in registry.expanded:
                if registry.entries[t].prompt_set == cl.SHARED_ID:
                    audit[t] = _split(data_dir, t, "test")
            if pr.interleave:
                interleave = {t: _split(data_dir, t, "train") for t in registry.expanded
                              if registry.entries[t].prompt_set == cl.SHARED_ID}
        x = cl.expand_language(registry, model, tag, corpus, pr.mode, pr.lapt, cfg.train,
                               n_enc=pr.n_enc, n_dec=pr.n_dec,
                               sharing=None if pr.lapt != "off" else pr.sharing,
                               n_lp=pr.n_lp, M=pr.M, seed=pr.seed, audit_data=audit,
                               interleave=interleave or None,
                               sim_weighted_init=pr.sim_weighted_init)
        cl.save_registry(reg_path, registry)
    e = x.entry
    _out(f"language={e.tag} prompt_set={e.prompt_set} mode={e.mode} lapt={e.lapt} "
         f"sharing={e.sharing} similar={e.similar or '-'} token={e.token_id} "
         f"initial_loss={x.train.initial_loss:.6f} final_loss={x.train.final_loss:.6f}")
    if x.similarity is not None:
        _out(x.similarity.report())
    _out(x.report.to_text())
    _out(f"registry={reg_path} prompt_sets={len(registry.prompt_sets)} "
         f"stored_parameters={registry.stored_parameter_count()}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(cfg.paths.checkpoint)
    data_dir = Path(cfg.paths.data)
    reg_path = Path(cfg.paths.registry)
    if args.no_registry or not reg_path.exists():
        activation = _base_activation(model)
        known = list(model.config.base_languages)
        params: dict[str, int] = {}
    else:
        registry = cl.load_registry(reg_path, model)
        activation = registry.activation
        known = list(registry.entries)
        params = {"prompts": registry.stored_parameter_count()}
    langs = _languages(args.languages, known)
    for t in langs:
        if t not in known:
            raise cl.UnknownLanguageError(f"language {t!r} is not registered")
    utts = [u for t in langs for u in _split(data_dir, t, args.split)]
    report = evaluate(model, activation, utts)
    report.trainable_params = params
    _out(report.table(args.method))
    return EXIT_OK


def cmd_audit(args, cfg: RunConfig) -> int:
    before, _ = load_checkpoint(args.before)
    data_dir = Path(cfg.paths.data)
    tags = _languages(args.languages, list(before.config.base_languages))
    corpora = {t: _split(data_dir, t, "test") for t in tags}
    if args.after:
        after, _ = load_checkpoint(args.after)
        report = cl.audit_forgetting(corpora, before, after)
        _out(report.to_text())
        return EXIT_OK
    registry = cl.load_registry(args.registry, before)
    if not registry.journal:
        raise cl.RegistryError("registry has no expansion events")
    event = registry.journal[args.event if args.event is not None else -1]
    stored = cl.ForgettingReport.from_dict(event["report"])
    _out(stored.to_text())
    # replay: the checkpoint must still produce the journaled seen-language decodes
    now = cl.audit_forgetting(corpora, before, before, event=stored.event)
    ok = all(now.digest_after[t] == stored.digest_after.get(t) for t in tags if t in stored.digest_after)
    _out(f"replay_matches={str(ok).lower()} hash_equal={str(now.hash_after == stored.hash_after).lower()}")
    return EXIT_OK if ok else EXIT_DATA


def cmd_fft(args, cfg: RunConfig) -> int:
    src = Path(cfg.paths.checkpoint)
    out = Path(args.out)
    if out.resolve() == src.resolve():
        raise UsageError("--out must differ from the base checkpoint; the base is never overwritten")
    model, prov = load_checkpoint(src)
    data_dir = Path(cfg.paths.data)
    corpus = read_corpus(data_dir, args.language)
    audit = {t: _split(data_dir, t, "test") for t in model.config.base_languages}
    ft = cl.fft_baseline(model, args.language, corpus, cfg.fft, audit_data=audit)
    save_checkpoint(out, ft.model, {"run": cfg.provenance(), "kind": "fft",
                                    "language": args.language, "token_id": ft.token_id,
                                    "parent_hash": model.content_hash()})
    _out(f"language={args.language} token={ft.token_id} initial_loss={ft.train.initial_loss:.6f} "
         f"final_loss={ft.train.final_loss:.6f}")
    _out(ft.report.to_text())
    _out(f"checkpoint={out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="langprompt", description="Soft-prompt language expansion on a frozen base model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, ckpt=True):
        sp.add_argument("--config", help="run config JSON (defaults apply when omitted)")
        if data:
            sp.add_argument("--data-dir", help="corpus directory")
        if ckpt:
            sp.add_argument("--checkpoint", help="base checkpoint path")

    sp = sub.add_parser("gen-data", help="write the synthetic corpora")
    common(sp, ckpt=False)

    sp = sub.add_parser("pretrain", help="train the base model on base languages")
    common(sp)

    sp = sub.add_parser("similarity", help="estimate similarity of a language to the base languages")
    common(sp)
    sp.add_argument("--language", required=True)
    sp.add_argument("--split", default="train", choices=("train", "dev", "test"))
    sp.add_argument("-M", "--segments", dest="M", type=int)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("expand", help="add a language by prompt tuning")
    common(sp)
    sp.add_argument("--registry")
    sp.add_argument("--language", required=True)
    sp.add_argument("--mode", choices=("encoder", "decoder", "entire"))
    sp.add_argument("--lapt", choices=("off", "shared", "separate"))
    sp.add_argument("--sharing", choices=("shared", "separate"),
                    help="prompt-set sharing when --lapt off")
    sp.add_argument("--n-enc", type=int)
    sp.add_argument("--n-dec", type=int)
    sp.add_argument("--n-lp", type=int)
    sp.add_argument("-M", "--segments", dest="M", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--interleave", action="store_true",
                    help="mix earlier shared-prompt languages into training")

    sp = sub.add_parser("eval", help="CER table")
    common(sp)
    sp.add_argument("--registry")
    sp.add_argument("--no-registry", action="store_true", help="base languages only")
    sp.add_argument("--split", default="test", choices=("train", "dev", "test"))
    sp.add_argument("--languages", help="comma-separated tags (default: all registered)")
    sp.add_argument("--method", default="model", help="row label in the table")

    sp = sub.add_parser("audit", help="forgetting report")
    common(sp, ckpt=False)
    sp.add_argument("--before", required=True, help="checkpoint before")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--after", help="checkpoint after")
    g.add_argument("--registry", help="registry whose journaled event to audit")
    sp.add_argument("--event", type=int, help="journal index (default: last)")
    sp.add_argument("--languages", help="comma-separated seen languages")

    sp = sub.add_parser("fft", help="full fine-tuning baseline into a new checkpoint")
    common(sp)
    sp.add_argument("--language", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "similarity": cmd_similarity,
            "expand": cmd_expand, "eval": cmd_eval, "audit": cmd_audit, "fft": cmd_fft}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _run_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
