from dataclasses import replace

import numpy as np
import pytest

from langprompt.continual import (CheckpointMismatchError, ForgettingReport, LanguageRegistry,
                                  RegistryError, UnknownLanguageError, audit_forgetting,
                                  expand_language, fft_baseline, load_registry, outputs_digest,
                                  save_registry)
from langprompt.model import NO_PROMPTING, BaseModel, ModelConfig
from langprompt.training import TrainConfig

QUICK = TrainConfig(lr=3e-3, epochs=2, batch_size=8)


@pytest.fixture(scope="module")
def small(suite):
    """Trimmed corpora: 40 training utterances per new language, 15 test per base."""
    cfg, _, corpora = suite
    train = {t: replace(c, train=c.train[:40]) for t, c in corpora.items()}
    audit = {t: corpora[t].test[:15] for t in cfg.model.base_languages}
    return train, audit


def expand(reg, model, tag, small, **kw):
    train, audit = small
    kw.setdefault("train_config", QUICK)
    kw.setdefault("n_enc", 4)
    kw.setdefault("n_dec", 4)
    return expand_language(reg, model, tag, train[tag], audit_data=kw.pop("audit", audit), **kw)


def test_fresh_registry_has_base_entries(base_model):
    reg = LanguageRegistry.for_model(base_model)
    assert sorted(reg.entries) == ["base0", "base1", "base2"]
    assert reg.expanded == []
    tok, prompting = reg.activation("base1")
    assert tok == base_model.config.language_token("base1") and prompting is NO_PROMPTING
    with pytest.raises(UnknownLanguageError):
        reg.activate("new0")
    with pytest.raises(KeyError):
        reg.activation("zz")


def test_separate_expansions_are_isolated(base_model, small):
    reg = LanguageRegistry.for_model(base_model)
    hash0 = base_model.content_hash()
    first = expand(reg, base_model, "new0", small, sharing="separate")
    saved = {k: v.copy() for k, v in reg.prompt_sets["new0"].tensors().items()}
    second = expand(reg, base_model, "new1", small, sharing="separate")
    assert base_model.content_hash() == hash0
    for r in (first.report, second.report):
        assert r.hash_equal
        assert all(r.outputs_equal.values())
        assert all(d == 0.0 for d in r.deltas.values())
    for k, v in reg.prompt_sets["new0"].tensors().items():
        assert np.array_equal(v, saved[k])
    assert set(reg.prompt_sets) == {"new0", "new1"}
    assert reg.entries["new0"].token_id != reg.entries["new1"].token_id
    assert [j["tag"] for j in reg.journal] == ["new0", "new1"]
    assert first.train.final_loss < first.train.initial_loss


def test_shared_expansions_reuse_one_set_and_report_earlier(base_model, small):
    reg = LanguageRegistry.for_model(base_model)
    expand(reg, base_model, "new0", small, sharing="shared")
    audit = {**small[1], "new0": small[0]["new0"].test[:10]}
    second = expand(reg, base_model, "new1", small, sharing="shared", audit=audit)
    assert list(reg.prompt_sets) == ["shared"]
    assert reg.activate("new0").prompt_set_id == reg.activate("new1").prompt_set_id == "shared"
    assert set(second.report.expanded_deltas) == {"new0"}
    assert "kind=expanded" in second.report.to_text()
    assert not reg.entries["new1"].metadata["new_prompt_set"]


def test_shared_mode_mismatch_rejected(base_model, small):
    reg = LanguageRegistry.for_model(base_model)
    expand(reg, base_model, "new0", small, sharing="shared", mode="decoder", audit={})
    with pytest.raises(RegistryError):
        expand(reg, base_model, "new1", small, sharing="shared", mode="entire", audit={})


def test_interleaving_mixes_earlier_language(base_model, small):
    reg = LanguageRegistry.for_model(base_model)
    expand(reg, base_model, "new0", small, sharing="shared", audit={})
    exp = expand(reg, base_model, "new1", small, sharing="shared", audit={},
                 interleave={"new0": small[0]["new0"].train[:10]})
    assert exp.entry.metadata["train_utterances"] == 50
    assert reg.journal[-1]["settings"]["interleave"] == ["new0"]
    sep = LanguageRegistry.for_model(base_model)
    with pytest.raises(ValueError, match="interleav"):
        expand(sep, base_model, "new0", small, sharing="separate", audit={},
               interleave={"new1": small[0]["new1"].train[:2]})


@pytest.mark.parametrize("variant", ["separate", "shared"])
def test_lapt_variants_register_encoders(base_model, small, variant):
    reg = LanguageRegistry.for_model(base_model)
    for tag in ("new0", "new1"):
        expand(reg, base_model, tag, small, lapt=variant, M=8, audit={})
    enc_ids = {lp.encoder_id for lp in reg.language_prompts.values()}
    if variant == "separate":
        assert enc_ids == {"new0.penc", "new1.penc"} and len(reg.prompt_sets) == 2
    else:
        assert enc_ids == {"shared.penc"} and len(reg.prompt_sets) == 1
    assert reg.entries["new0"].similar == "base0"
    assert reg.entries["new1"].similar == "base1"


def test_invalid_expansions(base_model, small):
    reg = LanguageRegistry.for_model(base_model)
    with pytest.raises(RegistryError):
        expand(reg, base_model, "base0", small, audit={})
    with pytest.raises(ValueError):
        expand(reg, base_model, "new0", small, mode="both", audit={})
    with pytest.raises(ValueError):
        expand(reg, base_model, "new0", small, lapt="sometimes", audit={})
    with pytest.raises(ValueError):
        expand(reg, base_model, "new0", small, lapt="shared", sharing="separate", audit={})
    with pytest.raises(UnknownLanguageError):
        expand(reg, base_model, "new0", small, audit={"nope": []})
    train, _ = small
    with pytest.raises(ValueError):
        expand_language(reg, base_model, "bad tag", train["new0"])
    assert reg.expanded == [] and reg.journal == []


def test_registry_round_trip_and_wrong_checkpoint(base_model, small, tmp_path, toy_model):
    reg = LanguageRegistry.for_model(base_model)
    expand(reg, base_model, "new0", small, lapt="separate", M=8, audit={})
    expand(reg, base_model, "new1", small, sharing="separate", mode="decoder", audit={})
    path = tmp_path / "r.sptr"
    save_registry(path, reg)
    again = load_registry(path, base_model)
    assert again == reg
    assert again.to_bytes() == path.read_bytes()
    x = small[0]["new0"].test[:3]
    from langprompt.evaluation import transcribe
    assert transcribe(base_model, reg.activation, x) == transcribe(base_model, again.activation, x)
    with pytest.raises(CheckpointMismatchError):
        load_registry(path, toy_model)
    with pytest.raises(CheckpointMismatchError):
        reg.check_model(BaseModel(base_model.config).freeze())


def test_parameter_count_grows_with_prompt_sets(base_model, small):
    reg = LanguageRegistry.for_model(base_model)
    e = base_model.config.e
    expand(reg, base_model, "new0", small, audit={})
    assert reg.stored_parameter_count() == 8 * e
    expand(reg, base_model, "new1", small, audit={})
    assert reg.stored_parameter_count() == 16 * e


def test_audit_of_identical_checkpoints(base_model, small):
    r = audit_forgetting(small[1], base_model, base_model.copy(), event="self")
    assert r.hash_equal and r.max_delta == 0.0
    assert all(r.outputs_equal.values())
    assert ForgettingReport.from_dict(r.to_dict()) == r
    first = r.to_text().splitlines()[0]
    assert "hash_equal=true" in first and "event=self" in first


def test_audit_rejects_mismatches(base_model, small, toy_model):
    with pytest.raises(CheckpointMismatchError):
        audit_forgetting(small[1], base_model, toy_model)
    with pytest.raises(UnknownLanguageError):
        audit_forgetting({"new0": small[0]["new0"].test}, base_model, base_model)


def test_outputs_digest_separates_boundaries():
    assert outputs_digest([[1, 2], [3]]) != outputs_digest([[1], [2, 3]])
    assert outputs_digest([]) == outputs_digest([])


def test_fft_changes_copy_only(base_model, small):
    train, audit = small
    before = base_model.content_hash()
    ft = fft_baseline(base_model, "adv0", train["adv0"], TrainConfig(lr=3e-4, epochs=1, batch_size=8),
                      audit_data={"base0": audit["base0"]})
    assert base_model.content_hash() == before
    assert ft.model.content_hash() != before
    assert not ft.report.hash_equal
    assert ft.train.final_loss < ft.train.initial_loss
    assert all(not p.requires_grad for p in ft.model.params.values())
    with pytest.raises(ValueError):
        fft_baseline(base_model, "adv0", train["adv0"], token_id=5)


def test_model_config_digest_differs_for_other_configs():
    assert ModelConfig().digest() != ModelConfig(e=32).digest()
