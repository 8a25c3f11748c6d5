import numpy as np
import pytest

from langprompt import numerics as nx
from langprompt.config import RunConfig, build_corpus, build_languages
from langprompt.model import BaseModel, ModelConfig
from langprompt.training import pretrain

TOY = ModelConfig(e=16, feature_dim=8, enc_layers=2, dec_layers=2, heads=2, enc_ctx=48,
                  dec_ctx=24, vocab_size=40, seed=3)


@pytest.fixture
def toy_config():
    return TOY


@pytest.fixture
def toy_model():
    return BaseModel(TOY).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def toy_features(rng, length, dim=TOY.feature_dim):
    return rng.normal(size=(length, dim))


@pytest.fixture(scope="session")
def suite():
    """The default synthetic suite: specs and corpora for every language."""
    cfg = RunConfig()
    specs = build_languages(cfg)
    corpora = {tag: build_corpus(cfg, tag, specs) for tag in specs}
    return cfg, specs, corpora


@pytest.fixture(scope="session")
def base_model(suite):
    """Default-sized base model pretrained on the default suite (about 30 s)."""
    cfg, _, corpora = suite
    model = BaseModel(cfg.model)
    pretrain(model, {t: corpora[t].train for t in cfg.model.base_languages}, cfg.pretrain)
    return model


@pytest.fixture(autouse=True)
def _no_leaked_tape():
    yield
    assert nx._active_tape is None


# acceptance criterion number -> (passed, summary); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, summary = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {summary}")
