import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langprompt.evaluation import CerReport, cer, edit_counts, evaluate, lid_accuracy, score
from langprompt.model import NO_PROMPTING, BaseModel
from langprompt.synthdata import Utterance

from conftest import TOY
from oracles import RecursiveEditDistance, all_strings

words = st.lists(st.sampled_from("abc"), max_size=8).map("".join)


def test_identical_strings():
    counts, rate = cer("abc", "abc")
    assert counts.distance == 0 and rate == 0.0


def test_one_substitution():
    counts, rate = cer("abc", "axc")
    assert (counts.substitutions, counts.deletions, counts.insertions) == (1, 0, 0)
    assert rate == pytest.approx(1 / 3)


def test_all_deleted():
    counts, rate = cer("ab", "")
    assert counts.deletions == 2 and rate == 1.0


def test_empty_reference_counts_insertions_with_unit_denominator():
    counts, rate = cer("", "xyz")
    assert counts.insertions == 3 and rate == 3.0
    report = CerReport()
    report.add("l", counts)
    assert report.empty_references == 1
    assert "empty reference" in report.table()


def test_dp_matches_recursive_oracle_small_exhaustive():
    strings = all_strings("abc", 4)
    oracle = RecursiveEditDistance(strings)
    for a, b in itertools.product(strings, repeat=2):
        c = edit_counts(a, b)
        assert c.distance == oracle(a, b)


@settings(max_examples=200, deadline=None)
@given(a=words, b=words)
def test_breakdown_is_consistent(a, b):
    c = edit_counts(a, b)
    assert c.substitutions + c.deletions + c.insertions == c.distance
    assert c.deletions - c.insertions == len(a) - len(b)
    assert c.ref_length == len(a)


@settings(max_examples=200, deadline=None)
@given(a=words, b=words, c=words)
def test_metric_properties(a, b, c):
    d = lambda x, y: edit_counts(x, y).distance  # noqa: E731
    assert d(a, a) == 0
    assert d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c)
    assert (d(a, b) == 0) == (a == b)


def test_corpus_cer_is_edit_weighted():
    utts = [Utterance(np.zeros((1, 1), np.float32), t, lang)
            for t, lang in [([1, 2, 3, 4], "x"), ([5], "x"), ([6, 7], "y")]]
    hyps = [[1, 2, 3, 4], [9], [6]]
    report = score(utts, hyps)
    brute_edits = sum(edit_counts(u.transcript, h).distance for u, h in zip(utts, hyps))
    brute_ref = sum(len(u.transcript) for u in utts)
    assert report.cer == brute_edits / brute_ref == 2 / 7
    assert report.language_cer("x") == 1 / 5
    assert report.language_cer("y") == 1 / 2
    # not the mean of per-utterance rates
    assert report.cer != np.mean([0, 1, 0.5])


def test_table_layout():
    report = score([Utterance(np.zeros((1, 1), np.float32), [1, 2], "base0")], [[1]])
    report.trainable_params = {"P": 128}
    lines = report.table("Entire SPT").splitlines()
    head = [c.strip() for c in lines[0].split("|")]
    row = [c.strip() for c in lines[2].split("|")]
    assert head == ["method", "base0", "avg", "#params"]
    assert row == ["Entire SPT", "50.00", "50.00", "128"]


class EchoModel:
    """Stand-in decoder: returns a fixed hypothesis per utterance length."""

    def __init__(self, table):
        self.table = table

    def greedy_decode_batch(self, feats, lang_ids, prompting):
        from langprompt.model import DecodeResult
        return [DecodeResult(list(self.table[len(x)])) for x in feats]


def test_evaluate_perfect_and_empty_models():
    utts = [Utterance(np.zeros((2 * len(t), 1), np.float32), t, "a") for t in ([1, 2], [3, 4, 5])]
    perfect = EchoModel({4: [1, 2], 6: [3, 4, 5]})
    act = lambda tag: (5, NO_PROMPTING)  # noqa: E731
    assert evaluate(perfect, act, utts).cer == 0.0
    mute = EchoModel({4: [], 6: []})
    assert evaluate(mute, act, utts).cer == 1.0


def test_evaluate_unregistered_language_raises():
    utts = [Utterance(np.zeros((2, 1), np.float32), [1], "zz")]

    def act(tag):
        raise KeyError(tag)

    with pytest.raises(KeyError):
        evaluate(EchoModel({2: [1]}), act, utts)


class FixedLid:
    def __init__(self, rows):
        self.config = TOY
        self.rows = rows

    def language_posteriors(self, feats):
        return np.array([self.rows[len(x)] for x in feats])


def test_lid_accuracy_hand_built():
    segs = [Utterance(np.zeros((l, 1), np.float32), [1], "base1") for l in (1, 2, 3)]
    biased = FixedLid({1: [0.1, 0.8, 0.1], 2: [0.2, 0.7, 0.1], 3: [0.0, 1.0, 0.0]})
    assert lid_accuracy(biased, segs) == 1.0


def test_lid_accuracy_uniform_model_votes_index_zero():
    segs = [Utterance(np.zeros((1, 1), np.float32), [1], tag) for tag in ("base0", "base1")]
    uniform = FixedLid({1: [1 / 3, 1 / 3, 1 / 3]})
    assert lid_accuracy(uniform, segs) == 0.5


def test_lid_accuracy_real_model_in_range(toy_model, rng):
    segs = [Utterance(rng.normal(size=(3, TOY.feature_dim)), [21], "base0") for _ in range(4)]
    acc = lid_accuracy(toy_model, segs)
    assert 0.0 <= acc <= 1.0
    assert isinstance(toy_model, BaseModel)
