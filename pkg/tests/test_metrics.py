import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from twinembed.cross import init_twin
from twinembed.data import STSExample, build_vocab, pad_batch
from twinembed.encoder import EncoderConfig, init_weights
from twinembed.errors import ContractError, MetricError
from twinembed.metrics import (
    attention_dump,
    cosine_density,
    bucket_cosines,
    ecls_trend,
    embedder,
    evaluate,
    layer_e_cls,
    spearman,
)

SENTS = ["the cat sat", "a dog ran far", "the dog sat", "a cat ran"]
VOCAB = build_vocab(SENTS)
CFG = EncoderConfig(n_layers=2, d=8, n_heads=2, d_ffn=16, vocab_size=len(VOCAB), max_seq_len=12, init_std=0.2)
STS = [
    STSExample("the cat sat", "the cat sat", 5.0),
    STSExample("the cat sat", "the dog sat", 3.0),
    STSExample("a dog ran far", "a cat ran", 2.0),
    STSExample("a dog ran far", "the cat sat", 0.0),
    STSExample("a cat ran", "the dog sat", 1.0),
]


def test_spearman_examples():
    assert spearman([1, 2, 3], [1, 2, 3]) == 1.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert abs(spearman([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) < 1e-12


def test_spearman_errors():
    with pytest.raises(MetricError):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(MetricError):
        spearman([1], [1])
    with pytest.raises(MetricError):
        spearman([1, 1, 1], [1, 2, 3])


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(3, 30))
def test_spearman_matches_scipy_and_is_monotone_invariant(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 5, n).astype(float)
    b = rng.standard_normal(n)
    if np.ptp(a) == 0:
        return
    ours = spearman(a, b)
    assert abs(ours - spearmanr(a, b).statistic) < 1e-12
    assert abs(spearman(np.exp(a), b) - ours) < 1e-12
    assert -1 <= ours <= 1


def test_bucket_cosines_edges_and_monotonicity():
    gold = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0]
    cos = [0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9]
    rep = bucket_cosines(cos, gold)
    assert rep.counts == [2, 1, 1, 1, 2]
    assert rep.monotonicity == 1.0
    assert rep.to_csv().splitlines()[0] == "bucket,gold_lo,gold_hi,cosine"


def test_bucket_cosines_empty_buckets():
    rep = bucket_cosines([0.1, 0.9], [0.0, 5.0])
    assert rep.medians[1] is None and rep.monotonicity == 1.0


def test_embedder_single_and_twin_shapes():
    w = init_weights(CFG, 0)
    assert embedder(w, VOCAB)(SENTS).shape == (4, 8)
    twin = init_twin(CFG, 1, 0)
    e = embedder(twin, VOCAB, batch_size=3)(SENTS)
    np.testing.assert_allclose(e, embedder(twin, VOCAB, batch_size=64)(SENTS), atol=1e-12)


def test_evaluate_report_fields():
    rep = evaluate(init_twin(CFG, 1, 0), VOCAB, STS)
    s = rep.summary()
    assert set(s) == {"spearman", "alignment", "uniformity", "e_cls_per_layer", "density_monotonicity"}
    assert len(rep.e_cls_per_layer) == CFG.n_layers
    assert -1 <= rep.spearman <= 1 and rep.uniformity <= 0


def test_attention_dump_structure(tmp_path):
    twin = init_twin(CFG, 1, 0)
    doc = attention_dump(twin, VOCAB, ["the cat sat", "a dog"], tmp_path / "a.json", per_head=True)
    assert json.loads((tmp_path / "a.json").read_text()) == doc
    # towers x layers x examples x (mean + heads)
    assert len(doc["entries"]) == 2 * 2 * 2 * 3
    for e in doc["entries"]:
        mat = np.array(e["attention"])
        assert mat.shape[0] == mat.shape[1]
        np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(e["column_sums"], mat.sum(axis=0))


def test_layer_e_cls_positive():
    v = layer_e_cls(init_weights(CFG, 0), VOCAB, SENTS)
    assert v.shape == (2,) and np.all(v > 0)


def test_ecls_trend_rows():
    models = [("a", init_twin(CFG, 1, 0)), ("b", init_twin(CFG, 1, 1)), ("c", init_twin(CFG, 1, 2))]
    rep = ecls_trend(models, VOCAB, STS)
    assert [r[0] for r in rep.rows] == ["a", "b", "c"]
    assert rep.to_csv().splitlines()[0] == "checkpoint,e_cls,spearman"
    with pytest.raises(ContractError):
        ecls_trend(models[:1], VOCAB, STS)


def test_calibrated_and_constant_density():
    gold = np.repeat(np.arange(6.0), 4)
    assert bucket_cosines(gold / 5, gold).monotonicity == 1.0
    rep = bucket_cosines(np.full(gold.size, 0.3), gold)
    assert len(set(rep.medians)) == 1
    assert sum(rep.counts) == gold.size


def test_trained_model_density_is_monotone(toy, toy_runs):
    rep = cosine_density(embedder(toy_runs["full"].bundle.model, toy.vocab), toy.sts_dev)
    assert sum(rep.counts) == len(toy.sts_dev)
    assert rep.monotonicity > 0.8


def test_attention_dump_changes_with_training(toy, toy_runs, tmp_path):
    sents = toy.sentences[:3]
    attention_dump(toy_runs["init"], toy.vocab, sents, tmp_path / "before.json")
    attention_dump(toy_runs["full"].model, toy.vocab, sents, tmp_path / "after.json")
    assert (tmp_path / "before.json").read_bytes() != (tmp_path / "after.json").read_bytes()


def test_single_token_attention_dump():
    doc = attention_dump(init_weights(CFG, 0), VOCAB, pad_batch([[1]]))
    assert all(e["attention"] == [[1.0]] for e in doc["entries"])


def test_identical_checkpoints_give_identical_trend_rows():
    m = init_twin(CFG, 1, 0)
    rep = ecls_trend([("a", m), ("b", m.copy())], VOCAB, STS)
    assert rep.rows[0][1:] == rep.rows[1][1:] and rep.correlation is None
