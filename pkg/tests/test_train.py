import math
from dataclasses import replace

import numpy as np
import pytest

from twinembed.cross import TwinModel, cael_positions, init_twin
from twinembed.data import build_vocab, encode_batch, synth_corpus
from twinembed.encoder import EncoderConfig, forward, init_weights
from twinembed.errors import ConfigError, NumericError
from twinembed.train import (
    TRACE_COLUMNS,
    TrainConfig,
    ablate,
    derive_seed,
    distill,
    encoder_macs,
    infer_embed,
    macs_and_eta,
    mean_cosine,
    modulus_mismatch,
    parse_subsets,
    seed_harness,
    smoothed,
    train,
)

LINES, DEV = synth_corpus(3, 6, 80, n_pairs=40)
VOCAB = build_vocab(LINES)
CFG = EncoderConfig(n_layers=2, d=16, n_heads=2, d_ffn=32, vocab_size=len(VOCAB), max_seq_len=32, init_std=0.1)
FAST = TrainConfig(steps=6, batch_size=4, eval_every=3, seed=1)


def run(cfg=FAST, seed=0):
    return train(init_twin(CFG, 1, seed), LINES, VOCAB, DEV, cfg)


# ---------------------------------------------------------------- config

def test_train_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(eval_every=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss_mask=())
    assert TrainConfig(loss_mask=("ictm", "nce")).loss_mask == ("nce", "ictm")


def test_parse_subsets():
    assert parse_subsets("nce,icnce,ictm;nce") == [("nce", "icnce", "ictm"), ("nce",)]
    with pytest.raises(ConfigError):
        parse_subsets("nce;;ictm")
    with pytest.raises(ConfigError):
        parse_subsets("nce,foo")


def test_derive_seed_separates_consumers():
    seeds = {derive_seed(0, c, s) for c in range(1, 6) for s in range(50)}
    assert len(seeds) == 250
    assert derive_seed(4, 2, 9) == derive_seed(4, 2, 9)


def test_smoothed():
    np.testing.assert_array_equal(smoothed([1.0, 2.0, 3.0, 4.0], 2), [1.5, 2.5, 3.5])
    with pytest.raises(ValueError):
        smoothed([1.0], 2)


# ---------------------------------------------------------------- train

def test_zero_learning_rate_leaves_weights_unchanged():
    model = init_twin(CFG, 1, 0)
    before = {k: v.data.copy() for k, v in model.params().items()}
    train(model, LINES, VOCAB, DEV, replace(FAST, learning_rate=0.0))
    for k, v in model.params().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_same_seed_gives_identical_trace_and_weights():
    a, b = run(), run()
    assert a.trace == b.trace
    for k, v in a.model.params().items():
        assert v.data.tobytes() == b.model.params()[k].data.tobytes()


def test_trace_shape_and_checkpoint_rule():
    res = run()
    assert [r["step"] for r in res.trace] == list(range(FAST.steps + 1))
    points = res.eval_points()
    assert [s for s, _ in points] == [0, 3, 6]
    assert res.bundle.best_spearman == max(v for _, v in points)
    best_step = res.bundle.step
    assert dict(points)[best_step] == res.bundle.best_spearman
    assert res.trace_csv().splitlines()[0] == ",".join(TRACE_COLUMNS)
    for row in res.trace[1:]:
        assert math.isclose(
            row["loss_total"], row["l_nce_I"] + row["l_nce_II"] + row["l_icnce"] + row["l_ictm"], rel_tol=1e-12
        )


def test_loss_mask_zeroes_disabled_terms():
    res = run(replace(FAST, steps=2, loss_mask=("nce",)))
    assert all(r["l_icnce"] == 0.0 and r["l_ictm"] == 0.0 for r in res.trace[1:])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_the_term():
    with pytest.raises(NumericError, match="loss_total|l_"):
        run(replace(FAST, steps=3, learning_rate=1e300))


def test_train_rejects_empty_dev_and_tiny_corpus():
    with pytest.raises(ConfigError):
        train(init_twin(CFG, 1, 0), LINES, VOCAB, [], FAST)
    with pytest.raises(ConfigError):
        train(init_twin(CFG, 1, 0), LINES[:2], VOCAB, DEV, FAST)


# ---------------------------------------------------------------- inference

def test_infer_embed_decomposes_into_tower_forwards():
    m = init_twin(CFG, 1, 0)
    batch = encode_batch(VOCAB, LINES[:5], CFG.max_seq_len)
    expected = forward(m.encoder_I, batch).cls_pool.data + forward(m.encoder_II, batch).cls_pool.data
    np.testing.assert_allclose(infer_embed(m, batch).data, expected, rtol=0, atol=1e-12)


def test_infer_embed_identical_towers_doubles():
    w = init_weights(CFG, 0)
    m = TwinModel(w, w.copy(), cael_positions(CFG.n_layers, 1))
    batch = encode_batch(VOCAB, LINES[:3], CFG.max_seq_len)
    np.testing.assert_array_equal(infer_embed(m, batch).data, 2 * forward(w, batch).cls_pool.data)


def test_infer_embed_batch_invariance():
    m = init_twin(CFG, 1, 0)
    alone = infer_embed(m, encode_batch(VOCAB, [LINES[0]], CFG.max_seq_len)).data[0]
    inside = infer_embed(m, encode_batch(VOCAB, LINES[:7], CFG.max_seq_len)).data[0]
    np.testing.assert_allclose(alone, inside, rtol=0, atol=1e-12)


def test_modulus_mismatch_zero_for_identical_towers_without_dropout():
    w = init_weights(replace(CFG, dropout_p=0.0), 0)
    m = TwinModel(w, w.copy(), cael_positions(CFG.n_layers, 1))
    assert modulus_mismatch(m, encode_batch(VOCAB, LINES[:4], CFG.max_seq_len)) == 0.0


# ---------------------------------------------------------------- ablation and seeds

def test_ablate_rows_share_initialisation():
    probe = encode_batch(VOCAB, LINES[:8], CFG.max_seq_len)
    cfg = replace(FAST, steps=0)
    rows = ablate([("nce",), ("nce", "icnce", "ictm")], LINES, VOCAB, DEV, CFG, 1, cfg, probe=probe)
    assert [r.loss_mask for r in rows] == [("nce",), ("nce", "icnce", "ictm")]
    # with no steps both rows are the shared initial model
    assert rows[0].best_spearman == rows[1].best_spearman
    assert rows[0].modulus_mismatch == rows[1].modulus_mismatch


def test_seed_harness_summary():
    s = seed_harness([1, 2], LINES, VOCAB, DEV, CFG, 1, replace(FAST, steps=2))
    assert s.seeds == [1, 2] and len(s.scores) == 2
    assert s.mean == pytest.approx(np.mean(s.scores)) and s.variance >= 0


# ---------------------------------------------------------------- distillation

def test_distill_never_mutates_teacher():
    teacher = init_twin(CFG, 1, 0)
    before = {k: v.data.copy() for k, v in teacher.params().items()}
    student = init_weights(CFG, 9)
    res = distill(teacher, student, LINES, VOCAB, DEV, replace(FAST, steps=4))
    for k, v in teacher.params().items():
        np.testing.assert_array_equal(v.data, before[k])
    assert res.bundle.meta["distilled"] is True
    assert all(r["mse"] >= 0 for r in res.trace[1:])


def test_distill_fixed_point_when_student_is_exact():
    # a twin whose second tower outputs zero CLS rows: teacher output == tower I's CLS
    cfg = replace(CFG, dropout_p=0.0)
    w = init_weights(cfg, 0)
    zero = w.copy()
    for name in ("layers.2.ln2.g", "layers.2.ln2.b"):
        zero.params[name].data[:] = 0.0
    teacher = TwinModel(w, zero, cael_positions(cfg.n_layers, 1))
    res = distill(teacher, w.copy(), LINES, VOCAB, DEV, replace(FAST, steps=3))
    assert all(r["mse"] == 0.0 for r in res.trace[1:])
    assert mean_cosine(res.model, teacher, VOCAB, LINES[:5]) == pytest.approx(1.0, abs=1e-12)


def test_distill_width_mismatch():
    with pytest.raises(ConfigError):
        distill(init_twin(CFG, 1, 0), init_weights(replace(CFG, d=8, d_ffn=8), 0), LINES, VOCAB, DEV, FAST)


# ---------------------------------------------------------------- cost

BASE = EncoderConfig(n_layers=12, d=768, n_heads=12, d_ffn=3072, vocab_size=10, max_seq_len=512)


def test_encoder_macs_frozen_value():
    # 12 * (4*128*768^2 + 2*128^2*768 + 2*128*768*3072)
    assert encoder_macs(BASE, 128) == 11_173_625_856


def test_macs_linear_in_towers():
    g1, e1 = macs_and_eta(BASE, 1, 128, 80.0)
    g2, e2 = macs_and_eta(BASE, 2, 128, 80.0)
    g6, _ = macs_and_eta(BASE, 6, 128, 80.0)
    assert g2 == pytest.approx(2 * g1, rel=1e-15) and g6 == pytest.approx(6 * g1, rel=1e-15)
    assert e2 == pytest.approx(e1 / 2, rel=1e-15)
    with pytest.raises(ConfigError):
        macs_and_eta(BASE, 1, 128, 101.0)


def test_snapshots_do_not_change_training():
    plain = run()
    snap = train(init_twin(CFG, 1, 0), LINES, VOCAB, DEV, FAST, snapshot_every=2)
    assert snap.trace == plain.trace
    assert [s for s, _ in snap.snapshots] == [0, 2, 4, 6]
    last = snap.snapshots[-1][1].params()
    for k, v in snap.model.params().items():
        np.testing.assert_array_equal(last[k].data, v.data)
    with pytest.raises(ConfigError):
        train(init_twin(CFG, 1, 0), LINES, VOCAB, DEV, FAST, snapshot_every=0)
