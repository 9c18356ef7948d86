import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinembed import autodiff as ad
from twinembed.autodiff import Tensor
from twinembed.cross import init_twin, twin_forward
from twinembed.data import pad_batch
from twinembed.encoder import EncoderConfig
from twinembed.errors import ConfigError, ContractError, DegenerateInputError
from twinembed.losses import (
    LossConfig,
    alignment,
    icnce,
    ictm,
    info_nce,
    modulus_coefficient,
    tmc_amended,
    tmc_binary,
    tmc_geometric,
    total_loss,
    uniformity,
)

seeds = st.integers(0, 10_000)


def brute_info_nce(h, p, tau):
    total = 0.0
    for i in range(len(h)):
        cos = [h[i] @ p[j] / (np.linalg.norm(h[i]) * np.linalg.norm(p[j])) for j in range(len(p))]
        total += -math.log(math.exp(cos[i] / tau) / sum(math.exp(c / tau) for c in cos))
    return total / len(h)


# ---------------------------------------------------------------- InfoNCE

@settings(max_examples=25)
@given(seeds, st.integers(1, 6))
def test_info_nce_matches_brute_force(seed, b):
    rng = np.random.default_rng(seed)
    h, p = rng.standard_normal((b, 5)), rng.standard_normal((b, 5))
    got = info_nce(Tensor(h), Tensor(p), 0.05).item()
    assert abs(got - brute_info_nce(h, p, 0.05)) <= 1e-10 * max(1.0, abs(got))


def test_info_nce_single_example_is_zero():
    v = Tensor(np.random.default_rng(0).standard_normal((1, 4)))
    assert info_nce(v, Tensor(np.random.default_rng(1).standard_normal((1, 4)))).item() == 0.0


def test_info_nce_orthogonal_identical_batch():
    b = 4
    expected = math.log(1 + (b - 1) * math.exp(-1 / 0.05))
    assert abs(info_nce(Tensor(np.eye(b)), Tensor(np.eye(b))).item() - expected) < 1e-12


@settings(max_examples=20)
@given(seeds, st.floats(0.1, 50.0))
def test_info_nce_row_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    h, p = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    a = info_nce(Tensor(h), Tensor(p)).item()
    assert abs(info_nce(Tensor(c * h), Tensor(p)).item() - a) <= 1e-9 * max(1, abs(a))


@settings(max_examples=20)
@given(seeds)
def test_info_nce_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    h, p = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    perm = rng.permutation(5)
    a = info_nce(Tensor(h), Tensor(p)).item()
    assert abs(info_nce(Tensor(h[perm]), Tensor(p[perm])).item() - a) <= 1e-10 * max(1, abs(a))


def test_info_nce_gradient():
    rng = np.random.default_rng(2)
    p = Tensor(rng.standard_normal((3, 4)))
    assert ad.check_gradients(lambda h: info_nce(h, p, 0.5), rng.standard_normal((3, 4))) < 1e-6


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(tau=0)
    with pytest.raises(ConfigError):
        LossConfig(sim_clamp_eps=1.0)


# ---------------------------------------------------------------- tensor modulus

def test_tmc_geometric_examples():
    assert tmc_geometric(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).item() == 0.0
    assert tmc_geometric(Tensor([1.0, 0.0]), Tensor([-1.0, 0.0])).item() == 1.0
    assert tmc_geometric(Tensor([1.0, 0.0]), Tensor([2.0, 0.0])).item() == pytest.approx(1 / 3, abs=1e-15)


def test_tmc_binary_examples():
    assert tmc_binary(1.0, 1.0) == 0.0
    assert tmc_binary(1.0, -1.0) == 1.0
    assert tmc_binary(2.0, 1.0) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ContractError):
        tmc_binary(0.0, 0.5)


@settings(max_examples=50)
@given(seeds)
def test_tmc_binary_equals_geometric(seed):
    rng = np.random.default_rng(seed)
    h, p = rng.standard_normal(6), rng.standard_normal(6)
    k = np.linalg.norm(p) / np.linalg.norm(h)
    t = h @ p / (np.linalg.norm(h) * np.linalg.norm(p))
    assert abs(tmc_binary(k, t) - tmc_geometric(Tensor(h), Tensor(p)).item()) < 1e-12


@given(st.floats(1e-3, 1e3), st.floats(-1, 1))
def test_tmc_binary_bounds_and_symmetry(k, t):
    v = tmc_binary(k, t)
    assert -1e-15 <= v <= 1 + 1e-12
    assert abs(v - tmc_binary(1 / k, t)) < 1e-9


def test_tmc_geometric_rejects_zero_vector():
    with pytest.raises(DegenerateInputError):
        tmc_geometric(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_modulus_coefficient_clamps():
    a = Tensor([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    b = Tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    coef = modulus_coefficient(a, b).data
    assert coef[0] == 0.0
    assert coef[1] == pytest.approx(-math.log(1e-4), rel=1e-14)
    assert coef[2] == pytest.approx(-math.log(1e-4), rel=1e-14)


def test_amended_tmc_vanishes_for_aligned_cls():
    rng = np.random.default_rng(3)
    h = Tensor(rng.standard_normal((3, 4)))
    hp, hq = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))
    assert tmc_amended(hp, hq, h, h).item() == 0.0


def test_amended_tmc_gradient_flows_through_coefficient():
    rng = np.random.default_rng(4)
    hp, hq = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))
    h2 = Tensor(rng.standard_normal((3, 4)) + 2.0)
    x0 = rng.standard_normal((3, 4)) + 2.0
    assert ad.check_gradients(lambda h1: tmc_amended(hp, hq, h1, h2), x0) < 1e-6
    leaf = Tensor(x0, requires_grad=True)
    ad.backward(tmc_amended(hp, hq, leaf, h2))
    assert np.abs(leaf.grad).max() > 0


def test_ictm_is_symmetric_in_towers():
    rng = np.random.default_rng(5)
    pI, pIp, pII, pIIp = (Tensor(rng.standard_normal((3, 4))) for _ in range(4))
    hI, hII = Tensor(rng.standard_normal((3, 4)) + 1), Tensor(rng.standard_normal((3, 4)) + 1)
    a = ictm(pI, pIp, pII, pIIp, hI, hII).item()
    b = ictm(pII, pIIp, pI, pIp, hII, hI).item()
    assert abs(a - b) < 1e-12


# ---------------------------------------------------------------- ICNCE

def test_icnce_gate_picks_anchor():
    rng = np.random.default_rng(6)
    hI, hII, cI, cII = (Tensor(rng.standard_normal((4, 5))) for _ in range(4))
    one = icnce(hI, hII, cI, cII, 0.05, 1).item()
    zero = icnce(hI, hII, cI, cII, 0.05, 0).item()
    assert abs(one - (info_nce(hI, hII).item() + info_nce(cI, cII).item())) < 1e-12
    assert abs(zero - (info_nce(hII, hI).item() + info_nce(cII, cI).item())) < 1e-12
    with pytest.raises(ContractError):
        icnce(hI, hII, cI, cII, 0.05, 2)


# ---------------------------------------------------------------- total

CFG = EncoderConfig(n_layers=2, d=8, n_heads=2, d_ffn=16, vocab_size=20, max_seq_len=10, init_std=0.2)
BATCH = pad_batch([[1, 5, 6, 2], [1, 7, 2], [1, 9, 10, 11, 2]])


def passes():
    m = init_twin(CFG, 2, 0)
    return twin_forward(m, BATCH, seed=1, dropout_on=True), twin_forward(m, BATCH, seed=2, dropout_on=True, cross=False)


def test_total_is_sum_of_terms():
    o1, o2 = passes()
    rep = total_loss(o1, o2, LossConfig(), r=1)
    v = rep.values()
    parts = v["l_nce_I"] + v["l_nce_II"] + v["l_icnce"] + v["l_ictm"]
    assert abs(v["loss_total"] - parts) < 1e-12
    assert rep.has_grad


def test_total_masks():
    o1, o2 = passes()
    rep = total_loss(o1, o2, LossConfig(), r=0, mask=("nce",))
    assert rep.l_icnce == 0.0 and rep.l_ictm == 0.0
    assert abs(rep.total.item() - rep.l_nce_I - rep.l_nce_II) < 1e-12
    with pytest.raises(ConfigError):
        total_loss(o1, o2, LossConfig(), r=0, mask=())
    with pytest.raises(ConfigError):
        total_loss(o1, o2, LossConfig(), r=0, mask=("bogus",))
    with pytest.raises(ContractError):
        total_loss(o2, o1, LossConfig(), r=0, mask=("icnce",))


# ---------------------------------------------------------------- alignment and uniformity

def test_alignment_examples():
    assert alignment(np.eye(3), np.eye(3)) == 0.0
    assert alignment(np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]])) == 4.0


def test_uniformity_brute_force():
    x = np.random.default_rng(7).standard_normal((5, 3))
    u = x / np.linalg.norm(x, axis=1, keepdims=True)
    vals = [math.exp(-2 * np.sum((u[i] - u[j]) ** 2)) for i in range(5) for j in range(5) if i != j]
    assert abs(uniformity(x) - math.log(np.mean(vals))) < 1e-12


def test_uniformity_antipodal_pair():
    assert abs(uniformity(np.array([[1.0, 0.0], [-1.0, 0.0]])) + 8.0) < 1e-12
    with pytest.raises(ContractError):
        uniformity(np.ones((1, 3)))


@settings(max_examples=20)
@given(seeds)
def test_uniformity_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 4))
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert abs(uniformity(x @ q) - uniformity(x)) < 1e-10
    assert uniformity(x) <= 1e-12
