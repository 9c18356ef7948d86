"""Contrastive and tensor-modulus losses for the twin encoder.

Batched losses are means over examples. Embeddings are ``[B, d]`` tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateInputError

LOSS_TERMS = ("nce", "icnce", "ictm")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.05
    sim_clamp_eps: float = 1e-4
    uniformity_t: float = 2.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0 < self.sim_clamp_eps < 1:
            raise ConfigError(f"sim_clamp_eps must lie in (0, 1), got {self.sim_clamp_eps}")
        if self.uniformity_t <= 0:
            raise ConfigError("uniformity_t must be positive")


def info_nce(h: Tensor, h_pos: Tensor, tau: float = 0.05) -> Tensor:
    """Row i's positive is h_pos[i]; every other row of h_pos is an in-batch negative."""
    if h.shape[0] == 0:
        raise ContractError("info_nce needs at least one example")
    logits = ad.scale(ad.pairwise_cosine(h, h_pos), 1.0 / tau)
    b = h.shape[0]
    diag = ad.getitem(logits, (np.arange(b), np.arange(b)))
    return ad.mean(ad.sub(ad.logsumexp(logits), diag))


def tmc_geometric(h: Tensor, h_pos: Tensor) -> Tensor:
    """||h - h+|| / (||h|| + ||h+||) along the last axis."""
    n_h, n_p = ad.l2_norm(h), ad.l2_norm(h_pos)
    if np.any(n_h.data == 0) or np.any(n_p.data == 0):
        raise DegenerateInputError("tmc_geometric: zero-norm input")
    return ad.div(ad.l2_norm(ad.sub(h, h_pos)), ad.add(n_h, n_p))


def tmc_binary(k, t):
    """Closed form sqrt(1 + k^2 - 2kt) / (1 + k) with k = ||h+||/||h||, t = cos angle."""
    k = np.asarray(k, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(k <= 0) or np.any(np.abs(t) > 1):
        raise ContractError("tmc_binary requires k > 0 and t in [-1, 1]")
    # 1 + k^2 - 2kt >= (1 - k)^2 >= 0; the clip only absorbs rounding
    out = np.sqrt(np.maximum(1.0 + k * k - 2.0 * k * t, 0.0)) / (1.0 + k)
    return float(out) if out.ndim == 0 else out


def modulus_coefficient(h_I_L: Tensor, h_II_L: Tensor, eps: float = 1e-4) -> Tensor:
    """-log(clamp(cos(h_I, h_II), eps, 1)) per example."""
    return ad.scale(ad.log(ad.clamp(ad.cosine_sim(h_I_L, h_II_L), eps, 1.0)), -1.0)


def tmc_amended(
    h_i_P: Tensor, h_j_P_pos: Tensor, h_I_L: Tensor, h_II_L: Tensor, eps: float = 1e-4
) -> Tensor:
    """Modulus term on pooler outputs, weighted by the CLS-similarity coefficient."""
    coef = modulus_coefficient(h_I_L, h_II_L, eps)
    term = ad.mul(coef, tmc_geometric(h_i_P, h_j_P_pos))
    return ad.mean(term) if term.ndim else term


def ictm(pooler_I, pooler_I_pos, pooler_II, pooler_II_pos, h_I_L, h_II_L, eps: float = 1e-4) -> Tensor:
    """Symmetrised cross-tower modulus constraint."""
    return ad.add(
        tmc_amended(pooler_I, pooler_II_pos, h_I_L, h_II_L, eps),
        tmc_amended(pooler_II, pooler_I_pos, h_I_L, h_II_L, eps),
    )


def icnce(h_I_L: Tensor, h_II_L: Tensor, c_I_O: Tensor, c_II_O: Tensor, tau: float, r: int) -> Tensor:
    """Cross-tower InfoNCE anchored on tower I (r=1) or tower II (r=0)."""
    if r not in (0, 1):
        raise ContractError(f"gate r must be 0 or 1, got {r}")
    if r == 1:
        return ad.add(info_nce(h_I_L, h_II_L, tau), info_nce(c_I_O, c_II_O, tau))
    return ad.add(info_nce(h_II_L, h_I_L, tau), info_nce(c_II_O, c_I_O, tau))


@dataclass
class LossReport:
    total: Tensor
    l_nce_I: float
    l_nce_II: float
    l_icnce: float
    l_ictm: float
    terms: dict[str, Tensor] = field(default_factory=dict, repr=False)

    @property
    def has_grad(self) -> bool:
        return self.total.requires_grad

    def values(self) -> dict[str, float]:
        return {
            "loss_total": float(self.total.data),
            "l_nce_I": self.l_nce_I,
            "l_nce_II": self.l_nce_II,
            "l_icnce": self.l_icnce,
            "l_ictm": self.l_ictm,
        }


def total_loss(out1, out2, cfg: LossConfig, r: int, mask=LOSS_TERMS) -> LossReport:
    """Sum of the enabled terms over two stochastic twin passes.

    ``out1``/``out2`` are ``TwinOutputs``; the cross branch and the modulus
    coefficient are taken from the first pass.
    """
    mask = set(mask)
    unknown = mask - set(LOSS_TERMS)
    if unknown or not mask:
        raise ConfigError(f"loss mask must be a nonempty subset of {LOSS_TERMS}, got {sorted(mask)}")
    terms: dict[str, Tensor] = {}
    h_I, h_II = out1.I.cls_pool, out1.II.cls_pool
    if "nce" in mask:
        terms["l_nce_I"] = info_nce(h_I, out2.I.cls_pool, cfg.tau)
        terms["l_nce_II"] = info_nce(h_II, out2.II.cls_pool, cfg.tau)
    if "icnce" in mask:
        if out1.cross is None:
            raise ContractError("icnce needs the cross branch of the first pass")
        terms["l_icnce"] = icnce(h_I, h_II, out1.cross.c_I, out1.cross.c_II, cfg.tau, r)
    if "ictm" in mask:
        terms["l_ictm"] = ictm(
            out1.I.pooler_out, out2.I.pooler_out, out1.II.pooler_out, out2.II.pooler_out,
            h_I, h_II, cfg.sim_clamp_eps,
        )
    parts = list(terms.values())
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    get = lambda k: float(terms[k].data) if k in terms else 0.0  # noqa: E731
    return LossReport(total, get("l_nce_I"), get("l_nce_II"), get("l_icnce"), get("l_ictm"), terms)


# ---------------------------------------------------------------- embedding quality

def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("cannot project a zero vector onto the unit sphere")
    return x / n


def alignment(x, x_pos) -> float:
    """Mean squared distance between positive pairs after unit normalisation."""
    a = _unit(np.asarray(getattr(x, "data", x), dtype=np.float64))
    b = _unit(np.asarray(getattr(x_pos, "data", x_pos), dtype=np.float64))
    return float(((a - b) ** 2).sum(axis=-1).mean())


def uniformity(x, t: float = 2.0) -> float:
    """log mean exp(-t ||f(x) - f(y)||^2) over distinct ordered pairs."""
    u = _unit(np.asarray(getattr(x, "data", x), dtype=np.float64))
    b = u.shape[0]
    if b < 2:
        raise ContractError("uniformity needs at least two embeddings")
    sq = np.maximum(2.0 - 2.0 * (u @ u.T), 0.0)
    off = ~np.eye(b, dtype=bool)
    vals = -t * sq[off]
    m = vals.max()
    return float(m + np.log(np.exp(vals - m).mean()))
