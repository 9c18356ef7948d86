"""Twin encoders joined by cross-attention encoder layers (CAELs).

At a CAEL j each tower reuses its own attention probabilities to weight the
*other* tower's value projections. The result is post-processed with the
current tower's residual, FFN and layer norms (no new weights) to form that
CAEL's cross hidden state. Cross states are side products: they never feed
back into the primitive streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .encoder import (
    EmbeddingOutputs,
    EncoderConfig,
    EncoderWeights,
    Layer,
    dropout_rng,
    forward,
    init_weights,
    post_attention,
    project_context,
)
from .errors import ConfigError, ContractError, DegenerateInputError

TOWERS = ("I", "II")


@dataclass(frozen=True)
class CaelPlacement:
    k: int
    positions: tuple[int, ...]


def cael_positions(n_layers: int, k: int) -> CaelPlacement:
    """Layers i in [1, n_layers] with i mod k == 0."""
    if not 1 <= k <= n_layers:
        raise ConfigError(f"CAEL interval k={k} must lie in [1, {n_layers}]")
    return CaelPlacement(k, tuple(i for i in range(1, n_layers + 1) if i % k == 0))


@dataclass
class TwinModel:
    encoder_I: EncoderWeights
    encoder_II: EncoderWeights
    placement: CaelPlacement

    def __post_init__(self):
        if self.encoder_I.config != self.encoder_II.config:
            raise ConfigError("both towers must share one EncoderConfig")
        if self.placement != cael_positions(self.config.n_layers, self.placement.k):
            raise ConfigError("placement does not match the layer count")

    @property
    def config(self) -> EncoderConfig:
        return self.encoder_I.config

    def towers(self) -> tuple[EncoderWeights, EncoderWeights]:
        return self.encoder_I, self.encoder_II

    def params(self) -> dict[str, Tensor]:
        out = {f"I.{k}": v for k, v in self.encoder_I.params.items()}
        out.update({f"II.{k}": v for k, v in self.encoder_II.params.items()})
        return out

    def copy(self) -> "TwinModel":
        return TwinModel(self.encoder_I.copy(), self.encoder_II.copy(), self.placement)


def init_twin(cfg: EncoderConfig, k: int, seed: int) -> TwinModel:
    """Towers seeded independently from one base seed."""
    return TwinModel(init_weights(cfg, seed), init_weights(cfg, seed + 1), cael_positions(cfg.n_layers, k))


@dataclass
class CrossOutputs:
    per_cael: dict[int, tuple[Tensor, Tensor]]  # layer -> (tower I, tower II) cross hidden states
    c_I: Tensor  # [B, d] CLS of the last CAEL's cross state, tower I
    c_II: Tensor


@dataclass
class TwinOutputs:
    I: EmbeddingOutputs
    II: EmbeddingOutputs
    cross: CrossOutputs | None


def cross_context(
    sa_self: Tensor,
    v_other: Tensor,
    layer_self: Layer,
    j: int | None = None,
    placement: CaelPlacement | None = None,
) -> Tensor:
    """CACT = SA_self . V_other per head, concatenated and output-projected."""
    if placement is not None and j not in placement.positions:
        raise ContractError(f"layer {j} is not a CAEL position {placement.positions}")
    return project_context(ad.matmul(sa_self, v_other), layer_self)


# stream ids for the counter-based dropout split
STREAM_I, STREAM_II, STREAM_CROSS_I, STREAM_CROSS_II = 0, 1, 2, 3


def twin_forward(
    model: TwinModel, batch: Batch, seed: int = 0, dropout_on: bool = False, cross: bool | None = None
) -> TwinOutputs:
    """Both primitive streams plus, when ``cross`` (default: ``dropout_on``), the cross branch."""
    out_I = forward(model.encoder_I, batch, seed, dropout_on, stream=STREAM_I)
    out_II = forward(model.encoder_II, batch, seed, dropout_on, stream=STREAM_II)
    if cross is None:
        cross = dropout_on
    if not cross:
        return TwinOutputs(out_I, out_II, None)
    cfg = model.config
    rngs = (dropout_rng(seed, STREAM_CROSS_I, dropout_on), dropout_rng(seed, STREAM_CROSS_II, dropout_on))
    p = cfg.dropout_p if dropout_on else 0.0
    outs = (out_I, out_II)
    per_cael = {}
    for j in model.placement.positions:
        states = []
        for n, (w, rng) in enumerate(zip(model.towers(), rngs)):
            me, other = outs[n], outs[1 - n]
            layer = w.layer(j)
            cact = cross_context(me.attentions[j - 1].sa_used, other.attentions[j - 1].values, layer)
            states.append(post_attention(layer, me.hidden_states[j - 1], cact, cfg.ln_eps, rng, p))
        per_cael[j] = (states[0], states[1])
    last_I, last_II = per_cael[model.placement.positions[-1]]
    c_I = ad.getitem(last_I, (slice(None), 0))
    c_II = ad.getitem(last_II, (slice(None), 0))
    return TwinOutputs(out_I, out_II, CrossOutputs(per_cael, c_I, c_II))


def cls_energy_weight(context, mask: np.ndarray) -> np.ndarray:
    """Per-example ||CLS row||_2 / ||other non-pad rows||_F of a [B, n, d] context tensor."""
    ctx = np.asarray(getattr(context, "data", context), dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    others = ctx[:, 1:, :] * mask[:, 1:, None]
    denom = np.sqrt((others * others).sum(axis=(1, 2)))
    if np.any(mask[:, 1:].sum(axis=1) == 0) or np.any(denom == 0):
        raise DegenerateInputError("E_CLS needs at least one non-CLS token with nonzero state")
    return np.linalg.norm(ctx[:, 0, :], axis=-1) / denom


def mean_cls_energy(outputs: EmbeddingOutputs, mask: np.ndarray) -> np.ndarray:
    """Batch-mean E_CLS for each layer's output-projected context tensor."""
    return np.array([cls_energy_weight(att.ct, mask).mean() for att in outputs.attentions])
