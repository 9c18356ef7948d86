"""STS evaluation, cosine-density buckets, attention dumps and E_CLS trends."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .autodiff import no_grad
from .cross import TOWERS, TwinModel, cls_energy_weight, twin_forward
from .data import Batch, STSExample, Vocab, encode_batch
from .encoder import EncoderWeights, forward
from .errors import ArtifactIOError, ContractError, MetricError
from .losses import alignment, uniformity

EmbedFn = Callable[[Sequence[str]], np.ndarray]


def spearman(pred, gold) -> float:
    """Rank correlation with average ranks for ties."""
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape or pred.ndim != 1:
        raise MetricError(f"spearman: length mismatch {pred.shape} vs {gold.shape}")
    if pred.size < 2:
        raise MetricError("spearman needs at least two points")
    rp, rg = rankdata(pred), rankdata(gold)
    rp -= rp.mean()
    rg -= rg.mean()
    denom = np.sqrt((rp * rp).sum() * (rg * rg).sum())
    if denom == 0:
        raise MetricError("spearman undefined for constant input")
    return float(np.clip((rp * rg).sum() / denom, -1.0, 1.0))


# ---------------------------------------------------------------- embedding

def infer_embed_array(model: TwinModel, batch) -> np.ndarray:
    with no_grad():
        out = twin_forward(model, batch, dropout_on=False)
    return out.I.cls_pool.data + out.II.cls_pool.data


def embedder(model: TwinModel | EncoderWeights, vocab: Vocab, batch_size: int = 64) -> EmbedFn:
    """Sentence -> inference embedding (twin: summed CLS; single tower: CLS)."""
    max_len = model.config.max_seq_len

    def embed(sentences: Sequence[str]) -> np.ndarray:
        chunks = []
        for start in range(0, len(sentences), batch_size):
            batch = encode_batch(vocab, list(sentences[start : start + batch_size]), max_len)
            if isinstance(model, TwinModel):
                chunks.append(infer_embed_array(model, batch))
            else:
                with no_grad():
                    chunks.append(forward(model, batch).cls_pool.data)
        return np.concatenate(chunks, axis=0)

    return embed


def _cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def pair_cosines(embed: EmbedFn, sts: Sequence[STSExample]) -> np.ndarray:
    sents = sorted({s for ex in sts for s in (ex.sentence_a, ex.sentence_b)})
    index = {s: i for i, s in enumerate(sents)}
    emb = embed(sents)
    a = emb[[index[ex.sentence_a] for ex in sts]]
    b = emb[[index[ex.sentence_b] for ex in sts]]
    return _cosines(a, b)


def sts_spearman(embed: EmbedFn, sts: Sequence[STSExample]) -> float:
    return spearman(pair_cosines(embed, sts), [ex.gold for ex in sts])


# ---------------------------------------------------------------- density

@dataclass
class DensityReport:
    edges: np.ndarray
    buckets: list[np.ndarray]
    medians: list[float | None]
    monotonicity: float

    @property
    def counts(self) -> list[int]:
        return [len(b) for b in self.buckets]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "gold_lo", "gold_hi", "cosine"])
        for i, vals in enumerate(self.buckets):
            for v in vals:
                w.writerow([i, f"{self.edges[i]:g}", f"{self.edges[i + 1]:g}", repr(float(v))])
        return buf.getvalue()


def bucket_cosines(cosines, gold, n_buckets: int = 5, lo: float = 0.0, hi: float = 5.0) -> DensityReport:
    """Group predicted cosines by equal-width gold buckets."""
    cosines = np.asarray(cosines, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    edges = np.linspace(lo, hi, n_buckets + 1)
    idx = np.clip(((gold - lo) / (hi - lo) * n_buckets).astype(int), 0, n_buckets - 1)
    buckets = [cosines[idx == i] for i in range(n_buckets)]
    medians = [float(np.median(b)) if len(b) else None for b in buckets]
    filled = [(i, m) for i, m in enumerate(medians) if m is not None]
    try:
        mono = spearman([i for i, _ in filled], [m for _, m in filled])
    except MetricError:
        mono = float("nan")
    return DensityReport(edges, buckets, medians, mono)


def cosine_density(embed: EmbedFn, sts: Sequence[STSExample], n_buckets: int = 5) -> DensityReport:
    return bucket_cosines(pair_cosines(embed, sts), [ex.gold for ex in sts], n_buckets)


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    spearman: float
    alignment: float
    uniformity: float
    e_cls_per_layer: list[float]
    density: DensityReport | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "spearman": self.spearman,
            "alignment": self.alignment,
            "uniformity": self.uniformity,
            "e_cls_per_layer": self.e_cls_per_layer,
            "density_monotonicity": None if self.density is None else self.density.monotonicity,
        }


def layer_e_cls(model: TwinModel | EncoderWeights, vocab: Vocab, sentences: Sequence[str], batch_size: int = 64) -> np.ndarray:
    """Mean E_CLS per layer over sentences (and towers, for a twin)."""
    towers = model.towers() if isinstance(model, TwinModel) else (model,)
    sums = np.zeros(towers[0].config.n_layers)
    count = 0
    for start in range(0, len(sentences), batch_size):
        batch = encode_batch(vocab, list(sentences[start : start + batch_size]), towers[0].config.max_seq_len)
        for w in towers:
            with no_grad():
                out = forward(w, batch)
            for li, att in enumerate(out.attentions):
                sums[li] += cls_energy_weight(att.ct, batch.attention_mask).sum()
        count += batch.size * len(towers)
    return sums / count


def evaluate(model: TwinModel | EncoderWeights, vocab: Vocab, sts: Sequence[STSExample], t: float = 2.0) -> EvalReport:
    """Spearman on all pairs; alignment over pairs with gold >= 4; uniformity over all sentences."""
    embed = embedder(model, vocab)
    cos = pair_cosines(embed, sts)
    gold = [ex.gold for ex in sts]
    pos = [ex for ex in sts if ex.gold >= 4.0]
    align = alignment(embed([e.sentence_a for e in pos]), embed([e.sentence_b for e in pos])) if pos else float("nan")
    sents = sorted({s for ex in sts for s in (ex.sentence_a, ex.sentence_b)})
    return EvalReport(
        spearman(cos, gold),
        align,
        uniformity(embed(sents), t),
        layer_e_cls(model, vocab, sents).tolist(),
        bucket_cosines(cos, gold),
    )


def attention_dump(
    model: TwinModel | EncoderWeights, vocab: Vocab, sentences: Sequence[str] | Batch, out_path=None, per_head: bool = False
) -> dict:
    """Inference-mode attention matrices per (tower, layer, head), pads trimmed.

    ``sentences`` may also be an already encoded batch.

    Matrices are head-averaged unless ``per_head``. Each entry carries
    ``column_sums`` (attention mass received per key token) and the layer's
    E_CLS for that sentence.
    """
    towers = model.towers() if isinstance(model, TwinModel) else (model,)
    if isinstance(sentences, Batch):
        batch = sentences
    else:
        batch = encode_batch(vocab, list(sentences), towers[0].config.max_seq_len)
    lengths = batch.lengths()
    doc = {"sentences": [], "entries": []}
    for b, n in enumerate(lengths):
        doc["sentences"].append(vocab.decode(batch.token_ids[b, :n]))
    for name, w in zip(TOWERS, towers):
        with no_grad():
            out = forward(w, batch)
        for li, att in enumerate(out.attentions, 1):
            # E_CLS is undefined without a non-CLS token; such rows get null
            e_cls = [None] * batch.size
            rows = np.flatnonzero(batch.attention_mask[:, 1:].sum(axis=1) > 0)
            if rows.size:
                for b, v in zip(rows, cls_energy_weight(att.ct.data[rows], batch.attention_mask[rows])):
                    e_cls[b] = float(v)
            for b, n in enumerate(lengths):
                probs = att.sa.data[b, :, :n, :n]
                heads = [("mean", probs.mean(axis=0))]
                if per_head:
                    heads += [(h, probs[h]) for h in range(probs.shape[0])]
                for head, mat in heads:
                    doc["entries"].append({
                        "tower": name,
                        "layer": li,
                        "head": head,
                        "example": b,
                        "attention": mat.tolist(),
                        "column_sums": mat.sum(axis=0).tolist(),
                        "e_cls": e_cls[b],
                    })
    if out_path is not None:
        try:
            Path(out_path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
        except OSError as exc:
            raise ArtifactIOError(f"cannot write attention dump {out_path}: {exc}") from exc
    return doc


@dataclass
class TrendReport:
    rows: list[tuple[str, float, float]]  # (checkpoint id, mean E_CLS, dev spearman)
    correlation: float | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["checkpoint", "e_cls", "spearman"])
        for cid, e, s in self.rows:
            w.writerow([cid, repr(e), repr(s)])
        return buf.getvalue()


def ecls_trend(models: Sequence[tuple[str, TwinModel | EncoderWeights]], vocab: Vocab, sts_dev: Sequence[STSExample]) -> TrendReport:
    """Mean E_CLS against dev Spearman across checkpoints, plus their rank correlation."""
    if len(models) < 2:
        raise ContractError("ecls_trend needs at least two checkpoints")
    sents = sorted({s for ex in sts_dev for s in (ex.sentence_a, ex.sentence_b)})
    rows = []
    for cid, m in models:
        rows.append((cid, float(layer_e_cls(m, vocab, sents).mean()), sts_spearman(embedder(m, vocab), sts_dev)))
    try:
        corr = spearman([r[1] for r in rows], [r[2] for r in rows])
    except MetricError:
        corr = None
    return TrendReport(rows, corr)
