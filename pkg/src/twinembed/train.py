"""Twin training loop, loss ablation, distillation and inference-cost accounting."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .checkpoint import CheckpointBundle
from .cross import TwinModel, init_twin, twin_forward
from .data import Batch, STSExample, Vocab, make_batches
from .encoder import EncoderConfig, EncoderWeights, forward
from .errors import ConfigError, NumericError
from .losses import LOSS_TERMS, LossConfig, total_loss
from .metrics import embedder, infer_embed_array, sts_spearman
from .optim import Adam

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "loss_total", "l_nce_I", "l_nce_II", "l_icnce", "l_ictm", "dev_spearman")


def derive_seed(*keys: int) -> int:
    """Counter-based split of one seed into independent per-consumer seeds."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


# consumer ids for derive_seed
_SHUFFLE, _PASS1, _PASS2, _GATE, _PROBE = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    eval_every: int = 20
    seed: int = 0
    loss_mask: tuple[str, ...] = LOSS_TERMS
    tau: float = 0.05
    sim_clamp_eps: float = 1e-4

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        mask = tuple(self.loss_mask)
        if not mask or set(mask) - set(LOSS_TERMS):
            raise ConfigError(f"loss_mask must be a nonempty subset of {LOSS_TERMS}, got {mask}")
        object.__setattr__(self, "loss_mask", tuple(t for t in LOSS_TERMS if t in mask))

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, sim_clamp_eps=self.sim_clamp_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_mask"] = list(self.loss_mask)
        return d


@dataclass
class TrainResult:
    bundle: CheckpointBundle
    trace: list[dict]
    model: TwinModel | EncoderWeights  # final (last-step) weights
    snapshots: list[tuple[int, TwinModel]] = field(default_factory=list)

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace, TRACE_COLUMNS)

    def eval_points(self) -> list[tuple[int, float]]:
        return [(r["step"], r["dev_spearman"]) for r in self.trace if r.get("dev_spearman") is not None]


def trace_to_csv(trace: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in trace:
        w.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return buf.getvalue()


def batch_stream(sentences: list[str], vocab: Vocab, batch_size: int, max_len: int, seed: int) -> Iterator[Batch]:
    """Endless sequence of shuffled epochs."""
    if len(sentences) < batch_size:
        raise ConfigError(f"corpus has {len(sentences)} sentences, fewer than one batch of {batch_size}")
    epoch = 0
    while True:
        yield from make_batches(sentences, vocab, batch_size, max_len, derive_seed(seed, _SHUFFLE, epoch))
        epoch += 1


def _check_finite(report, step: int) -> None:
    for name, value in report.values().items():
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}: {name}={value}")


def train(
    model: TwinModel,
    sentences: list[str],
    vocab: Vocab,
    sts_dev: Sequence[STSExample],
    cfg: TrainConfig,
    snapshot_every: int | None = None,
) -> TrainResult:
    """Optimise the twin model in place; keep the best dev-Spearman snapshot.

    Evaluation happens at step 0 (untrained), every ``eval_every`` steps and at
    the final step. With ``snapshot_every``, copies of the model at step 0 and
    every that many steps are kept as well.
    """
    if snapshot_every is not None and snapshot_every < 1:
        raise ConfigError(f"snapshot_every must be >= 1, got {snapshot_every}")
    if not sts_dev:
        raise ConfigError("dev set must be nonempty")
    params = model.params()
    opt = Adam(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    stream = batch_stream(sentences, vocab, cfg.batch_size, model.config.max_seq_len, cfg.seed)
    loss_cfg = cfg.loss_config
    use_cross = "icnce" in cfg.loss_mask

    def dev_score() -> float:
        return sts_spearman(embedder(model, vocab), sts_dev)

    best_score = dev_score()
    best = (model.copy(), 0)
    trace = [{"step": 0, "dev_spearman": best_score}]
    snapshots = [(0, model.copy())] if snapshot_every else []
    for step in range(1, cfg.steps + 1):
        batch = next(stream)
        out1 = twin_forward(model, batch, derive_seed(cfg.seed, _PASS1, step), True, cross=use_cross)
        out2 = twin_forward(model, batch, derive_seed(cfg.seed, _PASS2, step), True, cross=False)
        gate = int(np.random.default_rng(derive_seed(cfg.seed, _GATE, step)).integers(2))
        report = total_loss(out1, out2, loss_cfg, gate, cfg.loss_mask)
        _check_finite(report, step)
        opt.zero_grad()
        ad.backward(report.total)
        opt.step()
        row = {"step": step, **report.values(), "dev_spearman": None}
        if step % cfg.eval_every == 0 or step == cfg.steps:
            score = dev_score()
            row["dev_spearman"] = score
            if score > best_score:
                best_score, best = score, (model.copy(), step)
            log.info("step %d loss %.4f dev %.4f", step, row["loss_total"], score)
        if snapshot_every and step % snapshot_every == 0:
            snapshots.append((step, model.copy()))
        trace.append(row)
    bundle = CheckpointBundle(best[0], vocab, best_score, best[1], {"train": cfg.to_dict()})
    return TrainResult(bundle, trace, model, snapshots)


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError(f"need at least {window} values, got {len(v)}")
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


# ---------------------------------------------------------------- analysis helpers

def modulus_mismatch(model: TwinModel, batch: Batch, seed: int = 0) -> float:
    """mean | ||h_I^P|| - ||h_II^P+|| | / mean norm over two dropout passes."""
    with no_grad():
        a = twin_forward(model, batch, derive_seed(seed, _PROBE, 1), True, cross=False)
        b = twin_forward(model, batch, derive_seed(seed, _PROBE, 2), True, cross=False)
    n_I = np.linalg.norm(a.I.pooler_out.data, axis=-1)
    n_II = np.linalg.norm(b.II.pooler_out.data, axis=-1)
    return float(np.abs(n_I - n_II).mean() / (0.5 * (n_I + n_II)).mean())


def infer_embed(model: TwinModel, batch: Batch) -> Tensor:
    """Inference output: summed CLS poolings of both towers, dropout and cross branch off."""
    return Tensor(infer_embed_array(model, batch))


# ---------------------------------------------------------------- ablation & seeds

@dataclass
class AblationRow:
    loss_mask: tuple[str, ...]
    best_spearman: float
    final_spearman: float
    modulus_mismatch: float


def ablate(
    subsets: Sequence[Sequence[str]],
    sentences: list[str],
    vocab: Vocab,
    sts_dev: Sequence[STSExample],
    model_cfg: EncoderConfig,
    k: int,
    cfg: TrainConfig,
    init_seed: int = 0,
    probe: Batch | None = None,
) -> list[AblationRow]:
    """Train one model per loss subset from a shared initialisation and seed."""
    base = init_twin(model_cfg, k, init_seed)
    rows = []
    for subset in subsets:
        run_cfg = replace(cfg, loss_mask=tuple(subset))
        result = train(base.copy(), sentences, vocab, sts_dev, run_cfg)
        points = result.eval_points()
        mm = modulus_mismatch(result.model, probe, cfg.seed) if probe is not None else float("nan")
        rows.append(AblationRow(run_cfg.loss_mask, result.bundle.best_spearman, points[-1][1], mm))
    return rows


def parse_subsets(text: str) -> list[tuple[str, ...]]:
    """'nce,icnce,ictm;nce' -> [('nce','icnce','ictm'), ('nce',)]."""
    out = []
    for group in text.split(";"):
        terms = tuple(t.strip().lower() for t in group.split(",") if t.strip())
        if not terms or set(terms) - set(LOSS_TERMS):
            raise ConfigError(f"bad loss subset {group!r}; terms are {LOSS_TERMS}")
        out.append(terms)
    return out


@dataclass
class SeedSummary:
    seeds: list[int]
    scores: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def variance(self) -> float:
        return float(np.var(self.scores))


def seed_harness(
    seeds: Sequence[int],
    sentences: list[str],
    vocab: Vocab,
    sts_dev: Sequence[STSExample],
    model_cfg: EncoderConfig,
    k: int,
    cfg: TrainConfig,
) -> SeedSummary:
    """Best dev Spearman per seed (seed drives both init and training randomness)."""
    scores = []
    for s in seeds:
        result = train(init_twin(model_cfg, k, s), sentences, vocab, sts_dev, replace(cfg, seed=s))
        scores.append(result.bundle.best_spearman)
    return SeedSummary(list(seeds), scores)


# ---------------------------------------------------------------- distillation

DISTILL_COLUMNS = ("step", "mse", "dev_spearman")


def distill(
    teacher: TwinModel,
    student: EncoderWeights,
    sentences: list[str],
    vocab: Vocab,
    sts_dev: Sequence[STSExample],
    cfg: TrainConfig,
) -> TrainResult:
    """Fit the student's CLS pooling to the teacher's summed CLS output (MSE).

    The teacher is only read. The student is updated in place and the best
    dev-Spearman snapshot is kept.
    """
    if teacher.config.d != student.config.d:
        raise ConfigError(f"teacher width {teacher.config.d} != student width {student.config.d}")
    if not sts_dev:
        raise ConfigError("dev set must be nonempty")
    opt = Adam(student.params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    max_len = min(teacher.config.max_seq_len, student.config.max_seq_len)
    stream = batch_stream(sentences, vocab, cfg.batch_size, max_len, cfg.seed)

    def dev_score() -> float:
        return sts_spearman(embedder(student, vocab), sts_dev)

    best_score = dev_score()
    best = (student.copy(), 0)
    trace = [{"step": 0, "dev_spearman": best_score}]
    for step in range(1, cfg.steps + 1):
        batch = next(stream)
        target = infer_embed_array(teacher, batch)
        pred = forward(student, batch, derive_seed(cfg.seed, _PASS1, step), dropout_on=True).cls_pool
        diff = ad.add_const(pred, -target)
        loss = ad.mean(ad.mul(diff, diff))
        if not math.isfinite(float(loss.data)):
            raise NumericError(f"non-finite loss at step {step}: mse={float(loss.data)}")
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        row = {"step": step, "mse": float(loss.data), "dev_spearman": None}
        if step % cfg.eval_every == 0 or step == cfg.steps:
            score = dev_score()
            row["dev_spearman"] = score
            if score > best_score:
                best_score, best = score, (student.copy(), step)
        trace.append(row)
    meta = {"train": cfg.to_dict(), "distilled": True}
    return TrainResult(CheckpointBundle(best[0], vocab, best_score, best[1], meta), trace, student)


def mean_cosine(student: EncoderWeights, teacher: TwinModel, vocab: Vocab, sentences: Sequence[str]) -> float:
    """Mean cosine between student CLS and teacher inference embeddings."""
    s = embedder(student, vocab)(sentences)
    t = embedder(teacher, vocab)(sentences)
    return float(((s * t).sum(-1) / (np.linalg.norm(s, axis=-1) * np.linalg.norm(t, axis=-1))).mean())


# ---------------------------------------------------------------- inference cost

def encoder_macs(cfg: EncoderConfig, seq_len: int) -> int:
    """Multiply-accumulates of one tower on one sequence.

    Per layer: Q/K/V/O projections 4nd^2, scores plus weighted values 2n^2d,
    FFN 2nd*d_ffn. Embedding lookups and the pooler are not counted.
    """
    n, d = seq_len, cfg.d
    return cfg.n_layers * (4 * n * d * d + 2 * n * n * d + 2 * n * d * cfg.d_ffn)


def macs_and_eta(cfg: EncoderConfig, n_towers: int, seq_len: int, score: float) -> tuple[float, float]:
    """(GMAC, score per GMAC) for an ensemble of ``n_towers`` identical towers."""
    if not 0.0 <= score <= 100.0:
        raise ConfigError(f"score must be in [0, 100], got {score}")
    gmac = n_towers * encoder_macs(cfg, seq_len) / 1e9
    return gmac, score / gmac
