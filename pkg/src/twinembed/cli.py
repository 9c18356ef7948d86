"""Command-line entry point: ``twinembed <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines; keys are
flag names with or without dashes) and ``--seed``. Explicit flags override the
file. Artifacts go under ``--out`` together with a ``manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import checkpoint as ckpt
from .cross import TwinModel, init_twin
from .data import (
    SYNTH_NOISE,
    SYNTH_NOISE_POOL,
    STSExample,
    build_vocab,
    encode_batch,
    read_corpus,
    read_sts,
    synth_corpus,
    write_corpus,
    write_sts,
)
from .encoder import EncoderConfig, EncoderWeights, init_weights
from .errors import ArtifactIOError, ConfigError, DataError, TwinEmbedError
from .losses import LOSS_TERMS, tmc_binary
from .metrics import attention_dump, evaluate, layer_e_cls
from .train import (
    DISTILL_COLUMNS,
    TrainConfig,
    ablate,
    distill,
    mean_cosine,
    parse_subsets,
    train,
    trace_to_csv,
)

log = logging.getLogger("twinembed")

COMMANDS = ("synth", "train", "ablate", "distill", "eval", "diagnose", "loss-surface")


# ---------------------------------------------------------------- config files

def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment. Values stay strings."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def apply_config_file(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install file values as parser defaults, converted by each flag's own type."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}")
            defaults[key] = raw.lower() in ("true", "1", "yes")
            continue
        convert = action.type or str
        try:
            defaults[key] = convert(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: bad value {raw!r}") from exc
    parser.set_defaults(**defaults)


# ---------------------------------------------------------------- manifest

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: dict, outputs: list, wall: float) -> Path:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    manifest = {
        "command": command,
        "config": config,
        "seed": args.seed,
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in inputs.items()},
        "outputs": [str(p) for p in outputs],
        "wall_clock_seconds": wall,
        "versions": {
            "twinembed": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    path = out_dir / "manifest.json"
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------- flag groups

def _loss_mask(text: str) -> tuple[str, ...]:
    terms = tuple(t.strip().lower() for t in text.split(",") if t.strip())
    if not terms or set(terms) - set(LOSS_TERMS):
        raise argparse.ArgumentTypeError(f"loss mask must be a nonempty subset of {','.join(LOSS_TERMS)}")
    return terms


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = EncoderConfig()
    g = p.add_argument_group("model")
    g.add_argument("--n-layers", type=int, default=d.n_layers)
    g.add_argument("--d", type=int, default=d.d, help="hidden width")
    g.add_argument("--n-heads", type=int, default=d.n_heads)
    g.add_argument("--d-ffn", type=int, default=d.d_ffn)
    g.add_argument("--max-seq-len", type=int, default=d.max_seq_len)
    g.add_argument("--dropout", type=float, default=d.dropout_p)
    g.add_argument("--init-std", type=float, default=d.init_std)
    g.add_argument("--vocab-cap", type=int, default=d.vocab_size, help="vocabulary size cap")
    g.add_argument("--cael-k", type=int, default=2, help="cross-attention layer interval")


def _add_train_flags(p: argparse.ArgumentParser, loss_mask: bool = True) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int, default=d.steps)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--learning-rate", type=float, default=d.learning_rate)
    g.add_argument("--beta1", type=float, default=d.beta1)
    g.add_argument("--beta2", type=float, default=d.beta2)
    g.add_argument("--adam-eps", type=float, default=d.adam_eps)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--eval-every", type=int, default=d.eval_every)
    g.add_argument("--tau", type=float, default=d.tau)
    g.add_argument("--sim-clamp-eps", type=float, default=d.sim_clamp_eps)
    if loss_mask:
        g.add_argument("--loss-mask", type=_loss_mask, default=",".join(d.loss_mask), help="comma list of loss terms")


def _model_config(args, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(
        n_layers=args.n_layers, d=args.d, n_heads=args.n_heads, d_ffn=args.d_ffn,
        vocab_size=vocab_size, max_seq_len=args.max_seq_len, dropout_p=args.dropout, init_std=args.init_std,
    )


def _train_config(args, **overrides) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in vars(args).items() if k in names}
    if isinstance(kw.get("loss_mask"), str):
        kw["loss_mask"] = _loss_mask(kw["loss_mask"])
    kw.update(overrides)
    return TrainConfig(**kw)


def _load_inputs(args) -> tuple[list[str], list[STSExample]]:
    return read_corpus(args.corpus), read_sts(args.sts_dev)


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> tuple[dict, list]:
    out = _out_dir(args.out)
    kw = dict(words_per_kind=args.words_per_kind, n_noise=(args.noise_min, args.noise_max), noise_pool=args.noise_pool)
    lines, dev = synth_corpus(args.seed, args.n_templates, args.n_sentences, args.n_pairs, **kw)
    _, test = synth_corpus(args.seed, args.n_templates, 0, args.n_pairs, pair_stream=3, **kw)
    paths = [out / "corpus.txt", out / "sts_dev.tsv", out / "sts_test.tsv"]
    try:
        write_corpus(paths[0], lines)
        write_sts(paths[1], dev)
        write_sts(paths[2], test)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write synthetic corpus under {out}: {exc}") from exc
    print(f"wrote {len(lines)} sentences, {len(dev)} dev pairs, {len(test)} test pairs to {out}")
    return {}, paths


def cmd_train(args) -> tuple[dict, list]:
    sentences, dev = _load_inputs(args)
    out = _out_dir(args.out)
    vocab = build_vocab(sentences, args.vocab_cap)
    model = init_twin(_model_config(args, len(vocab)), args.cael_k, args.seed)
    result = train(model, sentences, vocab, dev, _train_config(args))
    paths = [out / "model.ckpt", out / "trace.csv"]
    ckpt.save(result.bundle, paths[0])
    _write_text(paths[1], result.trace_csv())
    print(f"best dev spearman {result.bundle.best_spearman:.4f} at step {result.bundle.step}")
    return {"corpus": args.corpus, "sts_dev": args.sts_dev}, paths


def cmd_ablate(args) -> tuple[dict, list]:
    sentences, dev = _load_inputs(args)
    out = _out_dir(args.out)
    vocab = build_vocab(sentences, args.vocab_cap)
    cfg = _model_config(args, len(vocab))
    probe = encode_batch(vocab, sentences[: args.probe_size], cfg.max_seq_len)
    subsets = parse_subsets(args.subsets)
    rows = ablate(subsets, sentences, vocab, dev, cfg, args.cael_k, _train_config(args, loss_mask=subsets[0]), args.seed, probe)
    text = "loss_mask,best_spearman,final_spearman,modulus_mismatch\n" + "".join(
        f"{'+'.join(r.loss_mask)},{r.best_spearman!r},{r.final_spearman!r},{r.modulus_mismatch!r}\n" for r in rows
    )
    path = out / "ablation.csv"
    _write_text(path, text)
    sys.stdout.write(text)
    return {"corpus": args.corpus, "sts_dev": args.sts_dev}, [path]


def cmd_distill(args) -> tuple[dict, list]:
    teacher_bundle = ckpt.load(args.teacher)
    teacher = teacher_bundle.model
    if not isinstance(teacher, TwinModel):
        raise ConfigError(f"teacher {args.teacher} is not a twin checkpoint")
    sentences, dev = _load_inputs(args)
    out = _out_dir(args.out)
    vocab = teacher_bundle.vocab
    tc = teacher.config
    student_cfg = EncoderConfig(
        n_layers=args.student_layers or tc.n_layers, d=tc.d, n_heads=tc.n_heads, d_ffn=tc.d_ffn,
        vocab_size=tc.vocab_size, max_seq_len=tc.max_seq_len, dropout_p=tc.dropout_p, init_std=tc.init_std,
    )
    student = init_weights(student_cfg, args.seed)
    held_out = [s for ex in dev for s in (ex.sentence_a, ex.sentence_b)]
    cos_before = mean_cosine(student, teacher, vocab, held_out)
    result = distill(teacher, student, sentences, vocab, dev, _train_config(args))
    cos_after = mean_cosine(result.model, teacher, vocab, held_out)
    paths = [out / "model.ckpt", out / "trace.csv"]
    ckpt.save(result.bundle, paths[0])
    _write_text(paths[1], trace_to_csv(result.trace, DISTILL_COLUMNS))
    print(f"held-out mean cosine to teacher {cos_before:.4f} -> {cos_after:.4f}")
    print(f"best dev spearman {result.bundle.best_spearman:.4f} at step {result.bundle.step}")
    inputs = {"teacher": Path(args.teacher) / "model.ckpt" if Path(args.teacher).is_dir() else args.teacher}
    return {**inputs, "corpus": args.corpus, "sts_dev": args.sts_dev}, paths


def cmd_eval(args) -> tuple[dict, list]:
    bundle = ckpt.load(args.model)
    sts = read_sts(args.sts)
    out = _out_dir(args.out)
    report = evaluate(bundle.model, bundle.vocab, sts, args.uniformity_t)
    summary = report.summary()
    paths = [out / "eval.json", out / "density.csv"]
    _write_text(paths[0], json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_text(paths[1], report.density.to_csv())
    print(f"spearman {report.spearman:.4f}")
    print(f"alignment {report.alignment:.4f}")
    print(f"uniformity {report.uniformity:.4f}")
    return {"model": _ckpt_path(args.model), "sts": args.sts}, paths


def cmd_diagnose(args) -> tuple[dict, list]:
    bundle = ckpt.load(args.model)
    sentences = list(args.sentence)
    if args.sentences_file:
        sentences += read_corpus(args.sentences_file)
    if not sentences:
        raise ConfigError("diagnose needs --sentence or --sentences-file")
    out = _out_dir(args.out)
    paths = [out / "attention.json", out / "e_cls.csv"]
    attention_dump(bundle.model, bundle.vocab, sentences, paths[0], per_head=args.per_head)
    e_cls = layer_e_cls(bundle.model, bundle.vocab, sentences)
    _write_text(paths[1], "layer,e_cls\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(e_cls, 1)))
    for i, v in enumerate(e_cls, 1):
        print(f"layer {i} E_CLS {v:.4f}")
    return {"model": _ckpt_path(args.model)}, paths


def loss_surface_rows(k_min: float, k_max: float, k_step: float, t_steps: int) -> np.ndarray:
    """(k, t, value) grid rows, k outer and t inner."""
    if not 0 < k_min <= k_max or k_step <= 0 or t_steps < 2:
        raise ConfigError("need 0 < k_min <= k_max, k_step > 0 and t_steps >= 2")
    n_k = int(round((k_max - k_min) / k_step)) + 1
    ks = np.round(k_min + k_step * np.arange(n_k), 10)
    ts = np.linspace(-1.0, 1.0, t_steps)
    kk, tt = np.meshgrid(ks, ts, indexing="ij")
    return np.stack([kk.ravel(), tt.ravel(), tmc_binary(kk, tt).ravel()], axis=1)


def cmd_loss_surface(args) -> tuple[dict, list]:
    out = Path(args.out)
    target = out if out.suffix == ".csv" else out / "loss_surface.csv"
    rows = loss_surface_rows(args.k_min, args.k_max, args.k_step, args.t_steps)
    body = "".join(f"{k!r},{t!r},{v!r}\n" for k, t, v in rows.tolist())
    _write_text(target, "k,t,value\n" + body)
    i = int(np.argmin(rows[:, 2]))
    print(f"{len(rows)} rows; minimum {rows[i, 2]:.3g} at k={rows[i, 0]:g}, t={rows[i, 1]:g}")
    return {}, [target]


def _ckpt_path(model_arg) -> Path:
    p = Path(model_arg)
    return p / "model.ckpt" if p.is_dir() else p


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="twinembed", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"twinembed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--seed", type=int, default=0, help="single source of all randomness")
        p.add_argument("--log-level", default="WARNING", help="logging level")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "write a synthetic corpus with graded dev/test STS pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-templates", type=int, default=12)
    p.add_argument("--n-sentences", type=int, default=4000)
    p.add_argument("--n-pairs", type=int, default=500)
    p.add_argument("--words-per-kind", type=int, default=12)
    p.add_argument("--noise-min", type=int, default=SYNTH_NOISE[0], help="fewest filler tokens per sentence")
    p.add_argument("--noise-max", type=int, default=SYNTH_NOISE[1], help="most filler tokens per sentence")
    p.add_argument("--noise-pool", type=int, default=SYNTH_NOISE_POOL, help="number of distinct filler words")

    for name, func, text in (
        ("train", cmd_train, "train the twin encoder"),
        ("ablate", cmd_ablate, "train one model per loss subset from a shared initialisation"),
    ):
        p = command(name, func, text)
        p.add_argument("--corpus", required=True, help="one sentence per line")
        p.add_argument("--sts-dev", required=True, help="TSV: sentence_a, sentence_b, gold")
        p.add_argument("--out", required=True, help="output directory")
        _add_model_flags(p)
        _add_train_flags(p, loss_mask=name == "train")
        if name == "ablate":
            p.add_argument("--subsets", default="nce,icnce,ictm;nce", help="';'-separated loss subsets")
            p.add_argument("--probe-size", type=int, default=64, help="sentences for the modulus-mismatch probe")

    p = command("distill", cmd_distill, "distil a twin checkpoint into one tower (MSE)")
    p.add_argument("--teacher", required=True, help="teacher checkpoint file or directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--sts-dev", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--student-layers", type=int, default=0, help="student depth; 0 copies the teacher's")
    _add_train_flags(p, loss_mask=False)

    p = command("eval", cmd_eval, "spearman, alignment, uniformity and cosine density")
    p.add_argument("--model", required=True, help="checkpoint file or directory")
    p.add_argument("--sts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--uniformity-t", type=float, default=2.0)

    p = command("diagnose", cmd_diagnose, "attention dump and per-layer E_CLS")
    p.add_argument("--model", required=True)
    p.add_argument("--sentence", action="append", default=[], help="repeatable")
    p.add_argument("--sentences-file", default=None)
    p.add_argument("--per-head", action="store_true", help="also export per-head matrices")
    p.add_argument("--out", required=True)

    p = command("loss-surface", cmd_loss_surface, "grid of the closed-form modulus loss over (k, t)")
    p.add_argument("--k-min", type=float, default=0.1)
    p.add_argument("--k-max", type=float, default=5.0)
    p.add_argument("--k-step", type=float, default=0.01)
    p.add_argument("--t-steps", type=int, default=201, help="grid points over t in [-1, 1]")
    p.add_argument("--out", required=True, help="CSV path, or a directory")
    for sp in _subparser(parser, "synth"), *(_subparser(parser, c) for c in COMMANDS[1:]):
        for action in sp._actions:
            if action.help is None:  # the defaults formatter only annotates flags that have help text
                action.help = action.dest.replace("_", " ")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] in COMMANDS:
            pre = argparse.ArgumentParser(add_help=False)
            pre.add_argument("--config")
            known, _ = pre.parse_known_args(argv[1:])
            if known.config:
                apply_config_file(_subparser(parser, argv[0]), read_config_file(known.config))
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except TwinEmbedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    start = time.perf_counter()
    try:
        inputs, outputs = args.func(args)
        out_dir = Path(args.out)
        if out_dir.suffix == ".csv":
            out_dir = out_dir.parent
        write_manifest(out_dir, args.command, args, inputs, outputs, time.perf_counter() - start)
    except TwinEmbedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
