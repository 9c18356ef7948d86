"""The desk-scale smoke setup shared by the acceptance tests and the scripts."""

from __future__ import annotations

from dataclasses import dataclass

from .cross import TwinModel, init_twin
from .data import Batch, STSExample, Vocab, build_vocab, encode_batch, synth_corpus
from .encoder import EncoderConfig
from .train import TrainConfig

TOY_CORPUS_SEED = 0
TOY_TEMPLATES = 12
TOY_SENTENCES = 4000
TOY_PAIRS = 500
TOY_CAEL_K = 2
TOY_PROBE_SIZE = 64
# Wider than EncoderConfig's 0.02: at 0.02 every CLS vector starts nearly
# parallel and 200 steps are spent escaping that plateau.
TOY_INIT_STD = 0.1


@dataclass
class ToySetup:
    sentences: list[str]
    sts_dev: list[STSExample]
    vocab: Vocab
    model_cfg: EncoderConfig
    train_cfg: TrainConfig
    cael_k: int
    probe: Batch

    def init_model(self, seed: int = 0) -> TwinModel:
        return init_twin(self.model_cfg, self.cael_k, seed)


def toy_setup(corpus_seed: int = TOY_CORPUS_SEED, **train_overrides) -> ToySetup:
    """Synthetic corpus, toy twin config (4 layers, d=64, k=2) and 200-step B=16 training config."""
    sentences, sts_dev = synth_corpus(corpus_seed, TOY_TEMPLATES, TOY_SENTENCES, TOY_PAIRS)
    vocab = build_vocab(sentences)
    model_cfg = EncoderConfig(vocab_size=len(vocab), init_std=TOY_INIT_STD)
    probe = encode_batch(vocab, sentences[:TOY_PROBE_SIZE], model_cfg.max_seq_len)
    return ToySetup(sentences, sts_dev, vocab, model_cfg, TrainConfig(**train_overrides), TOY_CAEL_K, probe)
