"""Desk-scale end-to-end experiment on the synthetic corpus: pretrain once, sweep gamma."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import asr_head
from .data import Corpus, SynthSpec, apply_split, chime_keywords, generate_synthetic, make_split
from .losses import AdvConfig, TripletConfig
from .network import SeNetConfig, embed_matrix
from .optim import SgdConfig
from .params import ParameterStore
from .trainer import FinetuneConfig, PretrainConfig, finetune_adversarial, pretrain_speaker_softmax
from .verification import evaluate_embeddings

log = logging.getLogger(__name__)

DESK_NETWORK = dict(input_len=512, n_convres_units=4, n_tail_resblocks=1, embed_dim=32, kernel_size_unit=9,
                    channel_schedule=[8, 16, 32, 32])


@dataclass
class SweepConfig:
    seed: int = 0
    n_keywords: int = 2
    gammas: tuple[float, ...] = (0.0, 0.2, 0.4)
    network: dict = field(default_factory=lambda: dict(DESK_NETWORK))
    pretrain_speakers: int = 16
    pretrain_keywords: int = 16
    pretrain_utts: int = 2
    pretrain_epochs: int = 16
    pretrain_lr: float = 0.05
    train_speakers: int = 12
    eval_speakers: int = 30
    train_utts: int = 8
    eval_utts: int = 20
    finetune_epochs: int = 20
    finetune_lr: float = 0.01
    margin: float = 0.2
    p: int = 6
    k: int = 4
    m_enroll: int = 5
    synth: dict = field(default_factory=dict)


@dataclass
class SweepResult:
    gamma: float
    eer_tk: float
    eer_ntk: float
    eer_avg: float
    probe_acc: float
    head_acc: float | None


def build_corpora(cfg: SweepConfig) -> tuple[Corpus, Corpus, Corpus, Corpus, list[str]]:
    """(pretrain, finetune-train, validation, evaluation, keyword vocabulary)."""
    seg = cfg.network["input_len"]
    pre_spec = SynthSpec(n_speakers=cfg.pretrain_speakers, n_keywords=cfg.pretrain_keywords,
                         utts_per_pair=cfg.pretrain_utts, segment_len=seg, seed=10_000 + cfg.seed,
                         speaker_prefix="pre", **cfg.synth)
    pre, _ = generate_synthetic(pre_spec)
    rng = np.random.default_rng([cfg.seed, 17])
    picked = sorted(int(i) for i in rng.choice(16, size=cfg.n_keywords, replace=False))
    vocab = sorted(chime_keywords()[i] for i in picked)
    n_spk = cfg.train_speakers + cfg.eval_speakers
    ft_spec = SynthSpec(n_speakers=n_spk, n_keywords=16, utts_per_pair=max(cfg.train_utts, cfg.eval_utts),
                        segment_len=seg, seed=20_000 + cfg.seed, speaker_prefix="ft", **cfg.synth)
    full, _ = generate_synthetic(ft_spec, keyword_subset=picked)
    split = make_split(full, cfg.train_speakers, cfg.eval_speakers, cfg.seed, vocab)
    train, val, evl = apply_split(full, split, vocab)
    # training speakers get train_utts per keyword, evaluation speakers eval_utts
    def cap(c: Corpus, n: int) -> Corpus:
        keep = [i for i, u in enumerate(c.utt_ids) if int(u.rsplit("_", 1)[1]) < n]
        return c.subset(keep)

    return pre, cap(train, cfg.train_utts), cap(val, cfg.train_utts), cap(evl, cfg.eval_utts), vocab


def keyword_probe(store: ParameterStore, fit: Corpus, test: Corpus, vocab: list[str]) -> float:
    """Fresh linear keyword classifier fit on ``fit`` embeddings, scored on ``test``."""
    xf, xt = embed_matrix(store, fit.waves), embed_matrix(store, test.waves)
    yf = [vocab.index(k) for k in fit.keywords]
    yt = [vocab.index(k) for k in test.keywords]
    return asr_head.probe_accuracy(xf, yf, xt, yt, len(vocab))


def run_sweep(cfg: SweepConfig, base: ParameterStore | None = None) -> tuple[list[SweepResult], ParameterStore]:
    pre, train, val, evl, vocab = build_corpora(cfg)
    net = SeNetConfig(**cfg.network)
    if base is None:
        base, _ = pretrain_speaker_softmax(
            pre, net, PretrainConfig(epochs=cfg.pretrain_epochs, batch_size=32,
                                     sgd=SgdConfig(cfg.pretrain_lr), seed=cfg.seed))
    probe_fit = Corpus(np.concatenate([train.waves, val.waves]), train.speakers + val.speakers,
                       train.keywords + val.keywords, train.utt_ids + val.utt_ids)
    results = []
    for gamma in cfg.gammas:
        ft = FinetuneConfig(triplet=TripletConfig(cfg.margin), adv=AdvConfig(gamma), n_keywords=cfg.n_keywords,
                            epochs=cfg.finetune_epochs, p=cfg.p, k=cfg.k, sgd=SgdConfig(cfg.finetune_lr),
                            seed=cfg.seed)
        store, head, _ = finetune_adversarial(base, train, ft, vocabulary=asr_head.KeywordVocabulary(vocab))
        emb = embed_matrix(store, evl.waves)
        rep = evaluate_embeddings(emb, evl.speakers, evl.keywords, cfg.m_enroll, cfg.seed)
        probe = keyword_probe(store, probe_fit, evl, vocab)
        head_acc = asr_head.keyword_accuracy(head, emb, [vocab.index(k) for k in evl.keywords])
        results.append(SweepResult(gamma, rep.eer_tk, rep.eer_ntk, rep.eer_avg, probe, head_acc))
        log.info("gamma %.2f: %s", gamma, asdict(results[-1]))
    return results, base
