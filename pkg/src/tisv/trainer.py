"""Two-stage training: speaker-softmax pretraining, then triplet + keyword-adversarial fine-tuning."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import asr_head
from . import autograd as ag
from .asr_head import AsrHeadConfig, KeywordVocabulary
from .autograd import Tensor
from .data import Corpus, check_one_keyword_per_speaker
from .errors import ConfigurationError, TrainingDivergedError
from .losses import AdvConfig, TripletConfig, adversarial_gradients, batch_triplet_loss, mine_violating_indices
from .network import SeNetConfig, build_network, config_of, embed_matrix, forward
from .optim import Sgd, SgdConfig
from .params import ParameterStore, SplitMix64, fan_in_uniform
from .verification import evaluate_embeddings

log = logging.getLogger(__name__)


def config_hash(cfg) -> str:
    d = cfg if isinstance(cfg, dict) else asdict(cfg)
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 32
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=0.01))
    seed: int = 0
    n_speakers: int | None = None

    def __post_init__(self):
        if isinstance(self.sgd, dict):
            self.sgd = SgdConfig(**self.sgd)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.n_speakers is not None and self.n_speakers < 2:
            raise ConfigurationError(f"pretraining needs at least 2 speakers, got {self.n_speakers}")


@dataclass
class FinetuneConfig:
    triplet: TripletConfig = field(default_factory=TripletConfig)
    adv: AdvConfig = field(default_factory=AdvConfig)
    n_keywords: int = 2
    epochs: int = 10
    p: int = 8
    k: int = 4
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=0.001))
    seed: int = 0
    routing: str = "junction"
    use_asr_head: bool = True
    lr_patience: int = 3
    allow_multi_keyword: bool = False

    def __post_init__(self):
        if isinstance(self.triplet, dict):
            self.triplet = TripletConfig(**self.triplet)
        if isinstance(self.adv, dict):
            self.adv = AdvConfig(**self.adv)
        if isinstance(self.sgd, dict):
            self.sgd = SgdConfig(**self.sgd)
        AsrHeadConfig(self.n_keywords, 1)
        if self.p < 2 or self.k < 2:
            raise ConfigurationError(f"P x K batches need P >= 2 and K >= 2, got {self.p} x {self.k}")
        if self.routing not in ("junction", "two_pass"):
            raise ConfigurationError(f"unknown routing {self.routing!r}")

    @property
    def gamma(self) -> float:
        return self.adv.gamma

    @property
    def margin(self) -> float:
        return self.triplet.margin


@dataclass
class TrainingRunRecord:
    config_hash: str
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def log_lines(self) -> list[str]:
        """Tab-separated per-step lines.

        Fine-tuning: step, L_SE, L_triplet, L_ASR, violations, batch keyword
        accuracy.  Pretraining: step, cross-entropy.
        """
        out = []
        for s in self.steps:
            if "l_se" in s:
                out.append(f"{s['step']}\t{s['l_se']:.10g}\t{s['l_triplet']:.10g}\t{s['l_asr']:.10g}\t"
                           f"{s['violations']}\t{s['kw_acc']:.6g}")
            else:
                out.append(f"{s['step']}\t{s['loss']:.10g}")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# batching


def make_pk_batches(speakers: Sequence[str], p: int, k: int, seed: int) -> list[np.ndarray]:
    """One epoch of P-speaker x K-segment batches over item indices.

    Each speaker's items are shuffled and cut into groups of K; each batch
    takes one group from each of the P speakers with the most groups left
    (ties in seeded random order).  No item appears twice in an epoch.
    """
    speakers = [str(s) for s in speakers]
    rng = np.random.default_rng(seed)
    groups: dict[str, list[np.ndarray]] = {}
    for spk in sorted(set(speakers)):
        idx = np.array([i for i, s in enumerate(speakers) if s == spk], dtype=np.intp)
        idx = idx[rng.permutation(idx.size)]
        chunks = [idx[j : j + k] for j in range(0, idx.size - k + 1, k)]
        if chunks:
            groups[spk] = chunks
    if len(groups) < p:
        raise ConfigurationError(f"need {p} speakers with >= {k} segments each, found {len(groups)}")
    batches = []
    while True:
        live = [s for s in groups if groups[s]]
        if len(live) < p:
            break
        tiebreak = rng.permutation(len(live))
        order = sorted(range(len(live)), key=lambda i: (-len(groups[live[i]]), tiebreak[i]))
        chosen = [live[i] for i in order[:p]]
        chosen = [chosen[i] for i in rng.permutation(p)]
        batches.append(np.concatenate([groups[s].pop() for s in chosen]))
    return batches


# ---------------------------------------------------------------------------
# stage 1


def pretrain_speaker_softmax(
    corpus: Corpus,
    net_cfg: SeNetConfig,
    cfg: PretrainConfig,
    base: ParameterStore | None = None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> tuple[ParameterStore, TrainingRunRecord]:
    """Train SE network + temporary speaker softmax by cross-entropy; the softmax layer is dropped."""
    speakers = corpus.speaker_set()
    if len(speakers) < 2:
        raise ConfigurationError(f"pretraining needs at least 2 speakers, got {len(speakers)}")
    if corpus.segment_len != net_cfg.input_len:
        corpus = corpus.with_length(net_cfg.input_len)
    record = TrainingRunRecord(config_hash({"pretrain": asdict(cfg), "network": net_cfg.to_dict()}))
    t0 = time.perf_counter()
    store = base.copy() if base is not None else build_network(net_cfg, cfg.seed)
    head = ParameterStore()
    rng_init = SplitMix64(cfg.seed ^ 0x5EED)
    head.add("spk.weight", fan_in_uniform(rng_init, (len(speakers), net_cfg.embed_dim)))
    head.add("spk.bias", np.zeros(len(speakers)))
    labels = np.searchsorted(speakers, corpus.speakers)
    params = dict(store.items()) | dict(head.items())
    opt = Sgd(params, cfg.sgd)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        losses, correct = [], 0
        for j in range(0, len(order), cfg.batch_size):
            idx = order[j : j + cfg.batch_size]
            if idx.size < 2:
                continue
            emb = forward(store, corpus.waves[idx], "train")
            logp = ag.log_softmax(ag.affine(emb, head["spk.weight"], head["spk.bias"]), axis=1)
            loss = ag.neg(logp[np.arange(idx.size), labels[idx]]).mean()
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError("non-finite pretraining loss", step)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            correct += int(np.sum(np.argmax(logp.data, axis=1) == labels[idx]))
            record.steps.append({"step": step, "loss": loss.item()})
            step += 1
        stats = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                 "train_acc": correct / len(corpus)}
        record.epochs.append(stats)
        log.info("pretrain epoch %d loss %.4f acc %.3f", epoch, stats["loss"], stats["train_acc"])
        if on_epoch:
            on_epoch(epoch, stats)
    store.zero_grad()
    record.wall_clock = time.perf_counter() - t0
    store.meta["stage"] = "pretrained"
    store.meta["config_hash"] = record.config_hash
    return store, record


def speaker_classification_accuracy(store: ParameterStore, train: Corpus, test: Corpus, **fit_kw) -> float:
    """Held-out speaker identification with a softmax fit on frozen embeddings."""
    spk = sorted(set(train.speakers))
    ytr = np.searchsorted(spk, train.speakers)
    yte = np.searchsorted(spk, test.speakers)
    return asr_head.probe_accuracy(embed_matrix(store, train.waves), ytr,
                                   embed_matrix(store, test.waves), yte, len(spk), **fit_kw)


# ---------------------------------------------------------------------------
# stage 2


def finetune_adversarial(
    base: ParameterStore,
    train: Corpus,
    cfg: FinetuneConfig,
    validation: Corpus | None = None,
    vocabulary: KeywordVocabulary | None = None,
    m_enroll: int = 5,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> tuple[ParameterStore, ParameterStore | None, TrainingRunRecord]:
    """Fine-tune a copy of ``base``; returns (SE store, keyword head, run record)."""
    net_cfg = config_of(base)
    check_one_keyword_per_speaker(train, cfg.allow_multi_keyword)
    if train.segment_len != net_cfg.input_len:
        train = train.with_length(net_cfg.input_len)
    vocab = vocabulary or KeywordVocabulary(sorted(set(train.keywords)))
    if cfg.use_asr_head and len(vocab) != cfg.n_keywords:
        raise ConfigurationError(f"vocabulary has {len(vocab)} keywords, config says N={cfg.n_keywords}")
    kw_labels = np.array([vocab.index(k) for k in train.keywords], dtype=np.intp)

    record = TrainingRunRecord(config_hash({"finetune": asdict(cfg), "network": net_cfg.to_dict()}))
    t0 = time.perf_counter()
    store = base.copy()
    theta = dict(store.items())
    head = asr_head.build_head(AsrHeadConfig(cfg.n_keywords, net_cfg.embed_dim), cfg.seed) if cfg.use_asr_head else None
    params = dict(theta) | (dict(head.items()) if head is not None else {})
    opt = Sgd(params, cfg.sgd)
    best, stall = None, 0
    step = 0
    for epoch in range(cfg.epochs):
        batches = make_pk_batches(train.speakers, cfg.p, cfg.k, cfg.seed * 1000003 + epoch)
        for idx in batches:
            waves = train.waves[idx]
            spk = [train.speakers[i] for i in idx]
            if head is not None:
                grads, losses = adversarial_gradients(
                    lambda: forward(store, waves, "train"), head, theta, spk, kw_labels[idx],
                    cfg.margin, cfg.gamma, cfg.routing,
                )
                l_se, l_trip, l_asr = losses.l_se.item(), losses.l_triplet.item(), losses.l_asr.item()
                n_viol, kw_acc = losses.n_violations, losses.keyword_accuracy
            else:
                emb = forward(store, waves, "train")
                trip = mine_violating_indices(emb.data @ emb.data.T, spk, cfg.margin)
                l = batch_triplet_loss(emb, trip, cfg.margin)
                if l.requires_grad:
                    grads = dict(zip(theta, ag.grad(l, list(theta.values()))))
                else:
                    grads = {name: np.zeros_like(t.data) for name, t in theta.items()}
                l_se = l_trip = l.item()
                l_asr, n_viol, kw_acc = 0.0, len(trip), float("nan")
            if not np.isfinite(l_se):
                raise TrainingDivergedError("non-finite fine-tuning loss", step)
            for name, g in grads.items():
                params[name].grad = g
            opt.step()
            record.steps.append({"step": step, "l_se": l_se, "l_triplet": l_trip, "l_asr": l_asr,
                                 "violations": n_viol, "kw_acc": kw_acc})
            step += 1
        stats = {"epoch": epoch, "lr": opt.cfg.learning_rate, "batches": len(batches)}
        if validation is not None and len(validation):
            stats.update(validation_metrics(store, head, validation, vocab, m_enroll, cfg.seed))
            metric = stats.get("eer_avg")
            if metric is not None:
                if best is None or metric < best:
                    best, stall = metric, 0
                else:
                    stall += 1
                    if stall >= cfg.lr_patience:
                        opt.cfg = SgdConfig(opt.cfg.learning_rate / 2, opt.cfg.momentum, opt.cfg.weight_decay)
                        stall = 0
        record.epochs.append(stats)
        log.info("finetune epoch %d %s", epoch, stats)
        if on_epoch:
            on_epoch(epoch, stats, store, head)
    record.wall_clock = time.perf_counter() - t0
    store.zero_grad()
    store.meta["stage"] = "finetuned"
    store.meta["config_hash"] = record.config_hash
    store.meta["finetune"] = json.loads(json.dumps(asdict(cfg), default=str))
    if head is not None:
        head.zero_grad()
        head.meta["vocabulary"] = vocab.names
        head.meta["config_hash"] = record.config_hash
    return store, head, record


def validation_metrics(store: ParameterStore, head: ParameterStore | None, corpus: Corpus,
                       vocab: KeywordVocabulary, m_enroll: int, seed: int) -> dict:
    """Infer-mode metrics on a frozen snapshot of the current parameters."""
    snapshot = store.copy()
    emb = embed_matrix(snapshot, corpus.with_length(config_of(snapshot).input_len).waves)
    out: dict = {}
    known = [i for i, k in enumerate(corpus.keywords) if k in vocab.names]
    if head is not None and known:
        labels = [vocab.index(corpus.keywords[i]) for i in known]
        out["val_kw_acc"] = asr_head.keyword_accuracy(head, emb[known], labels)
    try:
        rep = evaluate_embeddings(emb, corpus.speakers, corpus.keywords, m_enroll, seed)
        out.update(eer_tk=rep.eer_tk, eer_ntk=rep.eer_ntk, eer_avg=rep.eer_avg)
    except Exception as exc:  # validation is advisory; a tiny split may not support the protocol
        log.debug("validation protocol unavailable: %s", exc)
    return out
