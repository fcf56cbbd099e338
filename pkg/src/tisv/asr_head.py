"""Single-affine-layer keyword classifier over speaker embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ContractError, DataError
from .optim import Sgd, SgdConfig
from .params import ParameterStore, SplitMix64, fan_in_uniform

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-300


@dataclass
class AsrHeadConfig:
    n_keywords: int = 2
    input_dim: int = 128

    def __post_init__(self):
        if self.n_keywords < 2:
            raise ConfigurationError(f"need at least 2 keywords, got {self.n_keywords}")
        if self.input_dim < 1:
            raise ConfigurationError(f"input_dim must be positive, got {self.input_dim}")


@dataclass(frozen=True)
class KeywordLabel:
    index: int
    name: str


class KeywordVocabulary:
    """Keyword names in label order; file format is one UTF-8 name per line."""

    def __init__(self, names: Sequence[str]):
        names = [str(n) for n in names]
        if len(set(names)) != len(names):
            raise ConfigurationError("keyword names must be unique")
        if any(not n for n in names):
            raise ConfigurationError("empty keyword name")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def label(self, name: str) -> KeywordLabel:
        try:
            return KeywordLabel(self._index[name], name)
        except KeyError:
            raise ContractError(f"keyword {name!r} not in vocabulary") from None

    def index(self, name: str) -> int:
        return self.label(name).index

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "KeywordVocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls([ln.strip() for ln in lines if ln.strip()])


def build_head(cfg: AsrHeadConfig, seed: int = 0, zero: bool = False) -> ParameterStore:
    store = ParameterStore({"asr_head": {"n_keywords": cfg.n_keywords, "input_dim": cfg.input_dim}})
    shape = (cfg.n_keywords, cfg.input_dim)
    store.add("asr.weight", np.zeros(shape) if zero else fan_in_uniform(SplitMix64(seed), shape))
    store.add("asr.bias", np.zeros(cfg.n_keywords))
    return store


def _as_input(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (list, tuple)):
        return Tensor(np.stack([np.asarray(getattr(v, "values", v)) for v in x]))
    return Tensor(np.asarray(getattr(x, "values", x)))


def logits(head: ParameterStore, x) -> Tensor:
    x = _as_input(x)
    w = head["asr.weight"]
    if x.shape[-1] != w.shape[1]:
        raise ContractError(f"embedding dim {x.shape[-1]} != head input dim {w.shape[1]}")
    return ag.affine(x, w, head["asr.bias"])


def classify(head: ParameterStore, x) -> Tensor:
    """Keyword posteriors: softmax of the affine layer output."""
    return ag.softmax(logits(head, x), axis=-1)


class ClampCounter:
    def __init__(self):
        self.count = 0


clamp_events = ClampCounter()


def asr_loss(probs: Tensor, labels) -> Tensor:
    """Mean cross-entropy ``-log p[y]``; probabilities below 1e-300 are clamped (and counted)."""
    probs = ag.as_tensor(probs)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    single = probs.ndim == 1
    p2 = probs.reshape(1, -1) if single else probs
    if p2.shape[0] != labels.size:
        raise ContractError(f"{labels.size} labels for {p2.shape[0]} predictions")
    if np.any(labels < 0) or np.any(labels >= p2.shape[1]):
        raise ContractError("keyword label out of range")
    picked = p2[np.arange(labels.size), labels]
    low = picked.data < PROB_FLOOR
    if np.any(low):
        clamp_events.count += int(low.sum())
        log.warning("asr_loss: %d probabilities clamped at %g", int(low.sum()), PROB_FLOOR)
        picked = picked * Tensor((~low).astype(float)) + Tensor(np.where(low, PROB_FLOOR, 0.0))
    return ag.neg(ag.log(picked)).mean()


def predict(head: ParameterStore, embeddings) -> np.ndarray:
    """Argmax keyword index; ties go to the lowest index."""
    return np.argmax(logits(head, embeddings).data, axis=-1)


def keyword_accuracy(head: ParameterStore, embeddings, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("keyword_accuracy on an empty set")
    return float(np.mean(predict(head, embeddings) == labels))


def fit_head(
    embeddings: np.ndarray,
    labels,
    n_keywords: int,
    steps: int = 300,
    lr: float = 0.5,
    seed: int = 0,
) -> ParameterStore:
    """Fit a fresh head on frozen embeddings by full-batch SGD on the cross-entropy."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    head = build_head(AsrHeadConfig(n_keywords, x.shape[1]), seed, zero=True)
    opt = Sgd(head, SgdConfig(learning_rate=lr, momentum=0.9, weight_decay=0.0))
    xt = Tensor(x)
    for _ in range(steps):
        loss = asr_loss(classify(head, xt), y)
        loss.backward()
        opt.step()
    return head


def probe_accuracy(train_x, train_y, test_x, test_y, n_keywords: int, **fit_kw) -> float:
    """Keyword-probe accuracy: a head fit on one embedding set, scored on another."""
    head = fit_head(train_x, train_y, n_keywords, **fit_kw)
    return keyword_accuracy(head, np.asarray(test_x), test_y)
