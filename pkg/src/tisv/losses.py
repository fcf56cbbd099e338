"""Cosine triplet loss, violation mining, and the keyword-adversarial objective.

The speaker-embedding objective is ``L_SE = L_triplet - gamma * L_ASR``.
Gradients are routed so that SE parameters descend ``L_SE`` while the
keyword head keeps descending its own cross-entropy.  Two equivalent
routings exist: two separate backward passes combined afterwards, or one
pass through a gradient-reversal junction inserted between embedding and
head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import asr_head
from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ContractError
from .network import EmbeddingVector


@dataclass
class TripletConfig:
    margin: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.margin <= 2.0:
            raise ConfigurationError(f"triplet margin must be in (0, 2], got {self.margin}")


@dataclass
class AdvConfig:
    gamma: float = 0.0

    def __post_init__(self):
        if not self.gamma >= 0.0:
            raise ConfigurationError(f"adversarial gamma must be >= 0, got {self.gamma}")


@dataclass
class Triplet:
    anchor: EmbeddingVector
    positive: EmbeddingVector
    negative: EmbeddingVector

    def __post_init__(self):
        a, p, n = self.anchor.speaker_id, self.positive.speaker_id, self.negative.speaker_id
        if a is not None and (a != p or a == n):
            raise ContractError(f"invalid triplet speakers: anchor={a} positive={p} negative={n}")


def _vec(v) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(getattr(v, "values", v))


def triplet_loss(t: Triplet | Sequence, margin: float = 0.2) -> Tensor:
    """``-min(cos(a, p) - cos(a, n), margin)`` for one triplet."""
    if isinstance(t, Triplet):
        a, p, n = t.anchor, t.positive, t.negative
    else:
        a, p, n = t
    a, p, n = _vec(a), _vec(p), _vec(n)
    gap = ag.cosine(a, p) - ag.cosine(a, n)
    return ag.neg(ag.minimum(gap, margin))


def similarity_matrix(emb: Tensor) -> Tensor:
    """Pairwise dot products; equal to cosines for unit-norm rows."""
    return ag.matmul(emb, emb.T)


def mine_violating_indices(sim: np.ndarray, speakers: Sequence, margin: float) -> np.ndarray:
    """All (anchor, positive, negative) with ``cos_ap - margin <= cos_an``.

    Rows come out sorted by anchor, then positive, then negative index.
    """
    spk = np.asarray([str(s) for s in speakers])
    n = len(spk)
    same = spk[:, None] == spk[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    viol = (sim[:, :, None] - margin <= sim[:, None, :]) & pos_mask[:, :, None] & neg_mask[:, None, :]
    return np.argwhere(viol).astype(np.intp).reshape(-1, 3)


def mine_violating_triplets(batch: Sequence[EmbeddingVector], margin: float = 0.2) -> list[Triplet]:
    if len(batch) == 0:
        return []
    emb = np.stack([b.values for b in batch])
    idx = mine_violating_indices(emb @ emb.T, [b.speaker_id for b in batch], margin)
    return [Triplet(batch[a], batch[p], batch[n]) for a, p, n in idx]


def batch_triplet_loss(emb: Tensor, triplets: np.ndarray, margin: float) -> Tensor:
    """Mean triplet loss over index rows of ``triplets``; zero when there are none."""
    if len(triplets) == 0:
        return Tensor(0.0)
    sim = similarity_matrix(emb)
    a, p, n = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    gap = sim[(a, p)] - sim[(a, n)]
    return ag.neg(ag.minimum(gap, margin)).mean()


@dataclass
class CombinedLoss:
    l_se: Tensor
    l_triplet: Tensor
    l_asr: Tensor
    n_violations: int
    keyword_accuracy: float

    @property
    def no_violations(self) -> bool:
        return self.n_violations == 0


def combined_loss(l_triplet, l_asr, gamma: float) -> Tensor:
    """``L_triplet - gamma * L_ASR``."""
    if gamma < 0:
        raise ConfigurationError(f"gamma must be >= 0, got {gamma}")
    return ag.sub(l_triplet, ag.mul(l_asr, float(gamma)))


def evaluate_objective(emb: Tensor, head, speakers, keyword_labels, margin: float, gamma: float,
                       head_input: Tensor | None = None) -> CombinedLoss:
    """Mine, then compute every term of the objective on one forward pass."""
    triplets = mine_violating_indices(emb.data @ emb.data.T, speakers, margin)
    l_trip = batch_triplet_loss(emb, triplets, margin)
    probs = asr_head.classify(head, emb if head_input is None else head_input)
    labels = np.asarray(keyword_labels, dtype=np.intp)
    l_asr = asr_head.asr_loss(probs, labels)
    acc = float(np.mean(np.argmax(probs.data, axis=1) == labels))
    return CombinedLoss(combined_loss(l_trip, l_asr, gamma), l_trip, l_asr, len(triplets), acc)


# ---------------------------------------------------------------------------
# gradient routing


def route_two_pass(l_triplet: Tensor, l_asr: Tensor, theta: dict, phi: dict, gamma: float) -> dict:
    """theta <- dL_triplet/dtheta - gamma dL_ASR/dtheta;  phi <- dL_ASR/dphi."""
    th, ph = list(theta.values()), list(phi.values())
    g_trip = ag.grad(l_triplet, th) if l_triplet.requires_grad else [np.zeros_like(t.data) for t in th]
    g_asr = ag.grad(l_asr, th + ph)
    out = {}
    for (name, _), gt, ga in zip(theta.items(), g_trip, g_asr[: len(th)]):
        out[name] = gt - gamma * ga if gamma else gt
    for (name, _), ga in zip(phi.items(), g_asr[len(th) :]):
        out[name] = ga
    return out


def route_junction(total: Tensor, theta: dict, phi: dict) -> dict:
    """Single pass over ``L_triplet + L_ASR(grad_reverse(x, gamma))``."""
    names = list(theta) + list(phi)
    tensors = list(theta.values()) + list(phi.values())
    return dict(zip(names, ag.grad(total, tensors)))


def adversarial_gradients(
    forward_fn,
    head,
    theta: dict,
    speakers,
    keyword_labels,
    margin: float,
    gamma: float,
    method: str = "junction",
) -> tuple[dict, CombinedLoss]:
    """Gradients for one simultaneous SE + head update.

    ``forward_fn()`` runs the SE network once and returns (B, D) embeddings.
    """
    phi = dict(head.items())
    emb = forward_fn()
    if method == "junction":
        # gamma == 0 cuts the path entirely so theta sees the triplet gradient bit for bit
        rev = ag.grad_reverse(emb, gamma) if gamma else ag.detach(emb)
        losses = evaluate_objective(emb, head, speakers, keyword_labels, margin, gamma, head_input=rev)
        total = ag.add(losses.l_triplet, losses.l_asr)
        grads = route_junction(total, theta, phi)
    elif method == "two_pass":
        losses = evaluate_objective(emb, head, speakers, keyword_labels, margin, gamma)
        grads = route_two_pass(losses.l_triplet, losses.l_asr, theta, phi, gamma)
    else:
        raise ConfigurationError(f"unknown routing method {method!r}")
    return grads, losses


def route_adversarial_gradients(l_triplet: Tensor, l_asr: Tensor, gamma: float, theta: dict, phi: dict) -> dict:
    """Gradient assignment for already-built losses (two-pass routing)."""
    return route_two_pass(l_triplet, l_asr, theta, phi, gamma)
