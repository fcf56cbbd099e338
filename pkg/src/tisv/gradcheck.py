"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    kinks: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    worst: tuple[str, tuple[int, ...]] | None = None

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def rel_err(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params,
    eps: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``backward`` of scalar ``f()`` with central differences.

    ``params`` is anything with ``.items()`` yielding (name, leaf Tensor).
    When ``n_samples`` is given, that many coordinates are drawn uniformly
    over all parameters; otherwise every coordinate is checked.  A coordinate
    whose one-sided slopes disagree by far more than the central estimate's
    truncation error sits on a kink (ReLU, min); it is reported in ``kinks``
    and left out of the maximum.
    """
    items = list(params.items())
    for _, t in items:
        t.grad = None
    root = f()
    backward(root)
    f0 = root.item()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in items}

    coords: list[tuple[str, Tensor, tuple[int, ...]]] = []
    if n_samples is None:
        for name, t in items:
            coords.extend((name, t, idx) for idx in np.ndindex(t.shape))
    else:
        sizes = np.array([t.size for _, t in items])
        rng = np.random.default_rng(seed)
        flat = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for k in np.sort(flat):
            i = int(np.searchsorted(offsets, k, side="right") - 1)
            name, t = items[i]
            coords.append((name, t, np.unravel_index(int(k - offsets[i]), t.shape)))

    worst, worst_at = 0.0, None
    kinks = []
    for name, t, idx in coords:
        orig = t.data[idx]
        t.data[idx] = orig + eps
        fp = f().item()
        t.data[idx] = orig - eps
        fm = f().item()
        t.data[idx] = orig
        numeric = (fp - fm) / (2 * eps)
        fwd = (fp - f0) / eps
        bwd = (f0 - fm) / eps
        if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1.0):
            kinks.append((name, tuple(int(i) for i in idx)))
            continue
        e = rel_err(float(analytic[name][idx]), numeric, floor)
        if e > worst:
            worst, worst_at = e, (name, tuple(int(i) for i in idx))
    for _, t in items:
        t.grad = None
    return GradCheckReport(worst, len(coords) - len(kinks), kinks, worst_at)


# ---------------------------------------------------------------------------
# op-by-op suite


class _Leaves(dict):
    """Named leaf tensors; ``items()`` is what the checker consumes."""


def _leaves(rng: np.random.Generator, **shapes) -> _Leaves:
    return _Leaves({k: Tensor(rng.normal(size=s), requires_grad=True) for k, s in shapes.items()})


def check_suite(seed: int = 0, eps: float = 1e-5, n_points: int = 100) -> list[tuple[str, GradCheckReport]]:
    """Finite-difference check of every differentiable op and of the tiny network end to end.

    Each check samples ``n_points`` coordinates over its inputs.
    """
    from . import autograd as ag
    from . import asr_head, losses, network

    rng = np.random.default_rng(seed)
    out: list[tuple[str, GradCheckReport]] = []

    def run(name, f, leaves, **kw):
        out.append((name, finite_diff_check(f, leaves, eps=eps, seed=seed, n_samples=n_points)))

    def sq(t):
        return ag.tsum(ag.mul(t, t))

    p = _leaves(rng, a=(8, 16), b=(8, 16), w=(16, 6))
    p["b"].data = np.abs(p["b"].data) + 0.5  # positive, away from zero for div and log
    run("add/sub/mul", lambda: (p["a"] * p["b"] + p["a"] - p["b"]).sum(), p)
    run("div", lambda: (p["a"] / p["b"]).sum(), p)
    run("exp/log", lambda: (ag.log(p["b"]) + ag.exp(p["a"] * 0.3)).sum(), p)
    run("matmul", lambda: sq(ag.matmul(p["a"], p["w"])), p)
    run("affine", lambda: sq(ag.affine(p["a"], p["w"].T, p["w"][0])), p)
    run("mean/reshape/transpose", lambda: sq(ag.mean(ag.reshape(ag.transpose(p["a"]), (4, 32)), axis=0)), p)
    run("getitem/take/stack", lambda: sq(ag.stack([ag.take(p["a"], [0, 2, 2], axis=0), p["b"][1:4]], axis=0)), p)
    run("relu", lambda: (ag.relu(p["a"]) * p["b"]).sum(), p)
    run("minimum", lambda: ag.minimum(p["a"], p["b"]).sum(), p)
    run("softmax", lambda: (ag.softmax(p["a"], axis=1) * p["b"]).sum(), p)
    run("log_softmax", lambda: (ag.log_softmax(p["a"], axis=1) * p["b"]).sum(), p)
    run("l2_normalize", lambda: (ag.l2_normalize(p["a"]) * p["b"]).sum(), p)
    run("cosine", lambda: ag.cosine(p["a"], p["b"], axis=-1).sum(), p)
    # a single reversal deliberately disagrees with finite differences; two compose to the identity
    run("grad_reverse pair", lambda: (ag.grad_reverse(ag.grad_reverse(p["a"], 0.5), 2.0) * p["b"]).sum(), p)

    c = _leaves(rng, x=(2, 4, 16), w=(4, 4, 3), bias=(4,))
    for stride in (1, 2):
        run(f"conv1d stride {stride}", lambda s=stride: sq(ag.conv1d(c["x"], c["w"], c["bias"], stride=s)), c)

    bn = _leaves(rng, x=(4, 3, 10), gamma=(3,), beta=(3,))
    target = rng.normal(size=(4, 3, 10))
    state = ag.BatchNormState(3)
    state.frozen = True
    run("batch_norm train", lambda: (ag.batch_norm(bn["x"], bn["gamma"], bn["beta"], state, "train") * target).sum(), bn)
    state.mean, state.var = rng.normal(size=3), np.abs(rng.normal(size=3)) + 0.5
    state.initialized = True
    run("batch_norm infer", lambda: (ag.batch_norm(bn["x"], bn["gamma"], bn["beta"], state, "infer") * target).sum(), bn)

    e = _leaves(rng, emb=(12, 10))
    spk = [s for s in "abcd" for _ in range(3)]

    def trip():
        z = ag.l2_normalize(e["emb"])
        idx = losses.mine_violating_indices(z.data @ z.data.T, spk, 0.2)
        return losses.batch_triplet_loss(z, idx, 0.2)

    run("triplet", trip, e)
    head = asr_head.build_head(asr_head.AsrHeadConfig(3, 10), seed)
    labels = np.arange(12) % 3
    run("asr cross-entropy", lambda: asr_head.asr_loss(asr_head.classify(head, e["emb"]), labels),
        _Leaves(e) | _Leaves(head.items()))

    store = network.build_network(network.TINY_CONFIG, seed)
    for st in store.bn.values():
        st.initialized = True
        st.frozen = True
    waves = rng.normal(size=(3, network.TINY_CONFIG.input_len))
    proj = rng.normal(size=(3, network.TINY_CONFIG.embed_dim))
    for mode in ("train", "infer"):
        run(f"network {mode}", lambda m=mode: (network.forward(store, waves, m) * proj).sum(), store)
    return out
