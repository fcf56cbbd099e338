"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import MICRO_EXPECTED, MICRO_M, MICRO_UTTERANCES, eer_sweep, mine_brute_force, record_criterion
from tisv import autograd as ag
from tisv.asr_head import AsrHeadConfig, build_head
from tisv.cli import main
from tisv.data import Corpus, SynthSpec, generate_synthetic
from tisv.errors import ContractError
from tisv.experiment import SweepConfig, run_sweep
from tisv.gradcheck import check_suite
from tisv.losses import AdvConfig, adversarial_gradients, mine_violating_indices, triplet_loss
from tisv.network import TINY_CONFIG, SeNetConfig, build_network, forward
from tisv.optim import Sgd, SgdConfig
from tisv.trainer import FinetuneConfig, PretrainConfig, finetune_adversarial, pretrain_speaker_softmax
from tisv.verification import build_trials, compute_eer, decide, enroll, run_tk_ntk_protocol, score


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_1_gradient_checks():
    t0 = time.perf_counter()
    reports = check_suite(seed=0, n_points=100)
    elapsed = time.perf_counter() - t0
    op = max(r.max_rel_err for name, r in reports if not name.startswith("network"))
    net = max(r.max_rel_err for name, r in reports if name.startswith("network"))
    ok = op < 1e-4 and net < 1e-3 and elapsed < 120 and len(reports) > 2
    record_criterion(1, "finite-difference gradient checks", ok,
                     f"{len(reports)} checks, op max rel err {op:.2e}, network {net:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_2_triplet_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(10_000):
        d = int(rng.integers(2, 17))
        margin = float(rng.uniform(0.0, 1.0))
        a, p, n = unit_rows(rng, 3, d)
        closed = -min(float(a @ p) - float(a @ n), margin)
        worst = max(worst, abs(triplet_loss((a, p, n), margin).item() - closed))
    mismatches = 0
    for i in range(500):
        n_spk, k = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        speakers = [f"s{s}" for s in range(n_spk) for _ in range(k)]
        z = unit_rows(rng, len(speakers), int(rng.integers(2, 9)))
        sim = z @ z.T
        margin = float(rng.uniform(0.0, 1.0))
        got = [tuple(int(v) for v in row) for row in mine_violating_indices(sim, speakers, margin)]
        mismatches += got != mine_brute_force(sim.tolist(), speakers, margin)
    ok = worst <= 1e-12 and mismatches == 0
    record_criterion(2, "triplet loss and mining oracles", ok,
                     f"max loss diff {worst:.1e} over 10000 triplets, {mismatches}/500 mining mismatches")
    assert ok


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_3_eer_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(1000):
        nt, ni = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        tgt = rng.normal(float(rng.uniform(0, 2)), 1.0, nt)
        imp = rng.normal(0.0, 1.0, ni)
        if i % 3 == 0:
            # coarse grid forces ties within and across the two sets
            tgt, imp = np.round(tgt, 1), np.round(imp, 1)
        eer, tau = compute_eer(tgt, imp)
        ref_eer, ref_tau = eer_sweep(tgt.tolist(), imp.tolist())
        worst = max(worst, abs(eer - ref_eer), abs(tau - ref_tau))
    separable = compute_eer([0.9, 0.8, 0.7], [0.1, 0.2, 0.3])[0]
    same = np.linspace(-1, 1, 11)
    identical = compute_eer(same, same)[0]
    ok = worst <= 1e-12 and separable == 0.0 and abs(identical - 0.5) <= 1e-12
    record_criterion(3, "EER oracle", ok,
                     f"max diff {worst:.1e} over 1000 score sets, separable {separable}, identical {identical}")
    assert ok


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_4_adversarial_routing():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        store = build_network(TINY_CONFIG, seed)
        head = build_head(AsrHeadConfig(2, TINY_CONFIG.embed_dim), seed)
        waves = rng.normal(size=(6, TINY_CONFIG.input_len))
        speakers = list("aabbcc")
        labels = rng.integers(0, 2, 6)
        gamma = float(rng.uniform(0.0, 1.0))
        theta = dict(store.items())
        fwd = lambda: forward(store, waves, "train")
        gj, _ = adversarial_gradients(fwd, head, theta, speakers, labels, 0.2, gamma, "junction")
        gt, _ = adversarial_gradients(fwd, head, theta, speakers, labels, 0.2, gamma, "two_pass")
        assert gj.keys() == gt.keys()
        worst = max(worst, max(float(np.max(np.abs(gj[k] - gt[k]))) for k in gj))

    corpus, _ = generate_synthetic(SynthSpec(n_speakers=6, n_keywords=2, utts_per_pair=4, segment_len=128, seed=4))
    kws = corpus.keyword_set()
    train = corpus.subset([i for i, (s, k) in enumerate(zip(corpus.speakers, corpus.keywords))
                           if k == kws[int(s[-1]) % 2]])
    net = SeNetConfig(input_len=128, n_convres_units=2, n_tail_resblocks=1, embed_dim=8, channel_schedule=[4, 8])
    base, _ = pretrain_speaker_softmax(corpus, net, PretrainConfig(epochs=1, batch_size=16, seed=0))
    cfg = dict(epochs=3, p=3, k=4, sgd=SgdConfig(0.01), seed=0, adv=AdvConfig(0.0))
    a, _, ra = finetune_adversarial(base, train, FinetuneConfig(**cfg))
    b, _, rb = finetune_adversarial(base, train, FinetuneConfig(use_asr_head=False, **cfg))
    # checkpoint metadata carries the differing config hash, so compare the weight and BN state
    same_traj = a.digest() == b.digest() and [s["l_triplet"] for s in ra.steps] == [s["l_triplet"] for s in rb.steps]
    ok = worst < 1e-12 and same_traj
    record_criterion(4, "adversarial gradient routing", ok,
                     f"junction vs two-pass max diff {worst:.1e} over 100 networks, "
                     f"gamma=0 bit-identical to triplet-only: {same_traj}")
    assert ok


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_5_enroll_score_decide():
    errs = [
        abs(score(enroll([[1.0, 0.0], [0.0, 1.0]], "s"), [1.0, 0.0]) - 1 / math.sqrt(2)),
        abs(score(enroll([[3.0, 4.0]], "s"), [4.0, 3.0]) - 0.96),
        abs(score(enroll(np.eye(3), "s"), [1.0, 1.0, 1.0]) - 1.0),
        abs(score(enroll([[1.0, 0.0], [-1.0, 2.0]], "s"), [0.0, -1.0]) - (-1.0)),
    ]
    decisions = [decide(1 / math.sqrt(2), 0.7), decide(0.7, 0.7), decide(-0.2, -0.3)]
    rng = np.random.default_rng(5)
    scale_err = 0.0
    for _ in range(1000):
        d = int(rng.integers(2, 33))
        emb = rng.normal(size=(int(rng.integers(1, 6)), d))
        x = rng.normal(size=d)
        c = float(np.exp(rng.uniform(-6, 6)))
        s = score(enroll(emb, "s"), x)
        scale_err = max(scale_err, abs(score(enroll(emb, "s"), c * x) - s), abs(score(enroll(emb * c, "s"), x) - s))
    ok = max(errs) <= 1e-12 and decisions == ["accept", "reject", "accept"] and scale_err <= 1e-12
    record_criterion(5, "centroid-cosine enrollment, scoring and decision", ok,
                     f"hand values max err {max(errs):.1e}, decisions {decisions}, rescaling max diff {scale_err:.1e}")
    assert ok


# -- 6 ---------------------------------------------------------------------------------

GAMMAS = (0.0, 0.2, 0.4)


def sweep_outcomes(seeds=range(5), ns=(2, 3, 4)):
    """{N: [(probe drop, ntk change, max tk change, head accs) per seed]}"""
    out = {n: [] for n in ns}
    for seed in seeds:
        base = None
        for n in ns:
            res, base = run_sweep(SweepConfig(seed=seed, n_keywords=n, gammas=GAMMAS), base)
            by = {r.gamma: r for r in res}
            out[n].append(dict(
                probe=[by[g].probe_acc for g in GAMMAS],
                head=[by[g].head_acc for g in GAMMAS],
                ntk=[by[g].eer_ntk for g in GAMMAS],
                tk=[by[g].eer_tk for g in GAMMAS],
            ))
    return out


def trend_holds(row) -> tuple[bool, bool, bool]:
    p, ntk, tk = row["probe"], row["ntk"], row["tk"]
    a = p[0] > p[-1] and p[0] - p[-1] >= 0.15
    b = ntk[-1] < ntk[0]
    c = max(abs(t - tk[0]) for t in tk) < 3.0
    return a, b, c


def test_criterion_6_gamma_sweep_trend():
    t0 = time.perf_counter()
    out = sweep_outcomes()
    lines, ok = [], True
    for n, rows in out.items():
        checks = [trend_holds(r) for r in rows]
        n_all = sum(all(c) for c in checks)
        ok &= n_all >= 4
        counts = [sum(c[i] for c in checks) for i in range(3)]
        lines.append(f"N={n}: all three in {n_all}/5 seeds (a {counts[0]}/5, b {counts[1]}/5, c {counts[2]}/5)")
        for seed, r in enumerate(rows):
            print(f"N={n} seed={seed} probe={np.round(r['probe'], 3).tolist()} head={np.round(r['head'], 3).tolist()} "
                  f"ntk={np.round(r['ntk'], 2).tolist()} tk={np.round(r['tk'], 2).tolist()} holds={trend_holds(r)}")
    record_criterion(6, "gamma sweep trend on the synthetic corpus", ok,
                     "; ".join(lines) + f"; {time.perf_counter() - t0:.0f}s")
    assert ok


# -- 7 ---------------------------------------------------------------------------------

def one_step_geometry(seed):
    """(cos_ap, cos_an) before and after one SGD step on a triplet, or None if it is not violating."""
    store = build_network(TINY_CONFIG, seed)
    waves = np.random.default_rng(seed).normal(size=(3, TINY_CONFIG.input_len))
    forward(store, waves, "train")
    store.freeze_bn()

    def cosines():
        e = forward(store, waves, "train").data
        return float(e[0] @ e[1]), float(e[0] @ e[2])

    before = cosines()
    if before[0] - 0.2 > before[1]:
        return None
    emb = forward(store, waves, "train")
    loss = triplet_loss((emb[0], emb[1], emb[2]), 0.2)
    for t, g in zip(store.tensors(), ag.grad(loss, store.tensors())):
        t.grad = g
    Sgd(store, SgdConfig(1e-3)).step()
    return before, cosines()


def test_criterion_7_one_step_geometry():
    (ap0, an0), (ap1, an1) = one_step_geometry(0)
    ok = ap1 > ap0 and an1 < an0
    # across seeds the pair shares every weight, so only the gap is guaranteed to grow
    both, gap, total = 0, 0, 0
    for seed in range(1, 50):
        r = one_step_geometry(seed)
        if r is None:
            continue
        (a0, n0), (a1, n1) = r
        total += 1
        both += a1 > a0 and n1 < n0
        gap += (a1 - n1) > (a0 - n0)
    ok = ok and gap == total
    record_criterion(7, "one SGD step on a violating triplet", ok,
                     f"seed 0: cos_ap {ap0:.4f}->{ap1:.4f}, cos_an {an0:.4f}->{an1:.4f}; "
                     f"other seeds: gap grows {gap}/{total}, both cosines move the right way {both}/{total}")
    assert ok


# -- 8 ---------------------------------------------------------------------------------

DETERMINISM_CONFIG = """
[run]
seed = 8
[synth]
n_speakers = 8
n_keywords = 2
utts_per_pair = 6
segment_len = 128
[network]
input_len = 128
n_convres_units = 2
n_tail_resblocks = 1
embed_dim = 8
channel_schedule = [4, 8]
[pretrain]
epochs = 2
batch_size = 16
[finetune]
epochs = 2
p = 2
k = 4
gamma = 0.2
[split]
train_speakers = 4
eval_speakers = 4
[eval]
m_enroll = 2
"""


def pipeline(root: Path, cfg: Path) -> None:
    steps = [
        ["gen-data", "--out", root / "data"],
        ["train-base", "--data", root / "data", "--out", root / "base"],
        ["finetune", "--data", root / "data", "--base", root / "base" / "base.ckpt", "--out", root / "ft"],
        ["evaluate", "--data", root / "data", "--checkpoint", root / "ft" / "finetuned.ckpt",
         "--split", root / "ft" / "split.json", "--out", root / "ev"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv] + ["--config", str(cfg)]) == 0


def test_criterion_8_determinism(tmp_path, capsys):
    cfg = tmp_path / "cfg.ini"
    cfg.write_text(DETERMINISM_CONFIG, encoding="utf-8")
    pipeline(tmp_path / "a", cfg)
    pipeline(tmp_path / "b", cfg)
    capsys.readouterr()
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    # wall-clock timings live in their own file and are the only thing allowed to differ
    compared = [f for f in files if not f.name.endswith(".timing.json")]
    differ = [str(f) for f in compared if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    key = {"base/base.ckpt", "ft/finetuned.ckpt", "ft/asr_head.ckpt", "ev/eval_report.json"}
    ok = not differ and key <= {str(f) for f in compared}
    record_criterion(8, "bit-identical reruns", ok, f"{len(compared)} files compared, differing: {differ or 'none'}")
    assert ok


# -- 9 ---------------------------------------------------------------------------------

def test_criterion_9_protocol_audit():
    spk = [s for s, _ in MICRO_UTTERANCES]
    kw = [k for _, k in MICRO_UTTERANCES]
    rng = np.random.default_rng(9)
    corpus = Corpus(rng.normal(size=(len(spk), TINY_CONFIG.input_len)), spk, kw, [f"u{i}" for i in range(len(spk))])
    store = build_network(TINY_CONFIG, 0)
    forward(store, corpus.waves, "train")
    exp = MICRO_EXPECTED
    good = []
    for seed in range(5):
        rep = run_tk_ntk_protocol(store, corpus, MICRO_M, seed, train_speakers=["T1", "T2"])
        c = rep.counts
        good.append(rep.enrollment_keywords == exp["enrollment_keywords"] and rep.skipped_speakers == exp["skipped"]
                    and (c["tk_target"], c["ntk_target"], c["tk_impostor"], c["ntk_impostor"], c["trials"])
                    == (exp["tk_target"], exp["ntk_target"], exp["tk_impostor"], exp["ntk_impostor"], exp["trials"]))
    models, trials, _ = build_trials(spk, kw, MICRO_M, 0)
    enrolled = {i for _, _, idx in models for i in idx}
    partition = not enrolled & set(trials.test_index.tolist()) and all(
        tgt == (spk[t] == models[j][0]) and tk == (kw[t] == models[j][1])
        for j, t, tgt, tk in zip(trials.model_index, trials.test_index, trials.is_target, trials.is_tk))
    with pytest.raises(ContractError):
        run_tk_ntk_protocol(store, corpus, MICRO_M, 0, train_speakers=["A"])
    ok = all(good) and partition
    record_criterion(9, "TK/NTK protocol audit on the micro dataset", ok,
                     f"counts match for {sum(good)}/5 seeds, partition definitions hold: {partition}")
    assert ok
