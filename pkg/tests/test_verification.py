import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import MICRO_EXPECTED, MICRO_M, MICRO_UTTERANCES, eer_sweep
from tisv.errors import ConfigurationError, ContractError, DataError, DegenerateModelError
from tisv.verification import (ACCEPT, REJECT, DecisionPolicy, EvalReport, SpeakerModel, build_trials,
                               candidate_thresholds, compute_eer, decide, det_points, enroll, error_rates,
                               evaluate_embeddings, read_trials, score, score_trials)


# -- enrollment and scoring ----------------------------------------------------

def test_enroll_examples():
    v = np.array([0.3, -0.4])
    np.testing.assert_array_equal(enroll([v], "s").centroid, v)
    np.testing.assert_array_equal(enroll([np.array([1.0, 0]), np.array([0, 1.0])], "s").centroid, [0.5, 0.5])


@given(st.permutations(range(5)))
def test_enroll_order_invariant(perm):
    vecs = np.random.default_rng(0).normal(size=(5, 4))
    a = enroll(list(vecs), "s").centroid
    b = enroll(list(vecs[list(perm)]), "s").centroid
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_enroll_contract_and_immutability():
    with pytest.raises(ContractError):
        enroll([], "s")
    with pytest.raises(ContractError):
        enroll([np.ones(2), np.ones(3)], "s")
    m = enroll([np.ones(2)], "s")
    with pytest.raises(ValueError):
        m.centroid[0] = 5.0


def test_score_examples():
    m = enroll([np.array([1.0, 0]), np.array([0, 1.0])], "s")
    assert score(m, np.array([1.0, 1.0])) == pytest.approx(1.0, abs=1e-15)
    assert abs(score(m, np.array([1.0, 0.0])) - 0.70710678118654752) < 1e-12
    assert score(m, np.array([1.0, -1.0])) == 0.0
    with pytest.raises(DegenerateModelError):
        score(enroll([np.array([1.0, 0]), np.array([-1.0, 0])], "z"), np.ones(2))


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_score_scale_invariant(a, b, seed):
    rng = np.random.default_rng(seed)
    enr, x = rng.normal(size=(3, 5)), rng.normal(size=5)
    base = score(enroll(list(enr), "s"), x)
    assert score(enroll(list(enr * b), "s"), x * a) == pytest.approx(base, abs=1e-12)


def test_unit_vector_centroid_equivalence():
    vecs = np.random.default_rng(1).normal(size=(4, 6))
    units = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    x = np.random.default_rng(2).normal(size=6)
    mean_of_units = units.mean(axis=0)
    ref = x @ mean_of_units / np.linalg.norm(x) / np.linalg.norm(mean_of_units)
    assert score(enroll(list(units), "s"), x) == pytest.approx(ref, abs=1e-12)


def test_decide():
    assert decide(0.9, DecisionPolicy(0.5)) == ACCEPT
    assert decide(0.5, DecisionPolicy(0.5)) == REJECT
    assert decide(-1.0, DecisionPolicy(-1.0)) == REJECT
    with pytest.raises(ConfigurationError):
        DecisionPolicy(1.5)


def test_speaker_model_round_trip(tmp_path):
    m = enroll([np.array([1.0, 2.0]), np.array([0.5, 0.0])], "spk", "bin-red")
    m.save(tmp_path / "m.json", extra={"config_hash": "abc"})
    back = SpeakerModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.centroid, m.centroid)
    assert back.keyword == "bin-red" and back.speaker_id == "spk"
    (tmp_path / "bad.json").write_text("{", encoding="utf-8")
    with pytest.raises(DataError):
        SpeakerModel.load(tmp_path / "bad.json")


# -- EER ------------------------------------------------------------------------

def test_eer_examples():
    assert compute_eer([0.9, 0.8], [0.2, 0.1])[0] == 0.0
    eer, tau = compute_eer([0.9, 0.4], [0.5, 0.1])
    assert eer == 0.5 and 0.4 < tau <= 0.5
    s = [0.1, 0.4, 0.7]
    assert compute_eer(s, s)[0] == pytest.approx(0.5)
    with pytest.raises(ContractError):
        compute_eer([], [0.1])


@given(st.integers(0, 100_000), st.integers(1, 30), st.integers(1, 30), st.booleans())
def test_eer_matches_sweep_oracle(seed, nt, ni, ties):
    rng = np.random.default_rng(seed)
    tgt, imp = rng.normal(0.5, 0.3, nt), rng.normal(0.0, 0.3, ni)
    if ties:
        tgt, imp = np.round(tgt, 1), np.round(imp, 1)
    e, t = compute_eer(tgt, imp)
    eo, to = eer_sweep(list(tgt), list(imp))
    assert abs(e - eo) < 1e-12 and abs(t - to) < 1e-12


@given(st.integers(0, 100_000))
def test_eer_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    tgt, imp = rng.normal(0.3, 0.2, 15), rng.normal(0.0, 0.2, 20)
    e1, _ = compute_eer(tgt, imp)
    e2, _ = compute_eer(np.tanh(3 * tgt) + 2, np.tanh(3 * imp) + 2)
    assert e1 == pytest.approx(e2, abs=1e-12)


@given(st.integers(0, 100_000))
def test_decisions_at_eer_threshold_balance(seed):
    rng = np.random.default_rng(seed)
    tgt, imp = rng.normal(0.4, 0.3, 25), rng.normal(0.0, 0.3, 40)
    _, tau = compute_eer(tgt, imp)
    frr = np.mean([decide(s, tau) == REJECT for s in tgt])
    far = np.mean([decide(s, tau) == ACCEPT for s in imp])
    assert abs(far - frr) <= 1 / len(tgt) + 1 / len(imp) + 1e-12


def test_rates_and_det_points():
    far, frr = error_rates([0.5], [0.2], [0.2, 0.5])
    np.testing.assert_array_equal(far, [0.0, 0.0])
    np.testing.assert_array_equal(frr, [0.0, 1.0])
    th = candidate_thresholds([0.5], [0.2])
    assert th[0] < 0.2 and th[1] == 0.35 and th[-1] == 0.5
    assert len(det_points([0.5], [0.2])) == 3


# -- TK / NTK protocol ------------------------------------------------------------

def micro():
    spk = [s for s, _ in MICRO_UTTERANCES]
    kw = [k for _, k in MICRO_UTTERANCES]
    return spk, kw


@pytest.mark.parametrize("seed", range(5))
def test_micro_protocol_counts(seed):
    spk, kw = micro()
    emb = np.random.default_rng(seed).normal(size=(len(spk), 4))
    rep = evaluate_embeddings(emb, spk, kw, MICRO_M, seed)
    exp = MICRO_EXPECTED
    assert rep.enrollment_keywords == exp["enrollment_keywords"]
    assert rep.skipped_speakers == exp["skipped"]
    c = rep.counts
    assert (c["tk_target"], c["ntk_target"], c["tk_impostor"], c["ntk_impostor"], c["trials"]) == (
        exp["tk_target"], exp["ntk_target"], exp["tk_impostor"], exp["ntk_impostor"], exp["trials"])
    assert rep.eer_avg == pytest.approx((rep.eer_tk + rep.eer_ntk) / 2)


def test_trial_partition_definitions():
    spk, kw = micro()
    models, trials, _ = build_trials(spk, kw, MICRO_M, 0)
    enrolled = {i for _, _, idx in models for i in idx}
    assert not enrolled & set(trials.test_index.tolist())
    for j, t, tgt, tk in zip(trials.model_index, trials.test_index, trials.is_target, trials.is_tk):
        assert tgt == (spk[t] == models[j][0])
        assert tk == (kw[t] == models[j][1])


def test_impostor_trials_per_model_are_other_speakers_tests():
    rng = np.random.default_rng(0)
    spk = [f"s{i}" for i in range(4) for _ in range(12)]
    kw = [("a", "b")[j % 2] for _ in range(4) for j in range(12)]
    models, trials, skipped = build_trials(spk, kw, 5, 3)
    assert not skipped
    tests_per_spk = {s: 12 - 5 for s in set(spk)}
    for j, (s, _, _) in enumerate(models):
        n_imp = int(np.sum((trials.model_index == j) & ~trials.is_target))
        assert n_imp == sum(v for o, v in tests_per_spk.items() if o != s)


def test_keyword_free_embeddings_give_similar_tk_ntk():
    rng = np.random.default_rng(0)
    spk = [f"s{i}" for i in range(12) for _ in range(40)]
    kw = [("a", "b")[j % 2] for _ in range(12) for j in range(40)]
    centers = rng.normal(size=(12, 16))
    emb = np.repeat(centers, 40, axis=0) + 1.2 * rng.normal(size=(480, 16))
    rep = evaluate_embeddings(emb, spk, kw, 5, 0)
    assert abs(rep.eer_tk - rep.eer_ntk) < 5.0


def test_keyword_heavy_embeddings_raise_ntk():
    rng = np.random.default_rng(0)
    spk = [f"s{i}" for i in range(12) for _ in range(40)]
    kw_idx = np.tile(np.arange(40) % 2, 12)
    kw = [("a", "b")[k] for k in kw_idx]
    emb = (np.repeat(rng.normal(size=(12, 16)), 40, axis=0) + 3.0 * rng.normal(size=(2, 16))[kw_idx]
           + 0.8 * rng.normal(size=(480, 16)))
    rep = evaluate_embeddings(emb, spk, kw, 5, 0)
    assert rep.eer_ntk > rep.eer_tk + 10


def test_report_round_trip(tmp_path):
    spk, kw = micro()
    rep = evaluate_embeddings(np.random.default_rng(1).normal(size=(len(spk), 3)), spk, kw, MICRO_M, 1)
    rep.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == rep
    assert json.loads((tmp_path / "r.json").read_text())["pooling"] == "pooled"


def test_trials_file(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("model_speaker,test_utterance,label\na,u1,target\na,u2,impostor\n", encoding="utf-8")
    trials = read_trials(path)
    assert trials == [("a", "u1", True), ("a", "u2", False)]
    models = {"a": enroll([np.array([1.0, 0.0])], "a")}
    eer, _ = score_trials(models, {"u1": np.array([1.0, 0.1]), "u2": np.array([0.0, 1.0])}, trials)
    assert eer == 0.0
    path.write_text("a,u1,maybe\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_trials(path)
