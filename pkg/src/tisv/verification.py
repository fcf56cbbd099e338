"""Enrollment, centroid-cosine scoring, decisions and the TK/NTK EER protocol."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import EPS_NORM
from .errors import ConfigurationError, ContractError, DataError, DegenerateEmbeddingError, DegenerateModelError

log = logging.getLogger(__name__)

ACCEPT = "accept"
REJECT = "reject"


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


@dataclass(frozen=True)
class SpeakerModel:
    speaker_id: str
    enrollment: np.ndarray
    centroid: np.ndarray
    keyword: str | None = None

    @property
    def m(self) -> int:
        return self.enrollment.shape[0]

    def to_dict(self) -> dict:
        return {
            "speaker_id": self.speaker_id,
            "keyword": self.keyword,
            "enrollment": self.enrollment.tolist(),
            "centroid": self.centroid.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerModel":
        return enroll([np.asarray(v) for v in d["enrollment"]], d["speaker_id"], d.get("keyword"))

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        payload.update(extra or {})
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SpeakerModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read speaker model {path}: {exc}") from exc


def enroll(embeddings: Sequence, speaker_id: str, keyword: str | None = None) -> SpeakerModel:
    """Reference model whose centroid is the plain (unnormalised) mean of the enrollment vectors."""
    if len(embeddings) == 0:
        raise ContractError("enrollment needs at least one embedding")
    vecs = [_values(e) for e in embeddings]
    dims = {v.shape for v in vecs}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ContractError(f"enrollment embeddings have mixed or invalid shapes {sorted(dims)}")
    mat = np.stack(vecs)
    centroid = mat.sum(axis=0) / mat.shape[0]
    mat.flags.writeable = False
    centroid.flags.writeable = False
    return SpeakerModel(str(speaker_id), mat, centroid, keyword)


def score(model: SpeakerModel, x) -> float:
    """Cosine between ``x`` and the model centroid."""
    v = _values(x)
    c = model.centroid
    if v.shape != c.shape:
        raise ContractError(f"test embedding dim {v.shape} != model dim {c.shape}")
    nc = np.sqrt(c @ c)
    if nc <= EPS_NORM:
        raise DegenerateModelError(f"centroid of {model.speaker_id!r} has near-zero norm")
    nv = np.sqrt(v @ v)
    if nv <= EPS_NORM:
        raise DegenerateEmbeddingError("test embedding has near-zero norm")
    return float((v @ c) / (nv * nc))


@dataclass(frozen=True)
class DecisionPolicy:
    threshold: float

    def __post_init__(self):
        if not -1.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must lie in [-1, 1], got {self.threshold}")


def decide(s: float, policy: DecisionPolicy | float) -> str:
    """Accept iff the score is strictly greater than the threshold."""
    tau = policy.threshold if isinstance(policy, DecisionPolicy) else float(policy)
    return ACCEPT if s > tau else REJECT


# ---------------------------------------------------------------------------
# EER


def error_rates(target, impostor, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """(FAR, FRR) at each threshold under the accept-iff-greater rule."""
    tgt = np.sort(np.asarray(target, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    th = np.asarray(thresholds, dtype=np.float64)
    frr = np.searchsorted(tgt, th, side="right") / tgt.size
    far = 1.0 - np.searchsorted(imp, th, side="right") / imp.size
    return far, frr


def candidate_thresholds(target, impostor) -> np.ndarray:
    """Just below the minimum, every midpoint between distinct scores, and the maximum."""
    s = np.unique(np.concatenate([np.asarray(target, float), np.asarray(impostor, float)]))
    mids = (s[:-1] + s[1:]) / 2.0
    return np.concatenate([[np.nextafter(s[0], -np.inf)], mids, [s[-1]]])


def compute_eer(target_scores, impostor_scores) -> tuple[float, float]:
    """Equal error rate (fraction) and the threshold where FAR and FRR cross.

    FAR falls and FRR rises along the candidate thresholds; the crossing is
    located between the last candidate with FRR < FAR and the next one, and
    both rates are interpolated linearly there.
    """
    tgt = np.asarray(target_scores, dtype=np.float64).ravel()
    imp = np.asarray(impostor_scores, dtype=np.float64).ravel()
    if tgt.size == 0 or imp.size == 0:
        raise ContractError("compute_eer needs non-empty target and impostor score lists")
    th = candidate_thresholds(tgt, imp)
    far, frr = error_rates(tgt, imp, th)
    d = frr - far
    j = int(np.argmax(d >= 0))  # d[-1] == 1 > 0, so a crossing always exists
    if d[j] == 0 or j == 0:
        return float(far[j]), float(th[j])
    alpha = d[j - 1] / (d[j - 1] - d[j])
    eer = far[j - 1] + alpha * (far[j] - far[j - 1])
    tau = th[j - 1] + alpha * (th[j] - th[j - 1])
    return float(eer), float(tau)


def det_points(target_scores, impostor_scores) -> list[tuple[float, float, float]]:
    """Raw (FAR, FRR, threshold) triples over all candidate thresholds."""
    th = candidate_thresholds(target_scores, impostor_scores)
    far, frr = error_rates(target_scores, impostor_scores, th)
    return [(float(a), float(r), float(t)) for a, r, t in zip(far, frr, th)]


# ---------------------------------------------------------------------------
# TK / NTK protocol


@dataclass
class TrialSet:
    model_index: np.ndarray
    test_index: np.ndarray
    is_target: np.ndarray
    is_tk: np.ndarray

    def __len__(self) -> int:
        return self.model_index.size


@dataclass
class EvalReport:
    """Evaluation summary; every field is JSON-serialisable.

    EERs are percentages and scores are pooled over all speakers before a
    single EER per condition is computed.
    """

    eer_tk: float | None
    eer_ntk: float | None
    eer_avg: float | None
    threshold_tk: float | None
    threshold_ntk: float | None
    threshold_all: float | None
    eer_all: float | None
    counts: dict
    enrollment_keywords: dict
    skipped_speakers: list
    n_models: int
    m_enroll: int
    seed: int
    keyword_probe_accuracy: float | None = None
    pooling: str = "pooled"
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def build_trials(speakers: Sequence[str], keywords: Sequence[str], m: int = 5, seed: int = 0):
    """Enrollment draw and trial list for the TK/NTK protocol.

    Returns (models, trials, skipped) where ``models`` is a list of
    (speaker, keyword, enrollment indices) in sorted speaker order.  A speaker
    without ``m`` utterances of any single keyword is skipped and contributes
    no trials at all.
    """
    if m < 1:
        raise ConfigurationError(f"M must be >= 1, got {m}")
    speakers = [str(s) for s in speakers]
    keywords = [str(k) for k in keywords]
    rng = np.random.default_rng(seed)
    models, skipped = [], []
    test_sets: dict[str, list[int]] = {}
    for spk in sorted(set(speakers)):
        idx = [i for i, s in enumerate(speakers) if s == spk]
        per_kw: dict[str, list[int]] = {}
        for i in idx:
            per_kw.setdefault(keywords[i], []).append(i)
        eligible = sorted(k for k, v in per_kw.items() if len(v) >= m)
        if not eligible:
            log.warning("speaker %s skipped: no keyword with %d utterances", spk, m)
            skipped.append(spk)
            continue
        kw = eligible[int(rng.integers(len(eligible)))]
        pool = per_kw[kw]
        chosen = sorted(pool[j] for j in rng.permutation(len(pool))[:m])
        models.append((spk, kw, chosen))
        taken = set(chosen)
        test_sets[spk] = [i for i in idx if i not in taken]
    mi, ti, tgt, tk = [], [], [], []
    for j, (spk, kw, _) in enumerate(models):
        for other, tests in test_sets.items():
            for i in tests:
                mi.append(j)
                ti.append(i)
                tgt.append(other == spk)
                tk.append(keywords[i] == kw)
    trials = TrialSet(np.array(mi, dtype=np.intp), np.array(ti, dtype=np.intp),
                      np.array(tgt, dtype=bool), np.array(tk, dtype=bool))
    return models, trials, skipped


def _eer_or_none(tgt, imp):
    if len(tgt) == 0 or len(imp) == 0:
        return None, None
    e, t = compute_eer(tgt, imp)
    return 100.0 * e, t


def evaluate_embeddings(embeddings: np.ndarray, speakers, keywords, m: int = 5, seed: int = 0) -> EvalReport:
    """Run the TK/NTK protocol on precomputed (N, D) embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    models, trials, skipped = build_trials(speakers, keywords, m, seed)
    if not models:
        raise ContractError("no speaker could be enrolled")
    spk_models = [enroll(emb[idx], spk, kw) for spk, kw, idx in models]
    cents = np.stack([sm.centroid for sm in spk_models])
    norms = np.linalg.norm(cents, axis=1)
    if np.any(norms <= EPS_NORM):
        raise DegenerateModelError("degenerate enrollment centroid")
    x = emb[trials.test_index]
    c = cents[trials.model_index]
    scores = (x * c).sum(axis=1) / (np.linalg.norm(x, axis=1) * np.linalg.norm(c, axis=1))
    parts = {}
    for name, mask in (("tk", trials.is_tk), ("ntk", ~trials.is_tk), ("all", np.ones(len(trials), bool))):
        parts[name] = (scores[mask & trials.is_target], scores[mask & ~trials.is_target])
    eer_tk, th_tk = _eer_or_none(*parts["tk"])
    eer_ntk, th_ntk = _eer_or_none(*parts["ntk"])
    eer_all, th_all = _eer_or_none(*parts["all"])
    avg = (eer_tk + eer_ntk) / 2.0 if eer_tk is not None and eer_ntk is not None else None
    counts = {f"{n}_{kind}": int(len(v[i])) for n, v in parts.items() for i, kind in ((0, "target"), (1, "impostor"))}
    counts["trials"] = len(trials)
    return EvalReport(
        eer_tk=eer_tk, eer_ntk=eer_ntk, eer_avg=avg,
        threshold_tk=th_tk, threshold_ntk=th_ntk, threshold_all=th_all, eer_all=eer_all,
        counts=counts,
        enrollment_keywords={spk: kw for spk, kw, _ in models},
        skipped_speakers=skipped, n_models=len(models), m_enroll=m, seed=seed,
    )


def run_tk_ntk_protocol(store, corpus, m: int = 5, seed: int = 0, train_speakers: Sequence[str] = ()) -> EvalReport:
    """Embed ``corpus`` with a frozen network and evaluate it."""
    from .network import embed_matrix

    overlap = set(train_speakers) & set(corpus.speakers)
    if overlap:
        raise ContractError(f"evaluation speakers overlap training speakers: {sorted(overlap)}")
    emb = embed_matrix(store, corpus.waves)
    return evaluate_embeddings(emb, corpus.speakers, corpus.keywords, m, seed)


# ---------------------------------------------------------------------------
# external trial lists


def read_trials(path: str | Path) -> list[tuple[str, str, bool]]:
    """Rows of ``model_speaker,test_utterance,label`` with label target|impostor."""
    out = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].startswith("#"):
                    continue
                if lineno == 1 and row[0] == "model_speaker":
                    continue
                if len(row) != 3 or row[2] not in ("target", "impostor"):
                    raise DataError(f"{path}:{lineno}: expected model_speaker,test_utterance,target|impostor")
                out.append((row[0], row[1], row[2] == "target"))
    except DataError:
        raise
    except OSError as exc:
        raise DataError(f"cannot read trials {path}: {exc}") from exc
    return out


def score_trials(models: dict[str, SpeakerModel], embeddings: dict[str, np.ndarray], trials) -> tuple[float, float]:
    tgt, imp = [], []
    for spk, utt, is_target in trials:
        if spk not in models or utt not in embeddings:
            raise DataError(f"trial ({spk}, {utt}) references an unknown model or utterance")
        (tgt if is_target else imp).append(score(models[spk], embeddings[utt]))
    return compute_eer(tgt, imp)
