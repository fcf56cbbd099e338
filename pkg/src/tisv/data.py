"""Audio ingestion, segmentation, dataset splits and the synthetic corpus.

On-disk audio is RIFF/WAVE PCM16 mono only.  Manifests are CSV files with a
header row ``path,speaker,keyword,start,end`` where ``start``/``end`` are
sample indices (end exclusive).
"""

from __future__ import annotations

import csv
import json
import logging
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, SplitError, UnsupportedFormatError

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
MANIFEST_FIELDS = ("path", "speaker", "keyword", "start", "end")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"non-finite samples in {self.source_id or 'waveform'}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path: str | Path, expected_rate: int | None = None) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if channels != 1:
                raise UnsupportedFormatError(f"{path}: channels={channels}, only mono is supported")
            if width != 2:
                raise UnsupportedFormatError(f"{path}: bit depth={8 * width}, only 16-bit PCM is supported")
            raw = w.readframes(w.getnframes())
    except DataError:
        raise
    except wave.Error as exc:
        raise UnsupportedFormatError(f"{path}: format: {exc}") from exc
    except EOFError as exc:
        raise UnsupportedFormatError(f"{path}: header: truncated file") from exc
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if expected_rate is not None and rate != expected_rate:
        raise UnsupportedFormatError(f"{path}: sample rate={rate}, expected {expected_rate} (no resampling)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate, path.stem)


def write_wav(path: str | Path, wav: Waveform | np.ndarray, sample_rate: int | None = None) -> None:
    samples = np.asarray(getattr(wav, "samples", wav), dtype=np.float64)
    rate = sample_rate or getattr(wav, "sample_rate", DEFAULT_SAMPLE_RATE)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(rate))
        w.writeframes(pcm.tobytes())


def fit_length(samples: np.ndarray, length: int) -> np.ndarray:
    """Center-crop longer input, zero-pad the tail of shorter input."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    if n == length:
        return samples.copy()
    if n > length:
        start = (n - length) // 2
        return samples[start : start + length].copy()
    out = np.zeros(length)
    out[:n] = samples
    return out


def segment_random(
    wav: Waveform,
    min_sec: float = 1.5,
    max_sec: float = 2.0,
    seed: int = 0,
    input_len: int | None = None,
) -> Waveform | None:
    """Seeded random excerpt of length in [min_sec, max_sec]; None (with a warning) if ``wav`` is too short."""
    rate = wav.sample_rate
    lo, hi = int(round(min_sec * rate)), int(round(max_sec * rate))
    n = len(wav)
    if n < lo:
        log.warning("skipping %s: %.3f s shorter than %.3f s", wav.source_id, wav.duration, min_sec)
        return None
    rng = np.random.default_rng(seed)
    length = int(rng.integers(lo, min(hi, n) + 1))
    start = int(rng.integers(0, n - length + 1))
    seg = wav.samples[start : start + length]
    if input_len is not None:
        seg = fit_length(seg, input_len)
    return Waveform(seg, rate, f"{wav.source_id}@{start}+{length}")


# ---------------------------------------------------------------------------
# corpora


@dataclass
class Corpus:
    """Fixed-length labelled segments: ``waves`` is (N, L)."""

    waves: np.ndarray
    speakers: list[str]
    keywords: list[str]
    utt_ids: list[str]
    sample_rate: int = DEFAULT_SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.waves = np.asarray(self.waves, dtype=np.float64)
        if self.waves.ndim != 2:
            self.waves = self.waves.reshape(len(self.utt_ids), -1)
        n = self.waves.shape[0]
        if not (len(self.speakers) == len(self.keywords) == len(self.utt_ids) == n):
            raise DataError("corpus label columns and waveforms disagree in length")

    def __len__(self) -> int:
        return len(self.utt_ids)

    @property
    def segment_len(self) -> int:
        return self.waves.shape[1]

    def speaker_set(self) -> list[str]:
        return sorted(set(self.speakers))

    def keyword_set(self) -> list[str]:
        return sorted(set(self.keywords))

    def indices(self, speaker: str | None = None, keyword: str | None = None) -> np.ndarray:
        spk = np.asarray(self.speakers)
        kw = np.asarray(self.keywords)
        mask = np.ones(len(self), dtype=bool)
        if speaker is not None:
            mask &= spk == speaker
        if keyword is not None:
            mask &= kw == keyword
        return np.flatnonzero(mask)

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx, dtype=np.intp)
        meta = dict(self.meta)
        if "utt_seeds" in meta:
            meta["utt_seeds"] = [meta["utt_seeds"][i] for i in idx]
        return Corpus(
            self.waves[idx].reshape(len(idx), self.segment_len),
            [self.speakers[i] for i in idx],
            [self.keywords[i] for i in idx],
            [self.utt_ids[i] for i in idx],
            self.sample_rate,
            meta,
        )

    def filter(self, speakers=None, keywords=None) -> "Corpus":
        spk = set(speakers) if speakers is not None else None
        kws = set(keywords) if keywords is not None else None
        idx = [
            i
            for i in range(len(self))
            if (spk is None or self.speakers[i] in spk) and (kws is None or self.keywords[i] in kws)
        ]
        return self.subset(idx)

    def with_length(self, length: int) -> "Corpus":
        if length == self.segment_len:
            return self
        out = self.subset(np.arange(len(self)))
        out.waves = np.stack([fit_length(w, length) for w in self.waves])
        return out

    def save(self, directory: str | Path, factor_seeds: Sequence[int] | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "waves.npy", self.waves)
        seeds = factor_seeds if factor_seeds is not None else self.meta.get("utt_seeds", [""] * len(self))
        with open(d / "ground_truth.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["utt_id", "speaker", "keyword", "seed"])
            for row in zip(self.utt_ids, self.speakers, self.keywords, seeds):
                w.writerow(row)
        meta = {k: v for k, v in self.meta.items() if k != "utt_seeds"}
        meta["sample_rate"] = self.sample_rate
        (d / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "Corpus":
        d = Path(directory)
        try:
            waves = np.load(d / "waves.npy")
            meta = json.loads((d / "corpus.json").read_text(encoding="utf-8"))
            with open(d / "ground_truth.csv", newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load corpus from {d}: {exc}") from exc
        rate = int(meta.pop("sample_rate", DEFAULT_SAMPLE_RATE))
        meta["utt_seeds"] = [int(r["seed"]) if r["seed"] else "" for r in rows]
        return cls(waves, [r["speaker"] for r in rows], [r["keyword"] for r in rows],
                   [r["utt_id"] for r in rows], rate, meta)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRow:
    path: str
    speaker: str
    keyword: str
    start: int
    end: int


@dataclass
class ManifestResult:
    segments: list[tuple[Waveform, str, str]]
    errors: list[str]

    def summary(self) -> str:
        return f"{len(self.segments)} segments, {len(self.errors)} row errors"


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return []
            missing = [f for f in MANIFEST_FIELDS if f not in reader.fieldnames]
            if missing:
                raise DataError(f"{path}: manifest header lacks {missing}")
            rows = []
            for lineno, r in enumerate(reader, start=2):
                try:
                    row = ManifestRow(r["path"], r["speaker"], r["keyword"], int(r["start"]), int(r["end"]))
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: bad row {r}: {exc}") from exc
                if not row.speaker or not row.keyword:
                    raise DataError(f"{path}:{lineno}: empty speaker or keyword")
                if not 0 <= row.start < row.end:
                    raise DataError(f"{path}:{lineno}: need 0 <= start < end, got {row.start}, {row.end}")
                rows.append(row)
            return rows
    except DataError:
        raise
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc


def iter_manifest_segments(rows: Sequence[ManifestRow], base_dir: str | Path | None = None,
                           errors: list | None = None, expected_rate: int | None = None
                           ) -> Iterator[tuple[Waveform, str, str]]:
    cache: dict[str, Waveform] = {}
    for i, row in enumerate(rows):
        p = Path(row.path)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        try:
            key = str(p)
            if key not in cache:
                cache.clear()
                cache[key] = read_wav(p, expected_rate)
            wav = cache[key]
            if row.end > len(wav):
                raise DataError(f"row {i}: end {row.end} beyond file length {len(wav)} ({p.name})")
        except DataError as exc:
            if errors is None:
                raise
            errors.append(str(exc))
            continue
        seg = Waveform(wav.samples[row.start : row.end], wav.sample_rate, f"{p.stem}:{row.start}-{row.end}")
        yield seg, row.speaker, row.keyword


def segment_by_manifest(rows: Sequence[ManifestRow], base_dir: str | Path | None = None,
                        expected_rate: int | None = None) -> ManifestResult:
    """Cut every manifest row out of its file, in manifest order; bad rows are collected, not raised."""
    errors: list[str] = []
    segments = list(iter_manifest_segments(rows, base_dir, errors, expected_rate))
    if errors:
        log.warning("manifest: %d of %d rows failed", len(errors), len(rows))
    return ManifestResult(segments, errors)


def corpus_from_segments(segments, length: int) -> Corpus:
    waves = np.stack([fit_length(w.samples, length) for w, _, _ in segments]) if segments else np.zeros((0, length))
    rate = segments[0][0].sample_rate if segments else DEFAULT_SAMPLE_RATE
    return Corpus(waves, [s for _, s, _ in segments], [k for _, _, k in segments],
                  [w.source_id for w, _, _ in segments], rate)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    train_keyword: dict[str, str]
    validation: dict[str, list[str]]
    eval_speakers: list[str]
    seed: int = 0

    def __post_init__(self):
        overlap = set(self.train_keyword) & set(self.eval_speakers)
        if overlap:
            raise SplitError(f"evaluation speakers overlap training speakers: {sorted(overlap)}")

    @property
    def train_speakers(self) -> list[str]:
        return list(self.train_keyword)

    def to_dict(self) -> dict:
        return asdict(self)


def make_split(corpus: Corpus, n_train_speakers: int, n_eval_speakers: int, seed: int = 0,
               keywords: Sequence[str] | None = None) -> SplitSpec:
    """Speaker-disjoint train/eval split with one keyword per training speaker.

    Training speakers get keywords round-robin over a seeded permutation so
    every keyword is chosen by roughly the same number of speakers; their
    remaining keywords become validation data.
    """
    kw_all = sorted(keywords) if keywords is not None else corpus.keyword_set()
    speakers = corpus.speaker_set()
    if n_train_speakers < 1 or n_eval_speakers < 1 or n_train_speakers + n_eval_speakers > len(speakers):
        raise ConfigurationError(
            f"cannot split {len(speakers)} speakers into {n_train_speakers} train + {n_eval_speakers} eval"
        )
    rng = np.random.default_rng(seed)
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    train, evals = order[:n_train_speakers], sorted(order[n_train_speakers : n_train_speakers + n_eval_speakers])
    have = {(s, k) for s, k in zip(corpus.speakers, corpus.keywords)}
    kw_order = [kw_all[i] for i in rng.permutation(len(kw_all))]
    chosen: dict[str, str] = {}
    validation: dict[str, list[str]] = {}
    for i, spk in enumerate(sorted(train)):
        avail = [k for k in kw_order if (spk, k) in have]
        if not avail:
            raise ConfigurationError(f"training speaker {spk} has none of the keywords {kw_all}")
        pick = kw_order[i % len(kw_order)]
        chosen[spk] = pick if pick in avail else avail[0]
        validation[spk] = [k for k in kw_all if k != chosen[spk] and (spk, k) in have]
    return SplitSpec(chosen, validation, evals, seed)


def apply_split(corpus: Corpus, split: SplitSpec, keywords: Sequence[str] | None = None,
                allow_multi_keyword: bool = False) -> tuple[Corpus, Corpus, Corpus]:
    """(train, validation, evaluation) corpora for ``split``."""
    kws = set(keywords) if keywords is not None else None
    train_idx, val_idx, eval_idx = [], [], []
    evals = set(split.eval_speakers)
    for i, (s, k) in enumerate(zip(corpus.speakers, corpus.keywords)):
        if kws is not None and k not in kws:
            continue
        if s in split.train_keyword:
            if k == split.train_keyword[s]:
                train_idx.append(i)
            elif k in split.validation.get(s, []):
                val_idx.append(i)
        elif s in evals:
            eval_idx.append(i)
    train = corpus.subset(train_idx)
    check_one_keyword_per_speaker(train, allow_multi_keyword)
    return train, corpus.subset(val_idx), corpus.subset(eval_idx)


def check_one_keyword_per_speaker(corpus: Corpus, allow: bool = False) -> None:
    seen: dict[str, set] = {}
    for s, k in zip(corpus.speakers, corpus.keywords):
        seen.setdefault(s, set()).add(k)
    bad = {s: sorted(k) for s, k in seen.items() if len(k) > 1}
    if bad and not allow:
        raise SplitError(f"training speakers with more than one keyword: {bad}")


# ---------------------------------------------------------------------------
# synthetic speaker x keyword corpus


@dataclass
class SynthSpec:
    """Speaker factor: pitch and spectral tilt.  Keyword factor: formant and envelope."""

    n_speakers: int = 16
    n_keywords: int = 4
    utts_per_pair: int = 8
    segment_len: int = 512
    sample_rate: int = DEFAULT_SAMPLE_RATE
    f0_range: tuple[float, float] = (110.0, 260.0)
    tilt_range: tuple[float, float] = (0.6, 1.8)
    f0_jitter: float = 0.02
    formant_range: tuple[float, float] = (600.0, 3200.0)
    formant_gain: float = 6.0
    formant_bw: float = 300.0
    speaker_resonances: int = 2
    resonance_range: tuple[float, float] = (300.0, 3500.0)
    resonance_gain: float = 4.0
    resonance_bw: float = 250.0
    envelope_depth: float = 0.6
    noise_level: float = 0.02
    seed: int = 0
    speaker_prefix: str = "spk"
    keyword_names: list[str] | None = None

    def __post_init__(self):
        if self.n_speakers < 1 or self.n_keywords < 1 or self.utts_per_pair < 1 or self.segment_len < 1:
            raise ConfigurationError(f"synthetic corpus sizes must be positive: {self}")
        if self.noise_level < 0:
            raise ConfigurationError("noise_level must be non-negative")
        if self.keyword_names is not None and len(self.keyword_names) != self.n_keywords:
            raise ConfigurationError("keyword_names length must equal n_keywords")
        self.f0_range = tuple(self.f0_range)
        self.tilt_range = tuple(self.tilt_range)
        self.formant_range = tuple(self.formant_range)
        self.resonance_range = tuple(self.resonance_range)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


CHIME_COMMANDS = ("bin", "place", "set", "lay")
CHIME_COLORS = ("white", "red", "green", "blue")


def chime_keywords() -> list[str]:
    return [f"{c}-{k}" for c in CHIME_COMMANDS for k in CHIME_COLORS]


def _factor_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def speaker_factors(spec: SynthSpec, s: int) -> tuple[float, float, np.ndarray]:
    """(pitch Hz, spectral tilt, resonance centres Hz) of speaker ``s``."""
    rng = _factor_rng(spec.seed, 1, s)
    f0, tilt = float(rng.uniform(*spec.f0_range)), float(rng.uniform(*spec.tilt_range))
    return f0, tilt, np.sort(rng.uniform(*spec.resonance_range, size=spec.speaker_resonances))


def keyword_factors(spec: SynthSpec, k: int) -> dict:
    # keyword factors depend on the keyword index only, so corpora built with
    # different seeds share one vocabulary of keyword sounds
    rng = _factor_rng(7919, 2, k)
    return {
        "formant": float(rng.uniform(*spec.formant_range)),
        "peaks": np.sort(rng.uniform(0.15, 0.85, size=2)),
        "width": float(rng.uniform(0.08, 0.2)),
        "chirp": float(rng.uniform(-0.08, 0.08)),
    }


def synth_utterance(spec: SynthSpec, s: int, k: int, u: int) -> np.ndarray:
    """Deterministic waveform for (speaker, keyword, utterance index)."""
    f0, tilt, res = speaker_factors(spec, s)
    kf = keyword_factors(spec, k)
    rng = _factor_rng(spec.seed, 3, s, k, u)
    L, sr = spec.segment_len, spec.sample_rate
    pos = np.linspace(0.0, 1.0, L)
    f0_u = f0 * (1.0 + spec.f0_jitter * rng.standard_normal())
    inst = f0_u * (1.0 + kf["chirp"] * (pos - 0.5))
    phase = 2 * np.pi * np.cumsum(inst) / sr
    n_harm = max(1, int((sr / 2 - 1) // (f0_u * (1 + abs(kf["chirp"])))))
    h = np.arange(1, n_harm + 1)
    fh = h * f0_u
    timbre = 1.0 + spec.resonance_gain * np.exp(-(((fh[:, None] - res[None, :]) / spec.resonance_bw) ** 2)).sum(axis=1)
    amp = h ** (-tilt) * timbre * (1.0 + spec.formant_gain * np.exp(-(((fh - kf["formant"]) / spec.formant_bw) ** 2)))
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    src = (amp[:, None] * np.sin(h[:, None] * phase[None, :] + phases[:, None])).sum(axis=0)
    env = sum(np.exp(-0.5 * ((pos - p) / kf["width"]) ** 2) for p in kf["peaks"])
    env = (1.0 - spec.envelope_depth) + spec.envelope_depth * env / env.max()
    x = env * src
    x = 0.5 * x / np.max(np.abs(x))
    if spec.noise_level:
        x = x + spec.noise_level * rng.standard_normal(L)
    return np.clip(x, -1.0, 1.0)


def generate_synthetic(spec: SynthSpec, keyword_subset: Sequence[int] | None = None) -> tuple[Corpus, list[dict]]:
    """Balanced speaker x keyword grid; returns the corpus and its ground-truth factor table.

    ``keyword_subset`` restricts generation to those keyword indices; each
    utterance is identical to the one the full grid would contain.
    """
    names = spec.keyword_names or (chime_keywords() if spec.n_keywords <= 16 else None)
    if names is None:
        names = [f"kw{k:02d}" for k in range(spec.n_keywords)]
    names = list(names)[: spec.n_keywords]
    waves, speakers, keywords, utts, table = [], [], [], [], []
    for s in range(spec.n_speakers):
        f0, tilt, _ = speaker_factors(spec, s)
        spk = f"{spec.speaker_prefix}{s:03d}"
        for k in (range(spec.n_keywords) if keyword_subset is None else sorted(keyword_subset)):
            kf = keyword_factors(spec, k)
            for u in range(spec.utts_per_pair):
                uid = f"{spk}_{names[k]}_{u:03d}"
                waves.append(synth_utterance(spec, s, k, u))
                speakers.append(spk)
                keywords.append(names[k])
                utts.append(uid)
                table.append({"utt_id": uid, "speaker": spk, "keyword": names[k], "seed": spec.seed,
                              "speaker_index": s, "keyword_index": k, "f0": f0, "tilt": tilt,
                              "formant": kf["formant"]})
    meta = {"synth_spec": spec.to_dict(), "utt_seeds": [spec.seed] * len(utts)}
    corpus = Corpus(np.stack(waves), speakers, keywords, utts, spec.sample_rate, meta)
    return corpus, table
