"""Raw-waveform speaker-embedding network.

Pipeline for a batch shaped (B, 1, T)::

    n_convres_units x [strided conv -> BN -> ReLU -> residual block]
    n_tail_resblocks x residual block          (constant channels and length)
    attention: one scalar score per frame, softmax over time
    time average of attention-weighted frames -> L2 normalisation

A residual block is ``x + BN(conv(ReLU(BN(conv(x)))))``; it has no output
non-linearity so that a zeroed branch is exactly the identity map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ContractError, DegenerateEmbeddingError
from .params import ParameterStore, SplitMix64, fan_in_uniform


@dataclass
class SeNetConfig:
    input_len: int = 32000
    n_convres_units: int = 10
    n_tail_resblocks: int = 5
    embed_dim: int = 128
    channel_schedule: list[int] | None = None
    kernel_size_unit: int = 5
    kernel_size_resblock: int = 3
    stride_per_unit: int = 2

    def __post_init__(self):
        if self.channel_schedule is None:
            sched = [min(2 ** (k + 1), self.embed_dim) for k in range(self.n_convres_units)]
            if sched:
                sched[-1] = self.embed_dim
            self.channel_schedule = sched
        else:
            self.channel_schedule = [int(c) for c in self.channel_schedule]
        self.validate()

    def validate(self) -> None:
        ints = (self.input_len, self.n_convres_units, self.embed_dim,
                self.kernel_size_unit, self.kernel_size_resblock, self.stride_per_unit)
        if any(int(v) != v or v < 1 for v in ints) or self.n_tail_resblocks < 0:
            raise ConfigurationError(f"network sizes must be positive integers: {self}")
        if len(self.channel_schedule) != self.n_convres_units:
            raise ConfigurationError(
                f"channel_schedule has {len(self.channel_schedule)} entries for "
                f"{self.n_convres_units} conv-res units"
            )
        if self.channel_schedule[-1] != self.embed_dim:
            raise ConfigurationError(
                f"last channel count {self.channel_schedule[-1]} must equal embed_dim {self.embed_dim}"
            )
        if any(c < 1 for c in self.channel_schedule):
            raise ConfigurationError("channel counts must be positive")
        if self.input_len // self.stride_per_unit**self.n_convres_units < 1:
            raise ConfigurationError("input_len too short: no time frame survives the conv-res units")
        for t in self.frame_lengths()[:-1]:
            if t < self.kernel_size_unit:
                raise ConfigurationError(f"a conv-res unit sees {t} samples, shorter than its kernel")
        if self.frame_lengths()[-1] < self.kernel_size_resblock:
            raise ConfigurationError("final frame count shorter than the residual kernel")

    def frame_lengths(self) -> list[int]:
        """Time-axis length entering each unit, followed by the final frame count."""
        lengths = [self.input_len]
        for _ in range(self.n_convres_units):
            lengths.append(ag.conv_output_length(lengths[-1], self.kernel_size_unit, self.stride_per_unit))
        return lengths

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeNetConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


FULL_CONFIG = SeNetConfig()
TINY_CONFIG = SeNetConfig(input_len=64, n_convres_units=2, n_tail_resblocks=1, embed_dim=8)


@dataclass
class EmbeddingVector:
    values: np.ndarray
    speaker_id: str | None = None
    keyword_id: str | None = None
    source_utterance: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.values.size


def _add_resblock(store: ParameterStore, rng: SplitMix64, prefix: str, ch: int, k: int) -> None:
    store.add(f"{prefix}.conv1.weight", fan_in_uniform(rng, (ch, ch, k)))
    store.add_bn(f"{prefix}.bn1", ch)
    store.add(f"{prefix}.conv2.weight", fan_in_uniform(rng, (ch, ch, k)))
    store.add_bn(f"{prefix}.bn2", ch)


def build_network(cfg: SeNetConfig, seed: int = 0) -> ParameterStore:
    """Fresh parameters for ``cfg``; the layout and values depend only on (cfg, seed)."""
    cfg.validate()
    store = ParameterStore({"network": cfg.to_dict(), "seed": int(seed)})
    rng = SplitMix64(seed)
    c_in = 1
    for i, c_out in enumerate(cfg.channel_schedule):
        store.add(f"unit{i}.conv.weight", fan_in_uniform(rng, (c_out, c_in, cfg.kernel_size_unit)))
        store.add_bn(f"unit{i}.bn", c_out)
        _add_resblock(store, rng, f"unit{i}.res", c_out, cfg.kernel_size_resblock)
        c_in = c_out
    for j in range(cfg.n_tail_resblocks):
        _add_resblock(store, rng, f"tail{j}", cfg.embed_dim, cfg.kernel_size_resblock)
    store.add("attn.weight", fan_in_uniform(rng, (1, cfg.embed_dim))[0])
    store.add("attn.bias", np.zeros(1))
    store.meta["n_parameters"] = store.num_parameters()
    return store


def config_of(store: ParameterStore) -> SeNetConfig:
    try:
        return SeNetConfig.from_dict(store.meta["network"])
    except KeyError as exc:
        raise ConfigurationError("parameter store carries no network config") from exc


def _bn(store, name, x, mode):
    return ag.batch_norm(x, store[f"{name}.gamma"], store[f"{name}.beta"], store.bn[name], mode)


def residual_block(store: ParameterStore, prefix: str, x: Tensor, mode: str) -> Tensor:
    h = ag.conv1d(x, store[f"{prefix}.conv1.weight"])
    h = ag.relu(_bn(store, f"{prefix}.bn1", h, mode))
    h = ag.conv1d(h, store[f"{prefix}.conv2.weight"])
    h = _bn(store, f"{prefix}.bn2", h, mode)
    return x + h


def attention_pool(store: ParameterStore, h: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax-over-time attention; returns (pooled (B, C), weights (B, T))."""
    b, c, t = h.shape
    w = store["attn.weight"].reshape(1, c, 1)
    scores = (h * w).sum(axis=1) + store["attn.bias"]
    weights = ag.softmax(scores, axis=1)
    weighted = h * (weights * float(t)).reshape(b, 1, t)
    return weighted.mean(axis=2), weights


def frames(store: ParameterStore, x: Tensor, mode: str = "infer", cfg: SeNetConfig | None = None) -> Tensor:
    """Frame-level features (B, D, T_final) entering the attention layer."""
    cfg = cfg or config_of(store)
    h = x
    for i in range(cfg.n_convres_units):
        h = ag.conv1d(h, store[f"unit{i}.conv.weight"], stride=cfg.stride_per_unit)
        h = ag.relu(_bn(store, f"unit{i}.bn", h, mode))
        h = residual_block(store, f"unit{i}.res", h, mode)
    for j in range(cfg.n_tail_resblocks):
        h = residual_block(store, f"tail{j}", h, mode)
    return h


def forward(store: ParameterStore, waves, mode: str = "infer", return_attention: bool = False):
    """Differentiable batch forward: (B, T) waveforms -> (B, D) unit-norm embeddings."""
    cfg = config_of(store)
    x = ag.as_tensor(waves)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2:
        raise ContractError(f"expected (B, T) waveforms, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ContractError("empty batch")
    if x.shape[1] != cfg.input_len:
        raise ContractError(f"waveform length {x.shape[1]} != network input_len {cfg.input_len}")
    if np.any(np.all(x.data == 0.0, axis=1)):
        raise DegenerateEmbeddingError("all-zero waveform has no speaker content")
    h = frames(store, x.reshape(x.shape[0], 1, x.shape[1]), mode, cfg)
    pooled, weights = attention_pool(store, h)
    emb = ag.l2_normalize(pooled, axis=1)
    return (emb, weights) if return_attention else emb


def _wave_array(w) -> np.ndarray:
    return np.asarray(getattr(w, "samples", w), dtype=np.float64)


def embed(store: ParameterStore, wav, mode: str = "infer") -> EmbeddingVector:
    """Embedding of a single waveform (array or object with ``.samples``)."""
    out = forward(store, _wave_array(wav)[None, :], mode)
    return EmbeddingVector(out.data[0], source_utterance=getattr(wav, "source_id", None))


def embed_batch(store: ParameterStore, wavs: Sequence, mode: str = "infer", chunk: int | None = None) -> list[EmbeddingVector]:
    """Order-preserving batch embedding.

    In train mode BN statistics span the whole batch, so ``chunk`` is only
    honoured in infer mode, where items do not interact.
    """
    if len(wavs) == 0:
        raise ContractError("empty batch")
    arr = np.stack([_wave_array(w) for w in wavs])
    if mode == "infer" and chunk:
        rows = np.concatenate([forward(store, arr[i : i + chunk], mode).data for i in range(0, len(arr), chunk)])
    else:
        rows = forward(store, arr, mode).data
    return [EmbeddingVector(r, source_utterance=getattr(w, "source_id", None)) for r, w in zip(rows, wavs)]


def embed_matrix(store: ParameterStore, waves: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Infer-mode embeddings of a (N, T) array as an (N, D) array."""
    waves = np.asarray(waves, dtype=np.float64)
    return np.concatenate([forward(store, waves[i : i + chunk], "infer").data for i in range(0, len(waves), chunk)])
