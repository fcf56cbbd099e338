"""Named parameter storage, reproducible initialisation and the checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic     4s   b"TSVK"
    version   u32
    meta_len  u32, meta JSON (UTF-8), meta_crc u32
    count     u32
    count x entry:
        kind   u8   0 = parameter, 1 = BN running mean, 2 = BN running var
        nlen   u16, name (UTF-8)
        ndim   u8,  ndim x u32 dims
        data   float64[prod(dims)], row-major
        crc    u32  CRC-32 of every byte of this entry before the crc field
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

from .autograd import BatchNormState, Tensor
from .errors import CheckpointError, ConfigurationError

MAGIC = b"TSVK"
FORMAT_VERSION = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """Counter-based SplitMix64 stream; the n-th draw depends only on (seed, n)."""

    def __init__(self, seed: int):
        self.state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        i = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = self.state + i * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u


def fan_in_uniform(rng: SplitMix64, shape: tuple[int, ...]) -> np.ndarray:
    """He-style uniform init, bound sqrt(6 / fan_in); fan_in is everything but dim 0."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(int(np.prod(shape)), -bound, bound).reshape(shape)


class ParameterStore:
    """Ordered mapping of parameter name -> leaf :class:`Tensor`, plus batch-norm state."""

    def __init__(self, meta: dict | None = None):
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.meta: dict = dict(meta or {})

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_bn(self, name: str, channels: int) -> BatchNormState:
        self.add(f"{name}.gamma", np.ones(channels))
        self.add(f"{name}.beta", np.zeros(channels))
        state = BatchNormState(channels)
        self.bn[name] = state
        return state

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def freeze_bn(self, frozen: bool = True) -> None:
        for s in self.bn.values():
            s.frozen = frozen

    def subset(self, prefix: str) -> "ParameterStore":
        """A view sharing tensors whose names start with ``prefix``."""
        out = ParameterStore(self.meta)
        out.params = {k: v for k, v in self.params.items() if k.startswith(prefix)}
        out.bn = {k: v for k, v in self.bn.items() if k.startswith(prefix)}
        return out

    def copy(self) -> "ParameterStore":
        out = ParameterStore(json.loads(json.dumps(self.meta)))
        for k, t in self.params.items():
            out.add(k, t.data.copy())
        for k, s in self.bn.items():
            ns = BatchNormState(s.mean.size, s.momentum, s.eps)
            ns.mean, ns.var, ns.initialized = s.mean.copy(), s.var.copy(), s.initialized
            out.bn[k] = ns
        return out

    def state_arrays(self) -> list[tuple[int, str, np.ndarray]]:
        out = [(0, k, t.data) for k, t in self.params.items()]
        for k, s in self.bn.items():
            if s.initialized:
                out.append((1, k, s.mean))
                out.append((2, k, s.var))
        return out

    def digest(self) -> str:
        """SHA-256 over names and raw bytes of every array; equal digests mean bit-identical state."""
        h = hashlib.sha256()
        for kind, name, arr in self.state_arrays():
            h.update(bytes([kind]) + name.encode() + np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- checkpoint I/O --------------------------------------------------
    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True).encode("utf-8")
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(meta)), meta,
                 struct.pack("<I", zlib.crc32(meta))]
        arrays = self.state_arrays()
        parts.append(struct.pack("<I", len(arrays)))
        for kind, name, arr in arrays:
            nb = name.encode("utf-8")
            entry = struct.pack("<BH", kind, len(nb)) + nb + struct.pack("<B", arr.ndim)
            entry += struct.pack(f"<{arr.ndim}I", *arr.shape)
            entry += np.ascontiguousarray(arr, dtype="<f8").tobytes()
            parts.append(entry + struct.pack("<I", zlib.crc32(entry)))
        return b"".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParameterStore":
        if buf[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = 4

        def read(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, buf, pos)
            pos += struct.calcsize(fmt)
            return vals

        try:
            (version,) = read("<I")
            if version != FORMAT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            (mlen,) = read("<I")
            meta_raw = buf[pos : pos + mlen]
            pos += mlen
            (mcrc,) = read("<I")
            if zlib.crc32(meta_raw) != mcrc:
                raise CheckpointError("checkpoint metadata CRC mismatch")
            store = cls(json.loads(meta_raw.decode("utf-8")))
            (count,) = read("<I")
            running: dict[str, dict[int, np.ndarray]] = {}
            for _ in range(count):
                start = pos
                kind, nlen = read("<BH")
                name = buf[pos : pos + nlen].decode("utf-8")
                pos += nlen
                (ndim,) = read("<B")
                shape = read(f"<{ndim}I") if ndim else ()
                n = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
                pos += 8 * n
                (crc,) = read("<I")
                if zlib.crc32(buf[start : pos - 4]) != crc:
                    raise CheckpointError(f"CRC mismatch in array {name!r}")
                if kind == 0:
                    store.add(name, arr)
                elif kind in (1, 2):
                    running.setdefault(name, {})[kind] = arr
                else:
                    raise CheckpointError(f"unknown array kind {kind} for {name!r}")
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
        for name in _bn_names(store):
            s = BatchNormState(store[f"{name}.gamma"].size)
            if name in running:
                s.mean, s.var = running[name][1], running[name][2]
                s.initialized = True
            store.bn[name] = s
        return store

    @classmethod
    def load(cls, path: str | Path) -> "ParameterStore":
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(buf)


def _bn_names(store: ParameterStore) -> list[str]:
    return [k[: -len(".gamma")] for k in store.params if k.endswith(".gamma") and k[:-6] + ".beta" in store.params]
