"""Cached key/value blocks from the global attention layers.

The cache is the only scene state: one (K, V) pair per global layer,
covering every token (patch and register) of every keyframe, rows ordered
by keyframe insertion order and token index. Caches are immutable after
publication; a new keyframe always triggers a full rebuild, and a rejected
keyframe rolls the publication back to the retained single-level snapshot
under a fresh generation id. Readers holding an older generation may keep
using it — published blocks are never written again.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass, replace

import numpy as np

from .aggregator import Aggregator, BIDIRECTIONAL, TokenMatrix, layer_norm_rows
from .attention import project_qkv, scaled_attention

__all__ = [
    "CachePublisher",
    "KvCache",
    "attend_with_cache",
    "build_cache",
    "load_cache",
    "save_cache",
]

_MAGIC = b"KVCC"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIQ")  # magic, version, L, B, M, R, d_k, generation


@dataclass(frozen=True)
class KvCache:
    generation: int
    keyframe_ids: tuple[int, ...]
    num_patch: int
    num_register: int
    d_k: int
    num_layers: int  # total aggregator layers; len(keys) == num_layers // 2
    keys: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.keyframe_ids:
            raise ValueError("a cache needs at least one keyframe")
        if len(self.keys) != self.num_layers // 2 or len(self.values) != len(self.keys):
            raise ValueError(
                f"expected {self.num_layers // 2} key/value blocks, got "
                f"{len(self.keys)}/{len(self.values)}"
            )
        rows = self.num_keyframes * self.tokens_per_frame
        for name, blocks in (("keys", self.keys), ("values", self.values)):
            for i, block in enumerate(blocks):
                if block.shape != (rows, self.d_k):
                    raise ValueError(
                        f"{name}[{i}] has shape {block.shape}, expected ({rows}, {self.d_k})"
                    )
                if block.dtype != np.float32:
                    raise ValueError(f"{name}[{i}] must be float32, got {block.dtype}")
                block.setflags(write=False)

    @property
    def num_keyframes(self) -> int:
        return len(self.keyframe_ids)

    @property
    def tokens_per_frame(self) -> int:
        return self.num_patch + self.num_register

    def memory_footprint(self) -> int:
        """Exact byte count of all cached blocks:
        2 * (L/2) * B * (M+R) * d_k * 4."""
        return sum(b.nbytes for b in self.keys) + sum(b.nbytes for b in self.values)

    def content_hash(self) -> str:
        """sha256 over structure and block bytes. The generation id is
        deliberately excluded so a rollback restores the original hash."""
        h = hashlib.sha256()
        h.update(
            f"{self.num_patch},{self.num_register},{self.d_k},{self.num_layers},"
            f"{self.keyframe_ids}".encode()
        )
        for block in self.keys + self.values:
            h.update(block.tobytes())
        return h.hexdigest()


def build_cache(keyframes, aggregator: Aggregator, publisher: "CachePublisher | None" = None):
    """Run the full bidirectional pass over the keyframes, capturing each
    global layer's K/V blocks.

    Returns the cache (published through ``publisher`` when given, else a
    standalone generation-1 snapshot) and the keyframes' final tokens for
    head decoding.
    """
    keyframes = list(keyframes)
    if not keyframes:
        raise ValueError("at least one keyframe required to build a cache")
    finals, captures = aggregator.aggregate_forward(
        keyframes, BIDIRECTIONAL, capture_kv=True
    )
    first = keyframes[0]
    cache = KvCache(
        generation=1,
        keyframe_ids=tuple(f.frame_id for f in keyframes),
        num_patch=first.num_patch,
        num_register=first.num_register,
        d_k=first.width,
        num_layers=aggregator.num_layers,
        keys=tuple(k for k, _ in captures),
        values=tuple(v for _, v in captures),
    )
    if publisher is not None:
        cache = publisher.publish(cache)
    return cache, finals


def attend_with_cache(query: TokenMatrix, cache: KvCache, aggregator: Aggregator) -> TokenMatrix:
    """Run the full stack on a single query frame; each global layer attends
    to [cached K ; own K] with values [cached V ; own V]. Never touches the
    cache contents."""
    if cache is None:
        raise ValueError("no published cache")
    if query.width != cache.d_k:
        raise ValueError(f"query width {query.width} != cache width {cache.d_k}")
    if aggregator.num_layers != cache.num_layers:
        raise ValueError(
            f"aggregator has {aggregator.num_layers} layers but the cache was "
            f"built with {cache.num_layers}"
        )
    frame = query
    for layer in range(aggregator.num_layers):
        if not aggregator.is_global_layer(layer):
            frame = aggregator.framewise_layer(frame, layer)
            continue
        gi = layer // 2
        h = layer_norm_rows(frame.tokens)
        q, k, v = project_qkv(h, aggregator.layers[layer])
        keys = np.vstack([cache.keys[gi], k])
        values = np.vstack([cache.values[gi], v])
        aggregator._count_global(layer, q.shape[0], keys.shape[0])
        out = scaled_attention(q, keys, values)
        frame = frame.with_tokens(frame.tokens + out)
    return frame


class CachePublisher:
    """Atomic publication point for caches.

    Publication replaces the current cache in one reference swap and retains
    exactly one prior snapshot; ``rollback`` republishes that snapshot under
    a fresh, strictly larger generation id. Two rollbacks in a row without an
    intervening publish are an error.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._generation = 0
        self._current: KvCache | None = None
        self._previous: KvCache | None = None

    @property
    def current(self) -> KvCache | None:
        return self._current

    @property
    def generation(self) -> int:
        return self._generation

    def publish(self, cache: KvCache) -> KvCache:
        with self._lock:
            self._generation += 1
            published = replace(cache, generation=self._generation)
            self._previous = self._current
            self._current = published
            return published

    def snapshot(self) -> KvCache:
        if self._current is None:
            raise ValueError("no published cache to snapshot")
        return self._current

    def rollback(self) -> KvCache:
        with self._lock:
            if self._previous is None:
                raise ValueError("no prior cache snapshot to roll back to")
            self._generation += 1
            restored = replace(self._previous, generation=self._generation)
            self._current = restored
            self._previous = None
            return restored


def save_cache(cache: KvCache, path) -> None:
    """Serialize to the binary layout: fixed header, then per global layer
    the raw little-endian float32 K block followed by the V block."""
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        cache.num_layers,
        cache.num_keyframes,
        cache.num_patch,
        cache.num_register,
        cache.d_k,
        cache.generation,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for k, v in zip(cache.keys, cache.values):
            fh.write(np.ascontiguousarray(k, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_cache(path) -> KvCache:
    """Bit-exact inverse of :func:`save_cache`. Keyframe ids are not part of
    the file format and come back as 0..B-1."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"cache file {path} is truncated")
    magic, version, layers, b, m, r, d_k, generation = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path} is not a cache file (bad magic {magic!r})")
    if version != _VERSION:
        raise ValueError(f"unsupported cache version {version}")
    rows = b * (m + r)
    block_bytes = rows * d_k * 4
    expected = _HEADER.size + (layers // 2) * 2 * block_bytes
    if len(raw) != expected:
        raise ValueError(
            f"cache file {path} has {len(raw)} bytes, expected {expected}"
        )
    keys, values = [], []
    offset = _HEADER.size
    for _ in range(layers // 2):
        for target in (keys, values):
            block = np.frombuffer(raw, dtype="<f4", count=rows * d_k, offset=offset)
            block = block.reshape(rows, d_k).astype(np.float32)
            target.append(block)
            offset += block_bytes
    return KvCache(
        generation=generation,
        keyframe_ids=tuple(range(b)),
        num_patch=m,
        num_register=r,
        d_k=d_k,
        num_layers=layers,
        keys=tuple(keys),
        values=tuple(values),
    )
