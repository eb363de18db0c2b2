"""Multi-view token aggregator.

A frame is patchified, linearly embedded and joined by per-frame register
tokens. The stack then alternates frame-wise self-attention (even layer
indices) with global self-attention across every frame in the batch (odd
layer indices). The global layers support two masking modes:

* bidirectional — all tokens of all frames attend to each other (mapping),
* keyframe-blocked — one designated query frame attends to everything while
  the remaining frames never see the query (the joint-batch oracle for
  tracking against a cache).

Keyframe-blocked attention is evaluated by block slicing rather than by
additive masks, so the non-query rows run through literally the same
arithmetic as a bidirectional pass over those frames alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import ProjectionWeights, project_qkv, scaled_attention

__all__ = [
    "Aggregator",
    "AggregatorConfig",
    "BIDIRECTIONAL",
    "Bidirectional",
    "KeyframeBlocked",
    "OpCounter",
    "TokenMatrix",
    "layer_norm_rows",
    "positional_signal",
    "seeded_uniform",
]

# role codes feed the seed sequence; append only, never reorder
_ROLE_CODES = {
    "w_q": 0,
    "w_k": 1,
    "w_v": 2,
    "patch_embed": 3,
    "registers": 4,
    "pose_head": 5,
    "point_head": 6,
    "conf_head": 7,
}


def seeded_uniform(seed: int, layer: int, role: str, shape, limit: float) -> np.ndarray:
    """Deterministic uniform weights in [-limit, +limit], keyed by
    (seed, layer, role)."""
    entropy = (seed, layer, _ROLE_CODES[role])
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    w = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    w.setflags(write=False)
    return w


def positional_signal(num_positions: int, width: int) -> np.ndarray:
    """Sinusoidal within-frame position table (num_positions x width)."""
    pos = np.arange(num_positions, dtype=np.float64)[:, None]
    idx = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / width)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


def layer_norm_rows(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Row-wise mean/variance normalization (no learned affine terms)."""
    xf = np.asarray(x, dtype=np.float64)
    mu = xf.mean(axis=-1, keepdims=True)
    var = xf.var(axis=-1, keepdims=True)
    return ((xf - mu) / np.sqrt(var + eps)).astype(np.float32)


@dataclass(frozen=True)
class AggregatorConfig:
    num_layers: int = 4
    d_k: int = 32
    patch_size: int = 14
    num_register_tokens: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 2 or self.num_layers % 2 != 0:
            raise ValueError(f"num_layers must be even and >= 2, got {self.num_layers}")
        if self.d_k < 4:
            raise ValueError(f"d_k must be >= 4, got {self.d_k}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.num_register_tokens < 1:
            raise ValueError(
                f"num_register_tokens must be >= 1 (the pose head reads them), "
                f"got {self.num_register_tokens}"
            )


@dataclass(frozen=True)
class TokenMatrix:
    """One frame's token block: num_patch patch tokens followed by
    num_register register tokens, each of width d_k."""

    frame_id: int
    tokens: np.ndarray
    num_patch: int
    num_register: int
    grid: tuple[int, int] | None = None  # (rows, cols) of the patch grid

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be 2-D, got shape {self.tokens.shape}")
        if self.tokens.shape[0] != self.num_patch + self.num_register:
            raise ValueError(
                f"token rows {self.tokens.shape[0]} != num_patch {self.num_patch} "
                f"+ num_register {self.num_register}"
            )
        if self.grid is not None and self.grid[0] * self.grid[1] != self.num_patch:
            raise ValueError(f"grid {self.grid} does not cover {self.num_patch} patches")
        self.tokens.setflags(write=False)

    @property
    def total(self) -> int:
        return self.num_patch + self.num_register

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: np.ndarray) -> "TokenMatrix":
        return replace(self, tokens=tokens)


@dataclass(frozen=True)
class Bidirectional:
    """All tokens of all frames attend to each other."""


@dataclass(frozen=True)
class KeyframeBlocked:
    """The query frame attends to everything; other frames only to each
    other, never to the query."""

    query_frame_id: int


BIDIRECTIONAL = Bidirectional()


@dataclass
class OpCounter:
    """Accumulates the size of global-attention score computations.

    ``score_elements`` counts entries of the q·kᵀ score matrices;
    ``score_macs`` counts the multiply-accumulates spent producing them
    (elements times the projection width).
    """

    score_elements: int = 0
    score_macs: int = 0
    per_layer_elements: dict[int, int] = field(default_factory=dict)
    per_layer_macs: dict[int, int] = field(default_factory=dict)

    def record(self, layer: int, q_rows: int, k_rows: int, width: int) -> None:
        elements = q_rows * k_rows
        macs = elements * width
        self.score_elements += elements
        self.score_macs += macs
        self.per_layer_elements[layer] = self.per_layer_elements.get(layer, 0) + elements
        self.per_layer_macs[layer] = self.per_layer_macs.get(layer, 0) + macs

    def reset(self) -> None:
        self.score_elements = 0
        self.score_macs = 0
        self.per_layer_elements.clear()
        self.per_layer_macs.clear()


class Aggregator:
    """Seeded attention stack; weights are immutable after construction and
    the forward passes are pure, so one instance is safe to share across
    any number of concurrent callers."""

    def __init__(self, config: AggregatorConfig):
        self.config = config
        d = config.d_k
        limit = 1.0 / math.sqrt(d)
        self.layers = tuple(
            ProjectionWeights(
                layer_index=l,
                w_q=seeded_uniform(config.seed, l, "w_q", (d, d), limit),
                w_k=seeded_uniform(config.seed, l, "w_k", (d, d), limit),
                w_v=seeded_uniform(config.seed, l, "w_v", (d, d), limit),
            )
            for l in range(config.num_layers)
        )
        patch_dim = 3 * config.patch_size * config.patch_size
        self.patch_embed = seeded_uniform(config.seed, 0, "patch_embed", (patch_dim, d), limit)
        self.register_tokens = seeded_uniform(
            config.seed, 0, "registers", (config.num_register_tokens, d), limit
        )
        self.op_counter: OpCounter | None = None

    # ---- layer bookkeeping -------------------------------------------------

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    @property
    def num_global_layers(self) -> int:
        return self.config.num_layers // 2

    @staticmethod
    def is_global_layer(layer: int) -> bool:
        return layer % 2 == 1

    def _check_layer(self, layer: int, expect_global: bool) -> None:
        if not 0 <= layer < self.num_layers:
            raise ValueError(f"layer {layer} out of range 0..{self.num_layers - 1}")
        if self.is_global_layer(layer) != expect_global:
            kind = "global" if expect_global else "frame-wise"
            raise ValueError(f"layer {layer} is not a {kind} layer")

    def _count_global(self, layer: int, q_rows: int, k_rows: int) -> None:
        if self.op_counter is not None:
            self.op_counter.record(layer, q_rows, k_rows, self.config.d_k)

    # ---- encoding ----------------------------------------------------------

    def encode_frame(self, image, frame_id: int = 0) -> TokenMatrix:
        """Patchify, embed and position-tag an H x W x 3 byte raster, then
        append the register tokens. Deterministic for a given seed."""
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
        h, w = img.shape[:2]
        p = self.config.patch_size
        if h % p != 0 or w % p != 0:
            raise ValueError(
                f"image {w}x{h} is not divisible by the patch size {p}; valid "
                f"resolutions are multiples of {p} per side, e.g. "
                f"{(w // p) * p or p}x{(h // p) * p or p} or {(w // p + 1) * p}x{(h // p + 1) * p}"
            )
        gh, gw = h // p, w // p
        m = gh * gw
        patches = (
            img.reshape(gh, p, gw, p, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(m, p * p * 3)
            .astype(np.float64)
            / 255.0
        )
        content = patches @ self.patch_embed.astype(np.float64)
        patch_tokens = (content + positional_signal(m, self.config.d_k)).astype(np.float32)
        tokens = np.vstack([patch_tokens, self.register_tokens])
        return TokenMatrix(
            frame_id=frame_id,
            tokens=tokens,
            num_patch=m,
            num_register=self.config.num_register_tokens,
            grid=(gh, gw),
        )

    # ---- layers ------------------------------------------------------------

    def framewise_layer(self, frame: TokenMatrix, layer: int) -> TokenMatrix:
        """Pre-norm residual self-attention over this frame's own tokens."""
        self._check_layer(layer, expect_global=False)
        h = layer_norm_rows(frame.tokens)
        q, k, v = project_qkv(h, self.layers[layer])
        out = scaled_attention(q, k, v)
        return frame.with_tokens(frame.tokens + out)

    def _global_bidirectional(self, frames, layer, capture: bool):
        sizes = [f.tokens.shape[0] for f in frames]
        x = np.vstack([f.tokens for f in frames])
        h = layer_norm_rows(x)
        q, k, v = project_qkv(h, self.layers[layer])
        self._count_global(layer, q.shape[0], k.shape[0])
        out = scaled_attention(q, k, v)
        parts = np.split(out, np.cumsum(sizes)[:-1])
        updated = [f.with_tokens(f.tokens + part) for f, part in zip(frames, parts)]
        return updated, ((k, v) if capture else None)

    def _global_blocked(self, frames, layer, query_frame_id: int):
        ids = [f.frame_id for f in frames]
        if query_frame_id not in ids:
            raise ValueError(f"query frame {query_frame_id} is not in the joint batch")
        qi = ids.index(query_frame_id)
        keyframes = [f for i, f in enumerate(frames) if i != qi]
        updated: list[TokenMatrix | None] = [None] * len(frames)

        kf_k = kf_v = None
        if keyframes:
            kf_updated, (kf_k, kf_v) = self._global_bidirectional(keyframes, layer, capture=True)
            j = 0
            for i in range(len(frames)):
                if i != qi:
                    updated[i] = kf_updated[j]
                    j += 1

        query = frames[qi]
        hq = layer_norm_rows(query.tokens)
        qq, kq, vq = project_qkv(hq, self.layers[layer])
        keys = np.vstack([kf_k, kq]) if kf_k is not None else kq
        values = np.vstack([kf_v, vq]) if kf_v is not None else vq
        self._count_global(layer, qq.shape[0], keys.shape[0])
        out = scaled_attention(qq, keys, values)
        updated[qi] = query.with_tokens(query.tokens + out)
        return updated

    def global_layer_joint(self, frames, layer, mode=BIDIRECTIONAL):
        """Global self-attention across all frames in the batch, under the
        requested masking mode. Frame order in equals frame order out."""
        self._check_layer(layer, expect_global=True)
        frames = list(frames)
        if not frames:
            raise ValueError("at least one frame required")
        shapes = {f.tokens.shape for f in frames}
        if len(shapes) != 1:
            raise ValueError(f"frames disagree on token shape: {sorted(shapes)}")
        if isinstance(mode, Bidirectional):
            updated, _ = self._global_bidirectional(frames, layer, capture=False)
            return updated
        if isinstance(mode, KeyframeBlocked):
            return self._global_blocked(frames, layer, mode.query_frame_id)
        raise TypeError(f"unknown mask mode: {mode!r}")

    # ---- full stack ----------------------------------------------------------

    def aggregate_forward(self, frames, mode=BIDIRECTIONAL, capture_kv: bool = False):
        """Run all L layers in alternation over the batch.

        With ``capture_kv`` (bidirectional only) also returns, per global
        layer, the projected (K, V) of every input token — the blocks a
        cache stores.
        """
        frames = list(frames)
        if not frames:
            raise ValueError("at least one frame required")
        if capture_kv and not isinstance(mode, Bidirectional):
            raise ValueError("capture_kv requires bidirectional mode")
        captures = [] if capture_kv else None
        for layer in range(self.num_layers):
            if not self.is_global_layer(layer):
                frames = [self.framewise_layer(f, layer) for f in frames]
            elif isinstance(mode, Bidirectional):
                frames, kv = self._global_bidirectional(frames, layer, capture=capture_kv)
                if capture_kv:
                    captures.append(kv)
            else:
                frames = self.global_layer_joint(frames, layer, mode)
        return frames, captures
