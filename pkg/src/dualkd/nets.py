"""The three networks and the noisy bottleneck.

A frozen teacher and a trainable encoder student share one architecture:
patch embedding, class token, learned positional embeddings, pre-norm
transformer blocks, and a final normalization applied to the last class
token.  The decoder student consumes embedding-space token maps instead of
images (no patch embedding, no class token) and mirrors the block stack at
smaller depth.  The bottleneck between teacher and decoder is a token-wise
one-hidden-layer linear projection with inverted dropout on its input; kept
linear so its training-mode expectation equals its eval output exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    dropout,
    gelu,
    layer_norm,
    softmax,
)
from .rng import STREAM_NET_INIT, stream_rng
from .tensorio import load_tensors, save_tensors

# 1-indexed mid-level teacher layers consumed by the reconstruction path
MID_LAYER_RANGE = (3, 10)
GROUP_SIZE = 4


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 12
    num_heads: int = 4
    mlp_ratio: float = 4.0
    has_class_token: bool = True
    in_channels: int = 1
    residual_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.residual_scale <= 0:
            raise ValueError("residual_scale must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


@dataclass
class BottleneckConfig:
    drop_rate: float = 0.2
    hidden_ratio: float = 1.0
    seed: int = 3

    def __post_init__(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")
        if self.hidden_ratio <= 0:
            raise ValueError("hidden_ratio must be positive")


@dataclass
class FeaturePyramid:
    """Per-block features from one forward pass.

    patch_features: one (C', H', W') map per block.
    class_tokens: raw class-token row per block (image networks only).
    final_class_token: last class token after the final normalization.
    """

    patch_features: list = field(default_factory=list)
    class_tokens: list = field(default_factory=list)
    final_class_token: Tensor | None = None

    @property
    def depth(self) -> int:
        return len(self.patch_features)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, ...] | None = None) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape if shape is not None else (fan_in, fan_out))


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _init_block(params: dict, prefix: str, rng: np.random.Generator,
                d: int, mlp_hidden: int, residual_scale: float = 1.0) -> None:
    params[f"{prefix}.ln1.g"] = _param(np.ones(d))
    params[f"{prefix}.ln1.b"] = _param(np.zeros(d))
    for name in ("wq", "wk", "wv"):
        params[f"{prefix}.attn.{name}"] = _param(_glorot(rng, d, d))
    # the two projections that write into the residual stream take the
    # scale: it bounds how far two same-shape networks drift apart, which
    # keeps squared class-token distances inside the sigmoid's live range
    params[f"{prefix}.attn.wo"] = _param(residual_scale * _glorot(rng, d, d))
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.attn.{name}"] = _param(np.zeros(d))
    params[f"{prefix}.ln2.g"] = _param(np.ones(d))
    params[f"{prefix}.ln2.b"] = _param(np.zeros(d))
    params[f"{prefix}.mlp.w1"] = _param(_glorot(rng, d, mlp_hidden))
    params[f"{prefix}.mlp.b1"] = _param(np.zeros(mlp_hidden))
    params[f"{prefix}.mlp.w2"] = _param(
        residual_scale * _glorot(rng, mlp_hidden, d))
    params[f"{prefix}.mlp.b2"] = _param(np.zeros(d))


def _run_block(params: dict, prefix: str, x: Tensor, num_heads: int) -> Tensor:
    # x is (N, d) for one sample or (B, N, d) for a batch; attention never
    # mixes tokens across the leading batch axis
    d = x.shape[-1]
    dh = d // num_heads
    n = x.shape[-2]

    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    q = h @ params[f"{prefix}.attn.wq"] + params[f"{prefix}.attn.bq"]
    k = h @ params[f"{prefix}.attn.wk"] + params[f"{prefix}.attn.bk"]
    v = h @ params[f"{prefix}.attn.wv"] + params[f"{prefix}.attn.bv"]
    if x.ndim == 3:
        b = x.shape[0]
        q = q.reshape(b, n, num_heads, dh).transpose(0, 2, 1, 3)
        k = k.reshape(b, n, num_heads, dh).transpose(0, 2, 1, 3)
        v = v.reshape(b, n, num_heads, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        ctx = softmax(scores) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, n, d)
    else:
        q = q.reshape(n, num_heads, dh).transpose(1, 0, 2)
        k = k.reshape(n, num_heads, dh).transpose(1, 0, 2)
        v = v.reshape(n, num_heads, dh).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        ctx = softmax(scores) @ v
        ctx = ctx.transpose(1, 0, 2).reshape(n, d)
    x = x + (ctx @ params[f"{prefix}.attn.wo"] + params[f"{prefix}.attn.bo"])

    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = gelu(h @ params[f"{prefix}.mlp.w1"] + params[f"{prefix}.mlp.b1"])
    x = x + (h @ params[f"{prefix}.mlp.w2"] + params[f"{prefix}.mlp.b2"])
    return x


def image_to_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) -> (num_patches, C*patch*patch), row-major over the grid."""
    c, hh, ww = image.shape
    gh, gw = hh // patch, ww // patch
    x = image.reshape(c, gh, patch, gw, patch)
    return x.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)


def tokens_to_map(tokens: Tensor, grid: int) -> Tensor:
    """(N, C') tokens -> (C', H', W') channel-major map."""
    d = tokens.shape[-1]
    return tokens.transpose(1, 0).reshape(d, grid, grid)


def map_to_tokens(fmap: Tensor) -> Tensor:
    """(C', H', W') map -> (N, C') tokens in grid row-major order."""
    d = fmap.shape[0]
    n = fmap.shape[1] * fmap.shape[2]
    return fmap.reshape(d, n).transpose(1, 0)


class VisionTransformer:
    """Image -> FeaturePyramid.  Used for both the teacher and the encoder student."""

    def __init__(self, cfg: ViTConfig, params: dict[str, Tensor]):
        if not cfg.has_class_token:
            raise ValueError("image networks require a class token; "
                             "use FeatureDecoder for token-map inputs")
        self.cfg = cfg
        self.params = params

    @classmethod
    def build(cls, cfg: ViTConfig, rng: np.random.Generator) -> "VisionTransformer":
        d = cfg.embed_dim
        mlp_hidden = int(round(d * cfg.mlp_ratio))
        patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size
        params: dict[str, Tensor] = {}
        params["patch.w"] = _param(_glorot(rng, patch_dim, d))
        params["patch.b"] = _param(np.zeros(d))
        params["cls"] = _param(rng.normal(0.0, 0.02, size=d))
        params["pos"] = _param(rng.normal(0.0, 0.02, size=(cfg.num_patches + 1, d)))
        for b in range(cfg.depth):
            _init_block(params, f"block{b:02d}", rng, d, mlp_hidden, cfg.residual_scale)
        params["final.g"] = _param(np.ones(d))
        params["final.b"] = _param(np.zeros(d))
        return cls(cfg, params)

    @classmethod
    def create(cls, cfg: ViTConfig, master_seed: int) -> "VisionTransformer":
        return cls.build(cfg, stream_rng(master_seed, STREAM_NET_INIT + cfg.seed))

    def forward(self, image) -> FeaturePyramid:
        cfg = self.cfg
        img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if img.shape != want:
            raise ValueError(f"image shape {img.shape} does not match config {want}")
        p = self.params
        x = Tensor(image_to_patches(img, cfg.patch_size)) @ p["patch.w"] + p["patch.b"]
        x = concat([p["cls"].reshape(1, cfg.embed_dim), x], axis=0)
        x = x + p["pos"]
        maps, cls_tokens = [], []
        for b in range(cfg.depth):
            x = _run_block(p, f"block{b:02d}", x, cfg.num_heads)
            cls_tokens.append(x[0])
            maps.append(tokens_to_map(x[1:], cfg.grid))
        final_cls = layer_norm(x[0], p["final.g"], p["final.b"])
        return FeaturePyramid(maps, cls_tokens, final_cls)

    def forward_batch(self, images, with_patch_maps: bool = True) -> list[FeaturePyramid]:
        """One graph pass over a whole batch; per-sample pyramids are slices
        of the shared block outputs.  Matches forward() exactly.

        with_patch_maps=False skips building the per-block patch maps (the
        encoder branch's losses only read class tokens).
        """
        cfg = self.cfg
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        arrs = []
        for im in images:
            a = im.data if isinstance(im, Tensor) else np.asarray(im, dtype=np.float64)
            if a.shape != want:
                raise ValueError(f"image shape {a.shape} does not match config {want}")
            arrs.append(image_to_patches(a, cfg.patch_size))
        if not arrs:
            raise ValueError("empty batch")
        batch = len(arrs)
        p = self.params
        x = Tensor(np.stack(arrs)) @ p["patch.w"] + p["patch.b"]
        cls_tile = p["cls"].reshape(1, 1, cfg.embed_dim) + \
            Tensor(np.zeros((batch, 1, cfg.embed_dim)))
        x = concat([cls_tile, x], axis=1)
        x = x + p["pos"]
        block_outs = []
        for b in range(cfg.depth):
            x = _run_block(p, f"block{b:02d}", x, cfg.num_heads)
            block_outs.append(x)
        final_all = layer_norm(x[:, 0, :], p["final.g"], p["final.b"])
        pyramids = []
        for i in range(batch):
            cls_tokens = [bo[i, 0] for bo in block_outs]
            maps = [tokens_to_map(bo[i, 1:], cfg.grid)
                    for bo in block_outs] if with_patch_maps else []
            pyramids.append(FeaturePyramid(maps, cls_tokens, final_all[i]))
        return pyramids

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def load_weights(self, path) -> None:
        assign_weights(self.params, load_tensors(path))

    def save_weights(self, path) -> None:
        save_tensors(path, {k: v.data for k, v in self.params.items()})


class FeatureDecoder:
    """Embedding-space token map -> FeaturePyramid (patch maps only)."""

    def __init__(self, cfg: ViTConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def build(cls, cfg: ViTConfig, rng: np.random.Generator) -> "FeatureDecoder":
        d = cfg.embed_dim
        mlp_hidden = int(round(d * cfg.mlp_ratio))
        params: dict[str, Tensor] = {}
        params["pos"] = _param(rng.normal(0.0, 0.02, size=(cfg.num_patches, d)))
        for b in range(cfg.depth):
            _init_block(params, f"block{b:02d}", rng, d, mlp_hidden, cfg.residual_scale)
        return cls(cfg, params)

    @classmethod
    def create(cls, cfg: ViTConfig, master_seed: int) -> "FeatureDecoder":
        return cls.build(cfg, stream_rng(master_seed, STREAM_NET_INIT + cfg.seed))

    def forward(self, fmap: Tensor) -> FeaturePyramid:
        cfg = self.cfg
        want = (cfg.embed_dim, cfg.grid, cfg.grid)
        if tuple(fmap.shape) != want:
            raise ValueError(f"token map shape {tuple(fmap.shape)} does not match {want}")
        x = map_to_tokens(fmap) + self.params["pos"]
        maps = []
        for b in range(cfg.depth):
            x = _run_block(self.params, f"block{b:02d}", x, cfg.num_heads)
            maps.append(tokens_to_map(x, cfg.grid))
        return FeaturePyramid(maps, [], None)

    def forward_batch(self, tokens: Tensor) -> list[FeaturePyramid]:
        """tokens: (B, num_patches, C') as produced by the batched
        bottleneck.  Matches forward() exactly per sample."""
        cfg = self.cfg
        want = (cfg.num_patches, cfg.embed_dim)
        if tokens.ndim != 3 or tuple(tokens.shape[1:]) != want:
            raise ValueError(
                f"token batch shape {tuple(tokens.shape)} does not end in {want}")
        x = tokens + self.params["pos"]
        block_outs = []
        for b in range(cfg.depth):
            x = _run_block(self.params, f"block{b:02d}", x, cfg.num_heads)
            block_outs.append(x)
        return [FeaturePyramid([tokens_to_map(bo[i], cfg.grid)
                                for bo in block_outs], [], None)
                for i in range(tokens.shape[0])]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None


class NoisyBottleneck:
    """Token-wise linear projection with inverted dropout on its input.

    Linear on purpose: E[forward(x, training=True)] == forward(x, training=False),
    so the dropout acts as pure feature noise without biasing the decoder target.
    """

    def __init__(self, cfg: BottleneckConfig, embed_dim: int, params: dict[str, Tensor]):
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.params = params

    @classmethod
    def build(cls, cfg: BottleneckConfig, embed_dim: int,
              rng: np.random.Generator) -> "NoisyBottleneck":
        hidden = max(1, int(round(embed_dim * cfg.hidden_ratio)))
        params = {
            "w1": _param(_glorot(rng, embed_dim, hidden)),
            "b1": _param(np.zeros(hidden)),
            "w2": _param(_glorot(rng, hidden, embed_dim)),
            "b2": _param(np.zeros(embed_dim)),
        }
        return cls(cfg, embed_dim, params)

    @classmethod
    def create(cls, cfg: BottleneckConfig, embed_dim: int,
               master_seed: int) -> "NoisyBottleneck":
        return cls.build(cfg, embed_dim, stream_rng(master_seed, STREAM_NET_INIT + cfg.seed))

    @classmethod
    def identity(cls, cfg: BottleneckConfig, embed_dim: int) -> "NoisyBottleneck":
        # exact pass-through at eval; requires hidden_ratio 1
        hidden = max(1, int(round(embed_dim * cfg.hidden_ratio)))
        if hidden != embed_dim:
            raise ValueError("identity bottleneck needs hidden_ratio 1")
        params = {
            "w1": _param(np.eye(embed_dim)),
            "b1": _param(np.zeros(embed_dim)),
            "w2": _param(np.eye(embed_dim)),
            "b2": _param(np.zeros(embed_dim)),
        }
        return cls(cfg, embed_dim, params)

    def forward(self, fused: Tensor, training: bool, rng=None) -> Tensor:
        want = (self.embed_dim,)
        if tuple(fused.shape[:1]) != want:
            raise ValueError(f"fused map must have {self.embed_dim} channels")
        grid = fused.shape[1]
        tokens = map_to_tokens(fused)
        tokens = dropout(tokens, self.cfg.drop_rate, training=training, rng=rng)
        h = tokens @ self.params["w1"] + self.params["b1"]
        out = h @ self.params["w2"] + self.params["b2"]
        return tokens_to_map(out, grid)

    def forward_batch(self, fused_maps, training: bool, rng=None) -> Tensor:
        """Fused (C', H', W') maps -> (B, N, C') tokens, ready for the
        batched decoder.  One dropout draw covers the whole batch."""
        if not fused_maps:
            raise ValueError("empty batch")
        toks = []
        for f in fused_maps:
            if f.shape[0] != self.embed_dim:
                raise ValueError(f"fused map must have {self.embed_dim} channels")
            n = f.shape[1] * f.shape[2]
            toks.append(map_to_tokens(f).reshape(1, n, self.embed_dim))
        x = concat(toks, axis=0)
        x = dropout(x, self.cfg.drop_rate, training=training, rng=rng)
        h = x @ self.params["w1"] + self.params["b1"]
        return h @ self.params["w2"] + self.params["b2"]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None


def fuse_mid_layers(p: FeaturePyramid) -> Tensor:
    """Mean of teacher patch maps over 1-indexed layers 3..10 (the Eq-range union)."""
    lo, hi = MID_LAYER_RANGE
    if p.depth < hi:
        raise ValueError(f"need at least {hi} layers to fuse, pyramid has {p.depth}")
    maps = p.patch_features[lo - 1:hi]
    acc = maps[0]
    for m in maps[1:]:
        acc = acc + m
    return acc * (1.0 / len(maps))


def group_features(p: FeaturePyramid, role: str, i: int) -> Tensor:
    """Average 4 consecutive patch maps into reconstruction group i (1 or 2).

    Teacher groups sit mid-network (layers 4i-1 .. 4i+2); decoder groups tile
    the whole stack (layers 4i-3 .. 4i).  1-indexed inclusive ranges.
    """
    if i not in (1, 2):
        raise ValueError("group index must be 1 or 2")
    if role == "teacher":
        lo = 4 * i - 1
    elif role == "decoder":
        lo = 4 * i - 3
    else:
        raise ValueError(f"unknown role {role!r}")
    hi = lo + GROUP_SIZE - 1
    if p.depth < hi:
        raise ValueError(f"group {i} for {role} needs layer {hi}, pyramid has {p.depth}")
    maps = p.patch_features[lo - 1:hi]
    acc = maps[0]
    for m in maps[1:]:
        acc = acc + m
    return acc * (1.0 / GROUP_SIZE)


def assign_weights(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Load arrays into an existing parameter dict, validating names and shapes."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"weight mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, tensor in params.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != tensor.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}")
        tensor.data = arr.copy()


def parameter_checksum(params: dict[str, Tensor]) -> str:
    """Order-independent digest of all parameter values."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()
