"""Noise predictor with cross-attention, plus the toy image encoder.

The toy network keeps only the mechanism that matters for grounding: visual
tokens at a U-Net-like sequence of resolutions, each level applying a
position-wise residual linear mix followed by residual cross-attention over
the prompt embedding. Sinusoidal timestep features are added to the input
tokens so that the predicted noise depends on ``t``. There are no
convolutions, no self-attention and no skip connections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, DimensionError, ModelCorruptionError
from .numerics import as_tensor, avg_pool, matmul, softmax_rows
from .text import PromptEmbedding

DEFAULT_SIZES = (32, 32, 16, 16, 16, 16, 16, 16, 32, 32, 32)
IMAGE_SIZE = 512


@dataclass(frozen=True)
class LayerSpec:
    """One cross-attention level: spatial size, head count and its weights."""

    size: int
    heads: int
    mix: np.ndarray  # d_model x d_model
    query: np.ndarray  # d_model x d_attn
    key: np.ndarray  # d_ctx x d_attn
    value: np.ndarray  # d_ctx x d_attn
    out: np.ndarray  # d_attn x d_model

    WEIGHTS = ("mix", "query", "key", "value", "out")


@dataclass(frozen=True)
class ToyDenoiserModel:
    latent_channels: int
    latent_size: int
    enc_mean: tuple[float, ...]
    enc_std: tuple[float, ...]
    w_in: np.ndarray  # C x d_model
    b_in: np.ndarray  # d_model
    pos: np.ndarray  # latent_size^2 x d_model
    w_time: np.ndarray  # d_model x d_model
    w_out: np.ndarray  # d_model x C
    layers: tuple[LayerSpec, ...]
    null_context: np.ndarray | None = field(default=None, compare=False)

    GLOBAL_WEIGHTS = ("w_in", "b_in", "pos", "w_time", "w_out")

    def __post_init__(self):
        self.validate()

    @property
    def d_model(self) -> int:
        return self.w_in.shape[1]

    @property
    def d_attn(self) -> int:
        return self.layers[0].query.shape[1]

    @property
    def d_ctx(self) -> int:
        return self.layers[0].key.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(layer.size for layer in self.layers)

    def validate(self) -> None:
        c, b0 = self.latent_channels, self.latent_size
        if not self.layers:
            raise ModelCorruptionError("model has no cross-attention layers")
        dm, da, dc = self.w_in.shape[1], self.layers[0].query.shape[1], self.layers[0].key.shape[0]
        expect = {
            "w_in": (c, dm),
            "b_in": (dm,),
            "pos": (b0 * b0, dm),
            "w_time": (dm, dm),
            "w_out": (dm, c),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ModelCorruptionError(f"{name} has shape {getattr(self, name).shape}, want {shape}")
        if len(self.enc_mean) != c or len(self.enc_std) != c or min(self.enc_std) <= 0:
            raise ModelCorruptionError("encoder mean/std must have one positive entry per channel")
        if IMAGE_SIZE % b0:
            raise ModelCorruptionError(f"latent size {b0} does not divide {IMAGE_SIZE}")
        for i, layer in enumerate(self.layers, start=1):
            want = {
                "mix": (dm, dm),
                "query": (dm, da),
                "key": (dc, da),
                "value": (dc, da),
                "out": (da, dm),
            }
            for name, shape in want.items():
                if getattr(layer, name).shape != shape:
                    raise ModelCorruptionError(f"layer {i} {name} has shape {getattr(layer, name).shape}, want {shape}")
            if layer.heads < 1 or da % layer.heads:
                raise ModelCorruptionError(f"layer {i}: {layer.heads} heads do not divide d_attn={da}")
            if layer.size < 1 or (b0 % layer.size and layer.size % b0):
                raise ModelCorruptionError(f"layer {i}: size {layer.size} incompatible with latent {b0}")
        for name, arr in self.weight_items():
            if not np.isfinite(arr).all():
                raise ModelCorruptionError(f"{name} contains non-finite values")

    def weight_items(self) -> list[tuple[str, np.ndarray]]:
        """Weights in their canonical serialisation order."""
        items = [(name, getattr(self, name)) for name in self.GLOBAL_WEIGHTS]
        for i, layer in enumerate(self.layers, start=1):
            items.extend((f"layer{i}.{w}", getattr(layer, w)) for w in LayerSpec.WEIGHTS)
        return items

    def bind(self, null_context: np.ndarray) -> "ToyDenoiserModel":
        """Attach the embedded empty prompt used when ``context`` is ``None``."""
        null_context = as_tensor(null_context)
        if null_context.ndim != 2 or null_context.shape[1] != self.d_ctx:
            raise ModelCorruptionError(
                f"null context {null_context.shape} does not match d_ctx={self.d_ctx}"
            )
        return replace(self, null_context=null_context)


@dataclass(frozen=True)
class LatentImage:
    grid: np.ndarray  # C x B0 x B0
    provenance: str = ""


@dataclass(frozen=True)
class DenoiserOutput:
    epsilon: np.ndarray
    attn: list[np.ndarray]  # layer l -> S x B_l x B_l


def encode_image(image: np.ndarray, model: ToyDenoiserModel, provenance: str = "") -> LatentImage:
    """Average-pool a 512x512 image to the latent grid, then standardise per channel."""
    image = as_tensor(image)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ArgumentError(f"encoder expects a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {image.shape}")
    pooled = avg_pool(image, IMAGE_SIZE // model.latent_size).astype(np.float64)
    mean = np.asarray(model.enc_mean, dtype=np.float64)[:, None, None]
    std = np.asarray(model.enc_std, dtype=np.float64)[:, None, None]
    return LatentImage(as_tensor((pooled[None] - mean) / std), provenance)


def timestep_features(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    angles = t * freqs
    feats = np.concatenate([np.sin(angles), np.cos(angles)])
    if dim % 2:
        feats = np.concatenate([feats, [0.0]])
    return as_tensor(feats)


def _change_resolution(h: np.ndarray, src: int, dst: int) -> np.ndarray:
    if src == dst:
        return h
    d = h.shape[1]
    grid = h.reshape(src, src, d)
    if dst < src:
        f = src // dst
        grid = grid.reshape(dst, f, dst, f, d).astype(np.float64).mean(axis=(1, 3))
    else:
        f = dst // src
        grid = np.repeat(np.repeat(grid, f, axis=0), f, axis=1)
    return as_tensor(grid.reshape(dst * dst, d))


@dataclass(frozen=True)
class _TokenGroups:
    """Distinct context rows; tokens sharing a row get identical keys and values."""

    rows: np.ndarray  # U x d_ctx
    inverse: np.ndarray  # S, token -> group
    counts: np.ndarray  # U

    @classmethod
    def of(cls, ctx: np.ndarray) -> "_TokenGroups":
        rows, first, inverse, counts = np.unique(
            ctx, axis=0, return_index=True, return_inverse=True, return_counts=True
        )
        # order groups by first occurrence so the computation is layout-stable
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        return cls(np.ascontiguousarray(rows[order]), rank[inverse.ravel()], counts[order])


def cross_attention(visual: np.ndarray, context, layer: LayerSpec, _groups=None) -> tuple[np.ndarray, np.ndarray]:
    """``softmax(q k^T / sqrt(d_head)) v`` with tokens as keys.

    Returns the projected output (``B^2 x d_model``) and the head-averaged
    attention map reshaped to ``S x B x B``.

    Identical context rows (padding, repeated words) are attended as one
    group: adding ``log(count)`` to a group's logit gives the group's total
    probability mass, which is then shared evenly by its tokens. This is the
    same softmax, evaluated over distinct keys only.
    """
    ctx = context.matrix if isinstance(context, PromptEmbedding) else as_tensor(context)
    visual = as_tensor(visual)
    n_pos = layer.size * layer.size
    if visual.shape != (n_pos, layer.query.shape[0]) or ctx.ndim != 2 or ctx.shape[1] != layer.key.shape[0]:
        raise ModelCorruptionError(
            f"cross-attention inputs visual {visual.shape}, context {ctx.shape} do not fit layer "
            f"(B={layer.size}, d_model={layer.query.shape[0]}, d_ctx={layer.key.shape[0]})"
        )
    groups = _groups if _groups is not None else _TokenGroups.of(ctx)
    try:
        q = matmul(visual, layer.query)
        k = matmul(groups.rows, layer.key)
        v = matmul(groups.rows, layer.value)
    except DimensionError as exc:
        raise ModelCorruptionError(str(exc)) from exc
    d_attn = q.shape[1]
    d_head = d_attn // layer.heads
    scale = 1.0 / math.sqrt(d_head)
    log_counts = np.log(groups.counts.astype(np.float64)) / scale
    heads_out = []
    mass = np.zeros((n_pos, groups.counts.size), dtype=np.float64)
    for hd in range(layer.heads):
        sl = slice(hd * d_head, (hd + 1) * d_head)
        logits = matmul(q[:, sl], np.ascontiguousarray(k[:, sl].T)) + log_counts
        group_mass = softmax_rows(logits, scale)
        mass += group_mass
        heads_out.append(matmul(group_mass, np.ascontiguousarray(v[:, sl])))
    attended = heads_out[0] if layer.heads == 1 else np.concatenate(heads_out, axis=1)
    out = matmul(attended, layer.out)
    per_token = mass / (groups.counts * layer.heads)
    maps = as_tensor(per_token.T[groups.inverse]).reshape(ctx.shape[0], layer.size, layer.size)
    return out, maps


def predict_noise(z: np.ndarray, t: int, context, model: ToyDenoiserModel) -> DenoiserOutput:
    """Deterministic forward pass returning noise and every layer's attention map.

    ``context`` is a :class:`PromptEmbedding`, a raw ``S x d_ctx`` matrix, or
    ``None`` for the model's bound empty-prompt embedding.
    """
    if context is None:
        if model.null_context is None:
            raise ArgumentError("no null context bound to the model; call model.bind() first")
        context = model.null_context
    z = as_tensor(z)
    c, b0 = model.latent_channels, model.latent_size
    if z.shape != (c, b0, b0):
        raise ModelCorruptionError(f"latent has shape {z.shape}, model expects {(c, b0, b0)}")
    if t < 0:
        raise ArgumentError(f"timestep must be non-negative, got {t}")

    ctx = context.matrix if isinstance(context, PromptEmbedding) else as_tensor(context)
    groups = _TokenGroups.of(ctx)
    tokens = np.ascontiguousarray(z.reshape(c, b0 * b0).T)
    temb = matmul(timestep_features(t, model.d_model)[None, :], model.w_time)
    h = matmul(tokens, model.w_in) + model.b_in + model.pos + temb
    cur = b0
    maps = []
    for layer in model.layers:
        h = _change_resolution(h, cur, layer.size)
        cur = layer.size
        h = h + matmul(h, layer.mix)
        out, amap = cross_attention(h, ctx, layer, groups)
        h = h + out
        maps.append(amap)
    h = _change_resolution(h, cur, b0)
    eps = np.tanh(matmul(h, model.w_out))
    eps = np.ascontiguousarray(eps.T).reshape(c, b0, b0)
    return DenoiserOutput(as_tensor(eps), maps)
