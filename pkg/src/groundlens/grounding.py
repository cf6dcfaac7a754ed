"""Attention harvesting along the DDIM inversion path and heatmap construction."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .denoiser import IMAGE_SIZE, LatentImage, ToyDenoiserModel, encode_image, predict_noise
from .errors import ArgumentError, EmptySelectionError
from .numerics import as_tensor, gaussian_smooth, minmax_normalize, resize_bilinear
from .scheduler import NoiseSchedule, ddim_invert_step
from .text import PromptEmbedding, Vocabulary, embed, select_token_indices, tokenize

log = logging.getLogger(__name__)

OTSU_BINS = 256


@dataclass(frozen=True)
class SelectionConfig:
    """Which maps enter the heatmap and how it is post-processed.

    ``layers`` are 1-based; ``t_range`` is inclusive on both ends.
    """

    layers: tuple[int, ...] = (3, 4, 6, 7)
    t_range: tuple[int, int] = (120, 180)
    token_mode: str = "all"
    sigma: float = 2.5
    otsu: bool = True
    total_steps: int = 300
    include_specials: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(set(int(x) for x in self.layers))))
        object.__setattr__(self, "t_range", (int(self.t_range[0]), int(self.t_range[1])))
        lo, hi = self.t_range
        if not self.layers or min(self.layers) < 1:
            raise ArgumentError(f"layers must be a non-empty set of 1-based indices, got {self.layers}")
        if not 0 <= lo <= hi < self.total_steps:
            raise ArgumentError(f"timestep range {lo}:{hi} invalid for T={self.total_steps}")
        if not self.sigma > 0:
            raise ArgumentError(f"sigma must be positive, got {self.sigma}")
        if self.token_mode not in ("all", "pathology"):
            raise ArgumentError(f"unknown token mode {self.token_mode!r}")

    @property
    def timesteps(self) -> range:
        return range(self.t_range[0], self.t_range[1] + 1)

    def check_model(self, n_layers: int) -> None:
        if max(self.layers) > n_layers:
            raise ArgumentError(f"layer {max(self.layers)} exceeds model depth {n_layers}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        d["t_range"] = list(self.t_range)
        return d


@dataclass
class AttentionStack:
    """Conditional attention maps keyed by ``(layer, t)``.

    When ``token_indices`` is set, each entry holds only those sequence
    positions (in that order) instead of all ``S`` rows.
    """

    n_layers: int
    total_steps: int
    seq_len: int
    token_indices: tuple[int, ...] | None = None
    entries: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    latents: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def token_slice(self, layer: int, t: int, s: int) -> np.ndarray:
        amap = self.entries[(layer, t)]
        if self.token_indices is None:
            return amap[s]
        try:
            row = self.token_indices.index(s)
        except ValueError:
            raise EmptySelectionError(f"token position {s} was not harvested") from None
        return amap[row]


def harvest_attention(
    z0: LatentImage,
    prompt: PromptEmbedding,
    model: ToyDenoiserModel,
    sched: NoiseSchedule,
    layers=None,
    timesteps=None,
    token_indices=None,
    conditional: bool = True,
    record_latents: bool = False,
) -> AttentionStack:
    """Run DDIM inversion from ``z0`` and collect the prompt's attention maps.

    The latent is advanced using only the empty-prompt noise estimate; the
    prompt-conditioned pass at the same ``(z_t, t)`` contributes its maps.
    ``layers``/``timesteps``/``token_indices`` restrict what is stored (all
    by default); the conditional pass is skipped at timesteps that store
    nothing. With no restriction the stack ends with ``N * T`` entries.
    """
    T = sched.total_steps
    keep_layers = set(range(1, model.n_layers + 1)) if layers is None else set(layers)
    keep_steps = set(range(T)) if timesteps is None else set(timesteps)
    rows = None if token_indices is None else tuple(int(s) for s in token_indices)
    stack = AttentionStack(model.n_layers, T, prompt.matrix.shape[0], rows)
    z = z0.grid
    if record_latents:
        stack.latents = [z]
    for t in range(T):
        uncond = predict_noise(z, t, None, model)
        if conditional and t in keep_steps and keep_layers:
            cond = predict_noise(z, t, prompt, model)
            for li in keep_layers:
                amap = cond.attn[li - 1]
                stack.entries[(li, t)] = amap if rows is None else np.ascontiguousarray(amap[list(rows)])
        z = ddim_invert_step(z, uncond.epsilon, t, sched)
        if record_latents:
            stack.latents.append(z)
    return stack


def aggregate_heatmap(
    stack: AttentionStack,
    token_indices,
    cfg: SelectionConfig,
    out_size: int = IMAGE_SIZE,
) -> np.ndarray:
    """Mean of ``resize(normalize(A[s, :, :, l, t]))`` over the selection.

    Bilinear resizing is linear, so normalised maps are summed per native
    resolution and each sum is resized once.
    """
    token_indices = list(token_indices)
    steps = list(cfg.timesteps)
    if not token_indices or not cfg.layers or not steps:
        raise EmptySelectionError("heatmap selection is empty")
    cfg.check_model(stack.n_layers)
    sums: dict[int, np.ndarray] = {}
    count = 0
    for li in cfg.layers:
        for t in steps:
            if (li, t) not in stack.entries:
                raise EmptySelectionError(f"no harvested map for layer {li}, timestep {t}")
            for s in token_indices:
                m = minmax_normalize(stack.token_slice(li, t, s)).astype(np.float64)
                b = m.shape[0]
                if b in sums:
                    sums[b] += m
                else:
                    sums[b] = m.copy()
                count += 1
    h = np.zeros((out_size, out_size), dtype=np.float64)
    for b in sorted(sums):
        h += resize_bilinear(sums[b] / count, out_size, out_size)
    return as_tensor(np.clip(h, 0.0, 1.0))


class OtsuResult(NamedTuple):
    threshold: float
    degenerate: bool


def otsu_bin_indices(h: np.ndarray) -> np.ndarray:
    """Bin ``k`` holds values in ``(k/256, (k+1)/256]``; bin 0 also holds 0."""
    v = np.clip(np.asarray(h, dtype=np.float64).ravel(), 0.0, 1.0)
    return np.clip(np.ceil(v * OTSU_BINS).astype(np.int64) - 1, 0, OTSU_BINS - 1)


def otsu_threshold(h: np.ndarray) -> OtsuResult:
    """Threshold ``k/256`` maximising between-class variance of a 256-bin histogram.

    Pixels ``<= k/256`` form the background, so the foreground is exactly
    ``h > threshold``. Scores are compared as exact integer ratios; ties go
    to the lower threshold. When no split separates anything (e.g. a
    constant map) the threshold is 0 and ``degenerate`` is set.
    """
    counts = np.bincount(otsu_bin_indices(h), minlength=OTSU_BINS)
    n = int(counts.sum())
    total = int((counts * np.arange(OTSU_BINS)).sum())
    best_k, best = 0, Fraction(0)
    n0 = s0 = 0
    for k in range(OTSU_BINS):
        if k:
            n0 += int(counts[k - 1])
            s0 += (k - 1) * int(counts[k - 1])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        score = Fraction((s0 * n1 - (total - s0) * n0) ** 2, n0 * n1)
        if score > best:
            best_k, best = k, score
    if best == 0:
        return OtsuResult(0.0, True)
    return OtsuResult(best_k / OTSU_BINS, False)


def apply_mask(h: np.ndarray, threshold: float) -> np.ndarray:
    """Zero everything at or below ``threshold``; foreground values pass unchanged."""
    h = as_tensor(h)
    keep = h.astype(np.float64) > float(threshold)
    return np.where(keep, h, np.float32(0.0)).astype(np.float32)


@dataclass
class Heatmap:
    grid: np.ndarray
    config: SelectionConfig
    sample_id: str = ""
    otsu_threshold: float | None = None
    otsu_degenerate: bool = False
    token_indices: tuple[int, ...] = ()


def postprocess(stack: AttentionStack, token_indices, cfg: SelectionConfig, sample_id: str = "") -> Heatmap:
    """Aggregate, smooth, then optionally apply the Otsu foreground mask."""
    h = gaussian_smooth(aggregate_heatmap(stack, token_indices, cfg), cfg.sigma)
    thr, degenerate = None, False
    if cfg.otsu:
        thr, degenerate = otsu_threshold(h)
        if degenerate:
            log.warning("sample %s: degenerate heatmap, Otsu threshold set to 0", sample_id or "?")
        h = apply_mask(h, thr)
    return Heatmap(h, cfg, sample_id, thr, degenerate, tuple(token_indices))


def prepare(image, prompt: str, model: ToyDenoiserModel, vocab: Vocabulary, sample_id: str = ""):
    """Encode the image, embed the prompt and bind the empty prompt to the model."""
    if model.null_context is None:
        model = model.bind(embed(tokenize("", vocab), vocab).matrix)
    z0 = encode_image(image, model, sample_id)
    tokens = tokenize(prompt, vocab)
    return model, z0, tokens, embed(tokens, vocab)


def run_pipeline(
    image,
    prompt: str,
    model: ToyDenoiserModel,
    vocab: Vocabulary,
    sched: NoiseSchedule,
    cfg: SelectionConfig,
    pathology: str = "",
    sample_id: str = "",
) -> Heatmap:
    if cfg.total_steps != sched.total_steps:
        raise ArgumentError(f"config T={cfg.total_steps} differs from schedule T={sched.total_steps}")
    cfg.check_model(model.n_layers)
    model, z0, tokens, emb = prepare(image, prompt, model, vocab, sample_id)
    sel = select_token_indices(tokens, cfg.token_mode, vocab, pathology, cfg.include_specials)
    if not sel:
        raise EmptySelectionError("prompt has no selectable tokens")
    stack = harvest_attention(
        z0, emb, model, sched, layers=cfg.layers, timesteps=cfg.timesteps, token_indices=sel
    )
    return postprocess(stack, sel, cfg, sample_id)
