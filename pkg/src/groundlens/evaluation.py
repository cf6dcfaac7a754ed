"""Dataset-level evaluation and ablation sweeps."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from .dataset_io import (
    GroundingSample,
    csv_bytes,
    format_float,
    heatmap_to_original,
    load_checkpoint,
    load_image,
    load_vocab,
)
from .errors import EmptySelectionError
from .grounding import SelectionConfig, harvest_attention, postprocess, prepare
from .metrics import METRIC_NAMES, MetricsRecord, evaluate_heatmap, rasterize_bboxes, summarize
from .scheduler import NoiseSchedule
from .text import select_token_indices

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    records: list[MetricsRecord] = field(default_factory=list)
    excluded: dict[str, int] = field(default_factory=dict)

    def summaries(self, label_order=None):
        return summarize(self.records, label_order, self.excluded)


def _selection(tokens, cfg: SelectionConfig, vocab, pathology: str):
    try:
        sel = select_token_indices(tokens, cfg.token_mode, vocab, pathology, cfg.include_specials)
    except EmptySelectionError:
        return None
    return sel or None


def _score(sample: GroundingSample, grid):
    h, w = sample.entry.original_size
    full = heatmap_to_original(grid, h, w)
    gt = rasterize_bboxes(sample.boxes, h, w)
    return evaluate_heatmap(full, gt, sample.sample_id, sample.entry.pathology)


def sweep_sample(sample: GroundingSample, model, vocab, sched: NoiseSchedule, configs):
    """Harvest once for ``sample`` and score it under every config.

    Returns one :class:`MetricsRecord` per config, or ``None`` where the
    token selection is empty (pathology name absent from the prompt).
    """
    image, _ = load_image(sample.entry.image_path)
    model, z0, tokens, emb = prepare(image, sample.entry.prompt, model, vocab, sample.sample_id)
    pathology = sample.entry.pathology
    selections = [_selection(tokens, cfg, vocab, pathology) for cfg in configs]
    stored = sorted({s for sel in selections if sel for s in sel})
    if not stored:
        return [None] * len(configs)
    layers = sorted({li for cfg, sel in zip(configs, selections) if sel for li in cfg.layers})
    steps = sorted({t for cfg, sel in zip(configs, selections) if sel for t in cfg.timesteps})
    stack = harvest_attention(z0, emb, model, sched, layers=layers, timesteps=steps, token_indices=stored)
    out = []
    for cfg, sel in zip(configs, selections):
        if sel is None:
            out.append(None)
            continue
        hm = postprocess(stack, sel, cfg, sample.sample_id)
        rec = _score(sample, hm.grid)
        if hm.otsu_degenerate:
            rec.flags = rec.flags + ("otsu_degenerate",)
        out.append(rec)
    return out


_WORKER = {}


def _init_worker(checkpoint, vocab_path, sched):
    _WORKER["model"] = load_checkpoint(checkpoint)
    _WORKER["vocab"] = load_vocab(vocab_path)
    _WORKER["sched"] = sched


def _worker_sweep(sample, configs):
    return sweep_sample(sample, _WORKER["model"], _WORKER["vocab"], _WORKER["sched"], configs)


def run_sweep(samples, configs, model, vocab, sched, jobs: int = 1, checkpoint=None, vocab_path=None):
    """Per-config :class:`EvalResult` over all samples, in sample order."""
    for cfg in configs:
        cfg.check_model(model.n_layers)
    if jobs > 1 and checkpoint is not None and vocab_path is not None:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(checkpoint, vocab_path, sched)) as ex:
            per_sample = list(ex.map(_worker_sweep, samples, itertools.repeat(configs)))
    else:
        per_sample = []
        for i, sample in enumerate(samples, start=1):
            log.info("sample %d/%d %s", i, len(samples), sample.sample_id)
            per_sample.append(sweep_sample(sample, model, vocab, sched, configs))
    results = [EvalResult() for _ in configs]
    for sample, recs in zip(samples, per_sample):
        for res, rec in zip(results, recs):
            if rec is None:
                lab = sample.entry.pathology
                res.excluded[lab] = res.excluded.get(lab, 0) + 1
            else:
                res.records.append(rec)
    return results


def evaluate(samples, cfg: SelectionConfig, model, vocab, sched, jobs: int = 1, **paths) -> EvalResult:
    return run_sweep(samples, [cfg], model, vocab, sched, jobs, **paths)[0]


def ablation_grid(base: SelectionConfig, layer_sets, t_ranges, otsu_modes, token_modes) -> list[SelectionConfig]:
    """Cartesian product of the sweep axes, varying ``base``."""
    return [
        replace(base, layers=tuple(ls), t_range=tuple(tr), otsu=otsu, token_mode=tm)
        for ls, tr, otsu, tm in itertools.product(layer_sets, t_ranges, otsu_modes, token_modes)
    ]


ABLATION_HEADER = ("config", "layers", "t_range", "otsu", "tokens", "label", "metric", "mean", "std", "n", "excluded")


def ablation_rows(configs, results, label_order=None):
    rows = []
    for i, (cfg, res) in enumerate(zip(configs, results)):
        for s in res.summaries(label_order):
            for metric in METRIC_NAMES:
                rows.append(
                    (
                        i,
                        ",".join(map(str, cfg.layers)),
                        f"{cfg.t_range[0]}:{cfg.t_range[1]}",
                        "on" if cfg.otsu else "off",
                        cfg.token_mode,
                        s.label,
                        metric,
                        format_float(s.mean[metric]),
                        format_float(s.std[metric]),
                        s.n,
                        s.excluded,
                    )
                )
    return rows


def ablation_csv(configs, results, label_order=None) -> bytes:
    return csv_bytes([ABLATION_HEADER, *ablation_rows(configs, results, label_order)])
