"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.
Set ``GROUNDLENS_LOG`` to ``error``, ``info`` or ``debug`` for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dataset_io import (
    MSCXR_LABELS,
    atomic_write,
    load_checkpoint,
    load_image,
    load_manifest,
    load_vocab,
    merge_samples,
    quantize,
    records_csv,
    save_heatmap,
    summary_csv,
    write_pgm,
)
from .denoiser import IMAGE_SIZE
from .errors import ArgumentError, EmptySelectionError, FormatError, GroundLensError, ValidationError
from .evaluation import ablation_csv, ablation_grid, evaluate, run_sweep
from .grounding import SelectionConfig, harvest_attention, postprocess, prepare
from .metrics import MIOU_THRESHOLDS
from .numerics import minmax_normalize
from .scheduler import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STYLE, make_schedule
from .text import SEQ_LEN, select_token_indices, token_strings

log = logging.getLogger("groundlens")


class UsageError(GroundLensError):
    """Bad flags or missing inputs (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    selection: SelectionConfig
    checkpoint: Path
    vocab: Path
    out: Path
    manifest: Path | None = None
    jobs: int = 1
    seed: int = 0
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    schedule: str = DEFAULT_STYLE

    def validate(self) -> None:
        for name in ("checkpoint", "vocab", "manifest"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise UsageError(f"--{name} {p} does not exist")
        if self.jobs < 1:
            raise UsageError("--jobs must be >= 1")


# --------------------------------------------------------------------------- flag parsing


def parse_layers(text: str) -> tuple[int, ...]:
    """``"3,4,6,7"`` or ranges such as ``"1-11"`` / ``"3-5,7"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if not m:
            raise argparse.ArgumentTypeError(f"bad layer list {text!r}")
        lo, hi = int(m[1]), int(m[2] or m[1])
        if hi < lo:
            raise argparse.ArgumentTypeError(f"bad layer range {part!r}")
        out.extend(range(lo, hi + 1))
    return tuple(out)


def parse_range(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*:\s*(\d+)\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"timestep range must be LO:HI, got {text!r}")
    return int(m[1]), int(m[2])


def parse_onoff(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _add_common(p: argparse.ArgumentParser, need_manifest: bool = False) -> None:
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    if need_manifest:
        p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--timesteps", type=int, default=300, help="DDIM inversion steps T")
    p.add_argument("--t-range", type=parse_range, default=(120, 180), help="inclusive LO:HI")
    p.add_argument("--layers", type=parse_layers, default=(3, 4, 6, 7), help="1-based layer indices")
    p.add_argument("--sigma", type=float, default=2.5)
    p.add_argument("--otsu", type=parse_onoff, default=True, metavar="{on,off}")
    p.add_argument("--tokens", choices=("all", "pathology"), default="all")
    p.add_argument("--include-specials", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="reserved; the pipeline is deterministic")
    p.add_argument("--beta-start", type=float, default=DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=float, default=DEFAULT_BETA_END)
    p.add_argument("--schedule", choices=("linear", "scaled_linear"), default=DEFAULT_STYLE)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groundlens", description="Zero-shot phrase grounding from diffusion cross-attention.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ground", help="heatmap for one image and prompt")
    _add_common(p)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--prompt", required=True)
    p.add_argument("--pathology", default="", help="pathology name for --tokens pathology")

    p = sub.add_parser("evaluate", help="metrics over a manifest")
    _add_common(p, need_manifest=True)

    p = sub.add_parser("ablate", help="sweep layer sets, timestep ranges, Otsu and token modes")
    _add_common(p, need_manifest=True)
    p.add_argument("--layer-sets", default="3,4,6,7;1-11", help="';'-separated layer lists")
    p.add_argument("--t-ranges", default="120:180;0:299", help="';'-separated LO:HI ranges")
    p.add_argument("--otsu-modes", default="on", help="comma list of on/off")
    p.add_argument("--token-modes", default="all", help="comma list of all/pathology")

    p = sub.add_parser("inspect", help="dump per-token attention maps at one layer and timestep")
    _add_common(p)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--prompt", required=True)
    p.add_argument("--layer", required=True, type=int)
    p.add_argument("--timestep", required=True, type=int)

    p = sub.add_parser("make-toy", help="write the toy vocabulary, planted checkpoint and manifest")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    return parser


def run_config(args) -> RunConfig:
    try:
        selection = SelectionConfig(
            layers=args.layers,
            t_range=args.t_range,
            token_mode=args.tokens,
            sigma=args.sigma,
            otsu=args.otsu,
            total_steps=args.timesteps,
            include_specials=args.include_specials,
        )
    except ArgumentError as exc:
        raise UsageError(str(exc)) from exc
    cfg = RunConfig(
        selection,
        args.checkpoint,
        args.vocab,
        args.out,
        getattr(args, "manifest", None),
        args.jobs,
        args.seed,
        args.beta_start,
        args.beta_end,
        args.schedule,
    )
    cfg.validate()
    return cfg


def load_assets(cfg: RunConfig):
    try:
        model = load_checkpoint(cfg.checkpoint)
        vocab = load_vocab(cfg.vocab)
        sched = make_schedule(cfg.selection.total_steps, cfg.beta_start, cfg.beta_end, cfg.schedule)
        cfg.selection.check_model(model.n_layers)
    except (FormatError, ArgumentError) as exc:
        raise UsageError(str(exc)) from exc
    if vocab.dim != model.d_ctx:
        raise UsageError(f"vocabulary dim {vocab.dim} does not match checkpoint d_ctx {model.d_ctx}")
    return model, vocab, sched


def config_log(cfg: RunConfig, model) -> dict:
    """Setup constants as written to every run log."""
    sel = cfg.selection
    return {
        "total_steps": sel.total_steps,
        "layers": list(sel.layers),
        "layer_sizes": {str(li): model.sizes[li - 1] for li in sel.layers},
        "n_layers": model.n_layers,
        "t_range": list(sel.t_range),
        "n_timesteps_selected": len(sel.timesteps),
        "sigma": sel.sigma,
        "otsu": sel.otsu,
        "token_mode": sel.token_mode,
        "include_specials": sel.include_specials,
        "seq_len": SEQ_LEN,
        "input_size": [IMAGE_SIZE, IMAGE_SIZE],
        "miou_thresholds": list(MIOU_THRESHOLDS),
        "schedule": {"style": cfg.schedule, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
    }


def _load_image(path):
    try:
        return load_image(path)
    except (FileNotFoundError, FormatError) as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------- commands


def cmd_ground(args) -> int:
    cfg = run_config(args)
    if not Path(args.image).is_file():
        raise UsageError(f"--image {args.image} does not exist")
    model, vocab, sched = load_assets(cfg)
    image, orig = _load_image(args.image)
    sel_cfg = cfg.selection
    model, z0, tokens, emb = prepare(image, args.prompt, model, vocab, str(args.image))
    try:
        sel = select_token_indices(tokens, sel_cfg.token_mode, vocab, args.pathology, sel_cfg.include_specials)
    except (EmptySelectionError, ArgumentError) as exc:
        raise UsageError(str(exc)) from exc
    if not sel:
        raise UsageError("prompt has no selectable tokens")
    stack = harvest_attention(z0, emb, model, sched, layers=sel_cfg.layers, timesteps=sel_cfg.timesteps, token_indices=sel)
    hm = postprocess(stack, sel, sel_cfg, str(args.image))
    out = Path(args.out)
    save_heatmap(out / "heatmap", hm.grid)
    names = token_strings(tokens, vocab)
    entry = {
        "config": config_log(cfg, model),
        "image": str(args.image),
        "original_size": list(orig),
        "prompt": args.prompt,
        "otsu_threshold": hm.otsu_threshold,
        "otsu_degenerate": hm.otsu_degenerate,
        "n_layers_selected": len(sel_cfg.layers),
        "n_timesteps_selected": len(sel_cfg.timesteps),
        "n_maps_averaged": len(sel_cfg.layers) * len(sel_cfg.timesteps) * len(sel),
        "token_indices": list(sel),
        "tokens": [names[i] for i in sel],
    }
    atomic_write(out / "ground.json", (json.dumps(entry, indent=1) + "\n").encode("utf-8"))
    log.info("wrote %s", out)
    return 0


def _samples(cfg: RunConfig):
    try:
        entries = load_manifest(cfg.manifest)
        samples = merge_samples(entries)
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc
    for s in samples:
        if not Path(s.entry.image_path).is_file():
            raise UsageError(f"image {s.entry.image_path} does not exist")
    return samples


def cmd_evaluate(args) -> int:
    cfg = run_config(args)
    model, vocab, sched = load_assets(cfg)
    samples = _samples(cfg)
    res = evaluate(samples, cfg.selection, model, vocab, sched, cfg.jobs, checkpoint=cfg.checkpoint, vocab_path=cfg.vocab)
    out = Path(args.out)
    atomic_write(out / "per_sample.csv", records_csv(res.records))
    atomic_write(out / "summary.csv", summary_csv(res.summaries(MSCXR_LABELS)))
    atomic_write(out / "config.json", (json.dumps(config_log(cfg, model), indent=1) + "\n").encode("utf-8"))
    log.info("evaluated %d samples, excluded %d", len(res.records), sum(res.excluded.values()))
    return 0


def cmd_ablate(args) -> int:
    cfg = run_config(args)
    try:
        layer_sets = [parse_layers(s) for s in args.layer_sets.split(";") if s.strip()]
        t_ranges = [parse_range(s) for s in args.t_ranges.split(";") if s.strip()]
        otsu_modes = [parse_onoff(s.strip()) for s in args.otsu_modes.split(",") if s.strip()]
        token_modes = [s.strip() for s in args.token_modes.split(",") if s.strip()]
        configs = ablation_grid(cfg.selection, layer_sets, t_ranges, otsu_modes, token_modes)
    except (argparse.ArgumentTypeError, ArgumentError) as exc:
        raise UsageError(str(exc)) from exc
    if not configs:
        raise UsageError("empty ablation grid")
    model, vocab, sched = load_assets(cfg)
    for c in configs:
        try:
            c.check_model(model.n_layers)
        except ArgumentError as exc:
            raise UsageError(str(exc)) from exc
    samples = _samples(cfg)
    results = run_sweep(samples, configs, model, vocab, sched, cfg.jobs, checkpoint=cfg.checkpoint, vocab_path=cfg.vocab)
    atomic_write(Path(args.out) / "ablation.csv", ablation_csv(configs, results, MSCXR_LABELS))
    return 0


def _safe_name(tok: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", tok).strip("_") or "tok"


def cmd_inspect(args) -> int:
    cfg = run_config(args)
    if not Path(args.image).is_file():
        raise UsageError(f"--image {args.image} does not exist")
    model, vocab, sched = load_assets(cfg)
    if not 1 <= args.layer <= model.n_layers:
        raise UsageError(f"--layer must be in 1..{model.n_layers}")
    if not 0 <= args.timestep < sched.total_steps:
        raise UsageError(f"--timestep must be in 0..{sched.total_steps - 1}")
    image, _ = _load_image(args.image)
    model, z0, tokens, emb = prepare(image, args.prompt, model, vocab, str(args.image))
    stack = harvest_attention(z0, emb, model, sched, layers=[args.layer], timesteps=[args.timestep])
    amap = stack.entries[(args.layer, args.timestep)]
    names = token_strings(tokens, vocab)
    out = Path(args.out)
    for s in range(tokens.n_real):
        stem = out / f"L{args.layer:02d}_t{args.timestep:03d}_{s:02d}_{_safe_name(names[s])}"
        save_heatmap(stem, amap[s])
        # preview is rescaled for visibility; the .f32 keeps raw probabilities
        write_pgm(stem.with_name(stem.name + ".pgm"), quantize(minmax_normalize(amap[s])))
    return 0


def cmd_make_toy(args) -> int:
    from .toy import write_toy_assets

    paths = write_toy_assets(args.out, seed=args.seed)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


COMMANDS = {
    "ground": cmd_ground,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
    "make-toy": cmd_make_toy,
}


def _configure_logging() -> None:
    level = os.environ.get("GROUNDLENS_LOG", "error").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"groundlens: error: {exc}", file=sys.stderr)
        return 2
    except GroundLensError as exc:
        print(f"groundlens: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
