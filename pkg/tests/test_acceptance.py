"""Acceptance criteria 1-9.

Each check returns ``(ok, detail)`` and is timed against its budget. Under
pytest every criterion is a test and a PASS/FAIL line is echoed in the
terminal summary; ``python tests/test_acceptance.py`` prints the same lines.
"""

from __future__ import annotations

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from groundlens import cli, toy  # noqa: E402
from groundlens.denoiser import predict_noise  # noqa: E402
from groundlens.errors import UndefinedMetricError  # noqa: E402
from groundlens.grounding import SelectionConfig, harvest_attention, otsu_threshold, prepare, run_pipeline  # noqa: E402
from groundlens.metrics import abs_cnr, auc_roc, cnr, iou_at_threshold, miou, rasterize_bboxes  # noqa: E402
from groundlens.scheduler import ddim_denoise_step, ddim_invert_step, make_schedule  # noqa: E402
from groundlens.text import embed, tokenize  # noqa: E402
from oracles import auc_ref, cnr_ref, fuzz_metric_instance, iou_ref, miou_ref, otsu_ref  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
PROMPT_WORDS = toy.WORDS + list(toy.PATHOLOGY_PIECES) + ["x-ray", "2cm", "??"]


def _random_prompt(rng) -> str:
    n = int(rng.integers(0, 90)) if rng.random() < 0.1 else int(rng.integers(0, 8))
    return " ".join(rng.choice(PROMPT_WORDS, size=n))


def check_attention_contract():
    rng = np.random.default_rng(101)
    vocab = toy.build_vocab()
    models = [toy.build_model(), toy.build_model(seed=7, planted=False)]
    worst = 0.0
    for i in range(1000):
        model = models[i % 2]
        z = rng.normal(0, float(rng.uniform(0.1, 5)), (4, 32, 32)).astype(np.float32)
        t = int(rng.integers(0, 300))
        ctx = embed(tokenize(_random_prompt(rng), vocab), vocab)
        for amap in predict_noise(z, t, ctx, model).attn:
            # each query position's weights over the S tokens
            worst = max(worst, float(np.abs(amap.astype(np.float64).sum(axis=0) - 1.0).max()))
    return worst <= 1e-6, f"max |sum - 1| = {worst:.2e} over 1000 triples x 11 layers"


def check_ddim_round_trip():
    sched = make_schedule()
    rng = np.random.default_rng(202)
    per_step = 0.0
    for _ in range(500):
        t = int(rng.integers(0, 300))
        z = rng.normal(size=(4, 16, 16)).astype(np.float32)
        eps = rng.normal(size=(4, 16, 16)).astype(np.float32)
        back = ddim_denoise_step(ddim_invert_step(z, eps, t, sched), eps, t, sched)
        per_step = max(per_step, float(np.abs(back - z).max()))
    model = toy.build_model(latent_size=16, sizes=(16, 16, 8, 8, 8, 8, 8, 8, 16, 16, 16))
    vocab = toy.build_vocab()
    model = model.bind(embed(tokenize("", vocab), vocab).matrix)
    z0 = rng.normal(size=(4, 16, 16)).astype(np.float32)
    z, eps_seq = z0, []
    for t in range(300):
        eps = predict_noise(z, t, None, model).epsilon
        eps_seq.append(eps)
        z = ddim_invert_step(z, eps, t, sched)
    for t in reversed(range(300)):
        z = ddim_denoise_step(z, eps_seq[t], t, sched)
    drift = float(np.abs(z - z0).max())
    ok = per_step <= 1e-5 and drift < 1e-3
    return ok, f"per-step max {per_step:.2e} (tol 1e-5), 300-step drift {drift:.2e} (tol 1e-3)"


def check_prompt_independence():
    vocab, model, sched = toy.build_vocab(), toy.build_model(), make_schedule()
    image = toy.synthetic_image(512, 512, [toy.PLANTED_BOX], seed=3) / 255.0
    trajectories = []
    for prompt in ("small right pneumothorax", "mild pulmonary edema with bilateral effusion"):
        bound, z0, _, emb = prepare(image, prompt, model, vocab)
        stack = harvest_attention(z0, emb, bound, sched, layers=(3, 4, 6, 7), timesteps=range(120, 181),
                                  token_indices=[1], record_latents=True)
        trajectories.append(stack.latents)
    a, b = trajectories
    same = len(a) == len(b) == 301 and all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    return same, f"{len(a)} latents compared bytewise"


def _metric_instances(n=200, seed=404):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        h, boxes = fuzz_metric_instance(rng)
        gt = rasterize_bboxes(boxes, *h.shape)
        if gt.grid.all():
            continue  # no background: AUC and CNR are undefined by construction
        out.append((h, gt))
    return out


def check_metric_oracles():
    bad, undefined, worst_auc = [], 0, 0.0
    for i, (h, gt) in enumerate(_metric_instances()):
        for thr in (0.1, 0.2, 0.3, 0.4, 0.5):
            if iou_at_threshold(h, gt, thr) != float(iou_ref(h, gt.grid, thr)):
                bad.append((i, f"iou@{thr}"))
        if miou(h, gt) != miou_ref(h, gt.grid):
            bad.append((i, "miou"))
        d = abs(auc_roc(h, gt) - auc_ref(h, gt.grid))
        worst_auc = max(worst_auc, d)
        if d > 1e-9:
            bad.append((i, "auc"))
        ref = cnr_ref(h, gt.grid)
        if ref is None:
            undefined += 1
            try:
                cnr(h, gt)
                bad.append((i, "cnr should be undefined"))
            except UndefinedMetricError:
                pass
        elif cnr(h, gt) != ref or abs_cnr(h, gt) != abs(ref):
            bad.append((i, "cnr"))
    return not bad, f"200 instances, mismatches {bad[:5]}, max AUC diff {worst_auc:.1e}, undefined CNR {undefined}"


def check_otsu():
    rng = np.random.default_rng(505)
    bad = 0
    for i in range(200):
        shape = tuple(int(v) for v in rng.integers(2, 41, size=2))
        kind = i % 4
        if kind == 0:
            h = rng.random(shape)
        elif kind == 1:
            h = np.clip(rng.normal(0.3, 0.1, shape) + (rng.random(shape) < 0.3) * 0.4, 0, 1)
        elif kind == 2:
            h = rng.integers(0, 257, shape) / 256.0  # values on the bin edges
        else:
            h = np.full(shape, rng.random()) if i % 8 == 3 else rng.random(shape) ** 3
        h = h.astype(np.float32)
        if tuple(otsu_threshold(h)) != otsu_ref(h):
            bad += 1
    return bad == 0, f"{bad} of 200 thresholds differ from the exhaustive search"


def check_planted_grounding():
    vocab, model, sched = toy.build_vocab(), toy.build_model(), make_schedule()
    raw = toy.synthetic_image(512, 512, [toy.PLANTED_BOX], seed=0)
    image = raw / 255.0
    prompt = "small right pneumothorax"
    gt = rasterize_bboxes([toy.PLANTED_BOX], 512, 512)
    default = run_pipeline(image, prompt, model, vocab, sched, SelectionConfig())
    wide = run_pipeline(image, prompt, model, vocab, sched, SelectionConfig(layers=range(1, 12), t_range=(0, 299)))
    iou5 = iou_at_threshold(default.grid, gt, 0.5)
    m_mid, m_all = miou(default.grid, gt), miou(wide.grid, gt)
    ok = iou5 > 0.8 and m_mid >= m_all
    return ok, f"IoU@0.5 {iou5:.3f} (> 0.8); mIoU middle {m_mid:.3f} >= all {m_all:.3f}"


def check_config_fidelity():
    with tempfile.TemporaryDirectory() as tmp:
        toy_dir = Path(tmp)
        toy.write_toy_assets(toy_dir, n_samples=1)
        start = time.perf_counter()
        args = cli.build_parser().parse_args(
            ["ground", "--checkpoint", str(toy_dir / "planted.ckpt"), "--vocab", str(toy_dir / "toy.vocab"),
             "--image", "i.pgm", "--prompt", "p", "--out", tmp]
        )
        cfg = cli.run_config(args)
        model, _, _ = cli.load_assets(cfg)
        log = cli.config_log(cfg, model)
        elapsed = time.perf_counter() - start
    golden = json.loads((FIXTURES / "config_log_default.json").read_text())
    ok = log == golden and elapsed < 1.0
    diff = {k: (log.get(k), golden.get(k)) for k in set(log) | set(golden) if log.get(k) != golden.get(k)}
    return ok, f"log == golden: {not diff} {diff or ''} ({elapsed * 1000:.0f} ms)"


def check_cnr_symmetry():
    bad = 0
    n = 0
    for h, gt in _metric_instances():
        swapped = ~gt.grid
        try:
            c = cnr(h, gt)
        except UndefinedMetricError:
            continue
        n += 1
        mu_a, mu_b = float(h[gt.grid].astype(np.float64).mean()), float(h[swapped].astype(np.float64).mean())
        a = abs_cnr(h, gt)
        if cnr(h, swapped) != -c or a < c or (a == c) != (mu_a >= mu_b):
            bad += 1
    return bad == 0, f"{bad} violations over {n} defined instances"


def check_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        toy.write_toy_assets(root / "toy")
        outputs = []
        for run in ("a", "b"):
            rc = cli.main(["evaluate", "--checkpoint", str(root / "toy" / "planted.ckpt"), "--vocab",
                           str(root / "toy" / "toy.vocab"), "--manifest", str(root / "toy" / "manifest.json"),
                           "--out", str(root / run)])
            if rc != 0:
                return False, f"evaluate exited {rc}"
            outputs.append({p.name: p.read_bytes() for p in sorted((root / run).glob("*.csv"))})
    a, b = outputs
    n_rows = a.get("per_sample.csv", b"").count(b"\r\n") - 1
    return a == b and n_rows == 10, f"{sorted(a)} identical: {a == b}, {n_rows} sample rows"


CRITERIA = [
    (1, "attention rows sum to 1", check_attention_contract, 30),
    (2, "DDIM round trip", check_ddim_round_trip, 10),
    (3, "prompt-independent latents", check_prompt_independence, 10),
    (4, "metric oracles", check_metric_oracles, 60),
    (5, "Otsu exactness", check_otsu, 10),
    (6, "planted end-to-end grounding", check_planted_grounding, 300),
    (7, "configuration fidelity", check_config_fidelity, 1),
    (8, "CNR antisymmetry and |CNR| dominance", check_cnr_symmetry, 10),
    (9, "evaluate determinism", check_determinism, 120),
]


def run_criterion(num, title, fn, budget):
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    in_time = elapsed < budget
    status = "PASS" if ok and in_time else "FAIL"
    line = f"ACCEPTANCE {num} {status} {title}: {detail}; {elapsed:.1f}s (budget {budget}s)"
    return ok and in_time, line


@pytest.mark.parametrize("num,title,fn,budget", CRITERIA, ids=[f"criterion_{c[0]}" for c in CRITERIA])
def test_acceptance(num, title, fn, budget):
    from conftest import ACCEPTANCE_LINES

    ok, line = run_criterion(num, title, fn, budget)
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


if __name__ == "__main__":
    results = [run_criterion(*c) for c in CRITERIA]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
