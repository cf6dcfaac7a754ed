"""Deterministic toy assets: vocabulary, planted-alignment checkpoint, images.

The planted checkpoint makes grounding verifiable end to end. Two visual
feature channels are reserved and never written by any layer: channel 0
carries standardised latent brightness, channel 1 is a constant. Every
vocabulary row carries a *salience* coordinate (large for pathology
sub-tokens, smaller for other words, zero for specials) and a *bias*
coordinate (large for the begin token, which acts as an attention sink).
In the middle layers (3-8) queries read brightness and keys read salience,
so every real token attends to bright regions; outer layers use random
projections. A fixed random positional field feeds the noise prediction, so
the inverted latent drifts away from the image as ``t`` grows.
"""

from __future__ import annotations

import string

import numpy as np

from .dataset_io import ManifestEntry, save_checkpoint, save_vocab, write_pgm, manifest_json, atomic_write
from .denoiser import DEFAULT_SIZES, LayerSpec, ToyDenoiserModel
from .text import BEGIN_TOKEN, END_TOKEN, EOW, PAD_TOKEN, Vocabulary

D_CTX = 16
D_MODEL = 16
D_ATTN = 16
LATENT_CHANNELS = 4
LATENT_SIZE = 32
PLANTED_LAYERS = (3, 4, 5, 6, 7, 8)

ALPHABET = string.ascii_lowercase + string.digits + ".,;:-'/()%"

WORDS = """
a an and are at base basal basilar bibasilar bilateral both chest compared diffuse
enlarged focal heart hemithorax in increased is large left likely lobe lower lung
lungs mid middle mild moderate new of on or patchy pleural possible pulmonary
right severe size small stable the there upper with without zone apex apical
retrocardiac lingula worsening improved pneumonia
""".split()

# pathology names the toy vocabulary only knows as sub-token pieces
PATHOLOGY_PIECES = {
    "atelectasis": ("atel", "ect", "asis" + EOW),
    "cardiomegaly": ("cardio", "meg", "aly" + EOW),
    "consolidation": ("consol", "idation" + EOW),
    "edema": ("ede", "ma" + EOW),
    "effusion": ("eff", "usion" + EOW),
    "opacity": ("opac", "ity" + EOW),
    "pneumothorax": ("pneumo", "thorax" + EOW),
}


def vocab_tokens() -> list[str]:
    tokens = [BEGIN_TOKEN, END_TOKEN, PAD_TOKEN]
    for c in ALPHABET:
        tokens += [c, c + EOW]
    tokens += [w + EOW for w in WORDS]
    tokens += [p for pieces in PATHOLOGY_PIECES.values() for p in pieces]
    # drop repeats, keeping first occurrence
    return list(dict.fromkeys(tokens))


def build_vocab(seed: int = 0, dim: int = D_CTX) -> Vocabulary:
    rng = np.random.default_rng(seed)
    tokens = vocab_tokens()
    pathology = {p for pieces in PATHOLOGY_PIECES.values() for p in pieces} | {"pneumonia" + EOW}
    table = np.zeros((len(tokens), dim), dtype=np.float32)
    for i, tok in enumerate(tokens):
        if tok == BEGIN_TOKEN:
            table[i, 1] = 1.0
        elif tok == END_TOKEN:
            table[i, 1] = 0.2
        elif tok == PAD_TOKEN:
            table[i, 1] = -0.5
        else:
            table[i, 0] = 1.0 if tok in pathology else rng.uniform(0.3, 0.5)
        if tok != PAD_TOKEN:
            table[i, 2:] = rng.normal(0.0, 0.3, dim - 2)
    return Vocabulary(tuple(tokens), 0, 1, 2, table)


def build_model(seed: int = 0, planted: bool = True, sizes=DEFAULT_SIZES, latent_size: int = LATENT_SIZE) -> ToyDenoiserModel:
    """Toy denoiser; ``planted=False`` gives purely random projections everywhere."""
    rng = np.random.default_rng(seed + 1)
    c, dm, da, dc = LATENT_CHANNELS, D_MODEL, D_ATTN, D_CTX

    def rnd(*shape, scale=1.0):
        return rng.normal(0.0, scale, shape).astype(np.float32)

    w_in = rnd(c, dm, scale=0.3)
    w_in[:, 0] = 1.0 / c
    w_in[:, 1] = 0.0
    b_in = np.zeros(dm, dtype=np.float32)
    b_in[1] = 1.0
    pos = rnd(latent_size * latent_size, dm, scale=0.6)
    pos[:, :2] = 0.0
    w_time = rnd(dm, dm, scale=0.3)
    w_time[:, :2] = 0.0
    w_out = rnd(dm, c, scale=0.4)
    w_out[0, :] = 0.3
    w_out[1, :] = 0.0

    layers = []
    for i, size in enumerate(sizes, start=1):
        mix = rnd(dm, dm, scale=0.1)
        out = rnd(da, dm, scale=0.1)
        value = rnd(dc, da, scale=0.5)
        if planted:
            # reserved channels pass through untouched
            mix[:, :2] = 0.0
            out[:, :2] = 0.0
        if planted and i in PLANTED_LAYERS:
            query = rnd(dm, da, scale=0.05)
            query[0, :] = 0.0
            query[1, :] = 0.0
            query[0, 0] = 6.0
            query[1, 1] = 4.0
            key = rnd(dc, da, scale=0.05)
            key[0, :] = 0.0
            key[1, :] = 0.0
            key[0, 0] = 1.0
            key[1, 1] = 4.0
            heads = 1
        else:
            query = rnd(dm, da, scale=1.0)
            key = rnd(dc, da, scale=1.0)
            heads = 2
        layers.append(LayerSpec(int(size), heads, mix, query, key, value, out))
    return ToyDenoiserModel(
        c,
        latent_size,
        (0.5, 0.45, 0.55, 0.5),
        (0.25, 0.3, 0.2, 0.25),
        w_in,
        b_in,
        pos,
        w_time,
        w_out,
        tuple(layers),
    )


def synthetic_image(height: int, width: int, boxes, seed: int = 0, background: float = 0.2, foreground: float = 0.8) -> np.ndarray:
    """uint8 image: textured dark background with bright rectangles at ``boxes``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = background + 0.05 * np.sin(xx / 23.0 + rng.uniform(0, 6)) * np.cos(yy / 31.0 + rng.uniform(0, 6))
    img += rng.normal(0.0, 0.03, (height, width))
    for x, y, w, h in boxes:
        img[y : y + h, x : x + w] = foreground + rng.normal(0.0, 0.03, (min(h, height - y), min(w, width - x)))
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


PLANTED_BOX = (160, 192, 192, 160)  # x, y, w, h in a 512x512 frame

TOY_SAMPLES = [
    # image key, (H, W), boxes, prompt, pathology, patient
    ("img00", (512, 512), [PLANTED_BOX], "small right pneumothorax", "Pneumothorax", "p00"),
    ("img01", (512, 512), [(64, 256, 160, 192)], "left lower lobe consolidation", "Consolidation", "p01"),
    ("img02", (512, 512), [(96, 96, 128, 128), (320, 96, 128, 128)], "bilateral patchy opacity", "Lung Opacity", "p02"),
    ("img03", (640, 512), [(288, 320, 192, 160)], "moderate right pleural effusion", "Pleural Effusion", "p03"),
    ("img04", (512, 640), [(224, 128, 224, 256)], "heart size is enlarged with cardiomegaly", "Cardiomegaly", "p04"),
    ("img05", (512, 512), [(320, 256, 128, 192)], "right lower lobe pneumonia", "Pneumonia", "p05"),
    ("img06", (512, 512), [(64, 320, 192, 128)], "left basilar atelectasis", "Atelectasis", "p06"),
    ("img07", (512, 512), [(128, 128, 256, 256)], "mild pulmonary edema", "Edema", "p07"),
    ("img08", (512, 512), [(320, 128, 128, 160)], "right upper lobe opacity", "Lung Opacity", "p08"),
    ("img09", (384, 384), [(48, 72, 120, 144)], "left apical pneumothorax", "Pneumothorax", "p09"),
]


def toy_entries(image_dir: str = "images") -> list[ManifestEntry]:
    return [
        ManifestEntry(f"{image_dir}/{key}.pgm", prompt, label, pid, tuple(tuple(b) for b in boxes), size)
        for key, size, boxes, prompt, label, pid in TOY_SAMPLES
    ]


def write_toy_assets(out_dir, seed: int = 0, n_samples: int | None = None) -> dict:
    """Write vocab, planted checkpoint, images and a manifest under ``out_dir``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_vocab(out / "toy.vocab", build_vocab(seed))
    save_checkpoint(out / "planted.ckpt", build_model(seed))
    samples = TOY_SAMPLES if n_samples is None else TOY_SAMPLES[:n_samples]
    for i, (key, (h, w), boxes, *_rest) in enumerate(samples):
        write_pgm(out / "images" / f"{key}.pgm", synthetic_image(h, w, boxes, seed=seed + i))
    entries = toy_entries()[: len(samples)]
    atomic_write(out / "manifest.json", manifest_json(entries).encode("utf-8"))
    return {
        "vocab": out / "toy.vocab",
        "checkpoint": out / "planted.ckpt",
        "manifest": out / "manifest.json",
        "images": out / "images",
    }
