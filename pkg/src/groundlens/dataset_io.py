"""Manifests, images, vocabularies, checkpoints, heatmaps and CSV reports.

File formats
------------
Manifest
    JSON, either a bare array of entries or ``{"version": 1, "entries": [...]}``
    (optionally with ``"labels": [...]`` declaring the label set). Each entry is
    ``{image, prompt, pathology, patient_id, boxes: [[x, y, w, h], ...],
    orig_size: [H, W]}``. Boxes use ``x`` = column and ``y`` = row from the
    top-left corner, with half-open extents, in original-image pixels.
    Relative image paths resolve against the manifest's directory.
Heatmap
    ``<stem>.pgm`` (8-bit preview, values quantised by ``round(255 h)``) and
    ``<stem>.f32``: 16-byte header ``b"HMAPv1\\0\\0"``, little-endian u32 H,
    u32 W, followed by ``H*W`` little-endian float32 values in row-major order.
Vocabulary
    UTF-8 lines: ``#groundlens-vocab v1``, then ``count``, ``d_ctx``, ``begin``,
    ``end``, ``pad`` as ``key<TAB>value``, then one ``subtoken<TAB>id`` line per
    entry in id order, a ``---BLOB---`` line, and the ``count x d_ctx``
    embedding table as little-endian float32.
Checkpoint
    ``#groundlens-checkpoint v1``, one line of JSON header (shapes, layer
    sizes, head counts, encoder mean/std, tensor order), ``---BLOB---``, then
    the tensors as little-endian float32 in header order.

Images are centre-cropped to a square and bilinearly resized to 512x512.
For evaluation, a 512x512 heatmap is mapped back by nearest-neighbour
upscaling onto that central square of the original frame; pixels outside the
square (cropped away on input) are zero.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .denoiser import IMAGE_SIZE, LayerSpec, ToyDenoiserModel
from .errors import FormatError, ValidationError
from .metrics import METRIC_NAMES, MetricsRecord, PathologySummary
from .numerics import as_tensor, resize_bilinear, resize_nearest
from .text import Vocabulary

MSCXR_LABELS = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Lung Opacity",
    "Pleural Effusion",
    "Pneumonia",
    "Pneumothorax",
)

BLOB_SENTINEL = b"---BLOB---\n"
HEATMAP_MAGIC = b"HMAPv1\x00\x00"
VOCAB_MAGIC = "#groundlens-vocab v1"
CKPT_MAGIC = "#groundlens-checkpoint v1"


# --------------------------------------------------------------------------- writing


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _split_blob(raw: bytes, what: str) -> tuple[str, bytes]:
    pos = raw.find(b"\n" + BLOB_SENTINEL)
    if pos < 0:
        raise FormatError(f"{what}: missing ---BLOB--- sentinel")
    try:
        head = raw[:pos].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what}: header is not UTF-8") from exc
    return head, raw[pos + 1 + len(BLOB_SENTINEL) :]


# --------------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    prompt: str
    pathology: str
    patient_id: str
    boxes: tuple[tuple[int, int, int, int], ...]
    original_size: tuple[int, int]


@dataclass(frozen=True)
class GroundingSample:
    sample_id: str
    entry: ManifestEntry
    image: np.ndarray | None = None

    @property
    def boxes(self):
        return self.entry.boxes


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _validate_entry(i: int, obj, labels) -> tuple[ManifestEntry | None, list[str]]:
    where = f"entry {i}"
    if not isinstance(obj, dict):
        return None, [f"{where}: expected an object, got {type(obj).__name__}"]
    if isinstance(obj.get("image"), str):
        where = f"entry {i} ({obj['image']})"
    problems = []
    for key, kind in (("image", str), ("prompt", str), ("pathology", str), ("patient_id", str)):
        if key not in obj:
            problems.append(f"{where}: missing field {key!r}")
        elif not isinstance(obj[key], kind):
            problems.append(f"{where}: field {key!r} must be a string")
    if "pathology" in obj and isinstance(obj["pathology"], str) and labels and obj["pathology"] not in labels:
        problems.append(f"{where}: unknown label {obj['pathology']!r}")
    size = obj.get("orig_size")
    if size is None:
        problems.append(f"{where}: missing field 'orig_size'")
    elif not (isinstance(size, list) and len(size) == 2 and all(_is_int(v) and v >= 1 for v in size)):
        problems.append(f"{where}: orig_size must be [H, W] with positive integers")
    boxes = obj.get("boxes")
    parsed = []
    if boxes is None:
        problems.append(f"{where}: missing field 'boxes'")
    elif not isinstance(boxes, list):
        problems.append(f"{where}: boxes must be a list")
    else:
        for j, box in enumerate(boxes):
            if not (isinstance(box, list) and len(box) == 4 and all(_is_int(v) for v in box)):
                problems.append(f"{where}: box {j} must be [x, y, w, h] integers")
                continue
            x, y, w, h = box
            if x < 0 or y < 0:
                problems.append(f"{where}: box {j} has negative coordinates {box}")
            if w < 1 or h < 1:
                problems.append(f"{where}: box {j} has non-positive extent {box}")
            parsed.append((x, y, w, h))
    if problems:
        return None, problems
    entry = ManifestEntry(obj["image"], obj["prompt"], obj["pathology"], obj["patient_id"], tuple(parsed), tuple(size))
    return entry, []


def load_manifest(path, labels=None) -> list[ManifestEntry]:
    """Parse and validate a manifest; every offending entry is reported at once."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(doc, dict):
        if doc.get("version") != 1:
            raise ValidationError(f"{path}: unsupported manifest version {doc.get('version')!r}")
        labels = doc.get("labels", labels)
        items = doc.get("entries")
    else:
        items = doc
    if not isinstance(items, list):
        raise ValidationError(f"{path}: manifest must hold a list of entries")
    labels = set(MSCXR_LABELS if labels is None else labels)
    entries, problems = [], []
    for i, obj in enumerate(items):
        entry, errs = _validate_entry(i, obj, labels)
        problems.extend(errs)
        if entry is not None:
            image = entry.image_path
            if not os.path.isabs(image):
                image = str((path.parent / image).resolve())
            entries.append(replace(entry, image_path=image))
    if problems:
        raise ValidationError(f"{path}: {len(problems)} problem(s):\n  " + "\n  ".join(problems))
    return entries


def manifest_json(entries, labels=None) -> str:
    doc = {
        "version": 1,
        "entries": [
            {
                "image": e.image_path,
                "prompt": e.prompt,
                "pathology": e.pathology,
                "patient_id": e.patient_id,
                "boxes": [list(b) for b in e.boxes],
                "orig_size": list(e.original_size),
            }
            for e in entries
        ],
    }
    if labels is not None:
        doc["labels"] = list(labels)
    return json.dumps(doc, indent=1) + "\n"


def merge_samples(entries) -> list[GroundingSample]:
    """One sample per ``(patient_id, prompt)``, boxes concatenated, first-seen order."""
    groups: dict[tuple[str, str], list[ManifestEntry]] = {}
    for e in entries:
        groups.setdefault((e.patient_id, e.prompt), []).append(e)
    samples = []
    for n, ((pid, _), group) in enumerate(groups.items()):
        first = group[0]
        for other in group[1:]:
            if other.image_path != first.image_path:
                raise ValidationError(
                    f"patient {pid!r}, prompt {first.prompt!r}: conflicting images "
                    f"{first.image_path!r} and {other.image_path!r}"
                )
        boxes = tuple(b for e in group for b in e.boxes)
        merged = ManifestEntry(first.image_path, first.prompt, first.pathology, pid, boxes, first.original_size)
        samples.append(GroundingSample(f"{n:05d}_{pid}", merged))
    return samples


# --------------------------------------------------------------------------- images


def read_gray(path) -> np.ndarray:
    """8-bit grayscale PGM (P5) or PNG as a uint8 array."""
    try:
        with Image.open(path) as im:
            fmt, mode = im.format, im.mode
            if fmt not in ("PPM", "PNG") or mode != "L":
                raise FormatError(f"{path}: need 8-bit grayscale PGM/PNG, got {fmt} {mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    return arr


def center_square(height: int, width: int) -> tuple[int, int, int]:
    """``(top, left, side)`` of the centred square crop."""
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side


def load_image(path) -> tuple[np.ndarray, tuple[int, int]]:
    """Image in [0, 1] at 512x512, plus its original ``(H, W)``."""
    raw = read_gray(path)
    h, w = raw.shape
    img = raw.astype(np.float32) / np.float32(255.0)
    top, left, side = center_square(h, w)
    img = img[top : top + side, left : left + side]
    return resize_bilinear(img, IMAGE_SIZE, IMAGE_SIZE), (h, w)


def heatmap_to_original(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour upscale onto the central square, zero elsewhere."""
    top, left, side = center_square(height, width)
    out = np.zeros((height, width), dtype=np.float32)
    out[top : top + side, left : left + side] = resize_nearest(grid, side, side)
    return out


def encode_pgm(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def write_pgm(path, arr: np.ndarray) -> None:
    atomic_write(path, encode_pgm(arr))


# --------------------------------------------------------------------------- heatmaps


def quantize(grid: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_f32(grid: np.ndarray) -> bytes:
    grid = as_tensor(grid)
    h, w = grid.shape
    return HEATMAP_MAGIC + struct.pack("<II", h, w) + grid.astype("<f4").tobytes()


def decode_f32(raw: bytes) -> np.ndarray:
    if len(raw) < 16 or raw[:8] != HEATMAP_MAGIC:
        raise FormatError("heatmap sidecar: bad magic")
    h, w = struct.unpack("<II", raw[8:16])
    if len(raw) != 16 + 4 * h * w:
        raise FormatError(f"heatmap sidecar: expected {16 + 4 * h * w} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def save_heatmap(stem, grid: np.ndarray) -> tuple[Path, Path]:
    stem = Path(stem)
    pgm, f32 = stem.with_name(stem.name + ".pgm"), stem.with_name(stem.name + ".f32")
    write_pgm(pgm, quantize(grid))
    atomic_write(f32, encode_f32(grid))
    return pgm, f32


def load_heatmap(path) -> np.ndarray:
    return decode_f32(Path(path).read_bytes())


# --------------------------------------------------------------------------- vocabulary


def encode_vocab(vocab: Vocabulary) -> bytes:
    lines = [
        VOCAB_MAGIC,
        f"count\t{vocab.size}",
        f"d_ctx\t{vocab.dim}",
        f"begin\t{vocab.begin_id}",
        f"end\t{vocab.end_id}",
        f"pad\t{vocab.pad_id}",
    ]
    for i, tok in enumerate(vocab.tokens):
        if not tok or any(c in tok for c in "\t\n\r"):
            raise FormatError(f"sub-token {tok!r} cannot be stored")
        lines.append(f"{tok}\t{i}")
    head = ("\n".join(lines) + "\n").encode("utf-8")
    return head + BLOB_SENTINEL + vocab.embedding_table.astype("<f4").tobytes()


def decode_vocab(raw: bytes) -> Vocabulary:
    head, blob = _split_blob(raw, "vocabulary")
    lines = head.split("\n")
    if not lines or lines[0] != VOCAB_MAGIC:
        raise FormatError("vocabulary: bad magic line")
    meta = {}
    for line, key in zip(lines[1:6], ("count", "d_ctx", "begin", "end", "pad")):
        k, _, v = line.partition("\t")
        if k != key or not v.isdigit():
            raise FormatError(f"vocabulary: expected header field {key!r}, got {line!r}")
        meta[key] = int(v)
    body = lines[6:]
    if len(body) != meta["count"]:
        raise FormatError(f"vocabulary: header declares {meta['count']} entries, found {len(body)}")
    tokens = []
    for i, line in enumerate(body):
        tok, sep, idx = line.rpartition("\t")
        if not sep or not idx.isdigit() or int(idx) != i:
            raise FormatError(f"vocabulary: entry line {i} malformed or ids not dense: {line!r}")
        tokens.append(tok)
    need = 4 * meta["count"] * meta["d_ctx"]
    if len(blob) != need:
        raise FormatError(f"vocabulary: embedding blob has {len(blob)} bytes, expected {need}")
    table = np.frombuffer(blob, dtype="<f4").reshape(meta["count"], meta["d_ctx"]).astype(np.float32)
    return Vocabulary(tuple(tokens), meta["begin"], meta["end"], meta["pad"], table)


def save_vocab(path, vocab: Vocabulary) -> None:
    atomic_write(path, encode_vocab(vocab))


def load_vocab(path) -> Vocabulary:
    return decode_vocab(Path(path).read_bytes())


# --------------------------------------------------------------------------- checkpoint


def encode_checkpoint(model: ToyDenoiserModel) -> bytes:
    items = model.weight_items()
    header = {
        "latent_channels": model.latent_channels,
        "latent_size": model.latent_size,
        "d_model": model.d_model,
        "d_attn": model.d_attn,
        "d_ctx": model.d_ctx,
        "n_layers": model.n_layers,
        "sizes": list(model.sizes),
        "heads": [layer.heads for layer in model.layers],
        "enc_mean": list(model.enc_mean),
        "enc_std": list(model.enc_std),
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in items],
    }
    head = (CKPT_MAGIC + "\n" + json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")
    blob = b"".join(np.asarray(arr, dtype="<f4").tobytes() for _, arr in items)
    return head + BLOB_SENTINEL + blob


def decode_checkpoint(raw: bytes) -> ToyDenoiserModel:
    head, blob = _split_blob(raw, "checkpoint")
    lines = head.split("\n")
    if len(lines) != 2 or lines[0] != CKPT_MAGIC:
        raise FormatError("checkpoint: bad magic or header layout")
    try:
        hdr = json.loads(lines[1])
        specs = [(t["name"], tuple(int(d) for d in t["shape"])) for t in hdr["tensors"]]
        n_layers = int(hdr["n_layers"])
        sizes, heads = hdr["sizes"], hdr["heads"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint: malformed header ({exc})") from exc
    if len(sizes) != n_layers or len(heads) != n_layers:
        raise FormatError("checkpoint: sizes/heads do not match n_layers")
    need = sum(4 * math.prod(shape) for _, shape in specs)
    if len(blob) != need:
        raise FormatError(f"checkpoint: weight blob has {len(blob)} bytes, header declares {need}")
    tensors, off = {}, 0
    for name, shape in specs:
        n = math.prod(shape)
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    expected = list(ToyDenoiserModel.GLOBAL_WEIGHTS) + [
        f"layer{i}.{w}" for i in range(1, n_layers + 1) for w in LayerSpec.WEIGHTS
    ]
    if [name for name, _ in specs] != expected:
        raise FormatError("checkpoint: tensor list does not match the declared architecture")
    layers = tuple(
        LayerSpec(int(sizes[i - 1]), int(heads[i - 1]), *[tensors[f"layer{i}.{w}"] for w in LayerSpec.WEIGHTS])
        for i in range(1, n_layers + 1)
    )
    return ToyDenoiserModel(
        int(hdr["latent_channels"]),
        int(hdr["latent_size"]),
        tuple(float(v) for v in hdr["enc_mean"]),
        tuple(float(v) for v in hdr["enc_std"]),
        *[tensors[name] for name in ToyDenoiserModel.GLOBAL_WEIGHTS],
        layers,
    )


def save_checkpoint(path, model: ToyDenoiserModel) -> None:
    atomic_write(path, encode_checkpoint(model))


def load_checkpoint(path) -> ToyDenoiserModel:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------- reports


def format_float(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


RECORD_HEADER = ("id", "label", "miou", "auc_roc", "cnr", "abs_cnr", "flags")


def records_csv(records: list[MetricsRecord]) -> bytes:
    rows = [RECORD_HEADER]
    for r in sorted(records, key=lambda r: r.sample_id):
        rows.append((r.sample_id, r.label, *[format_float(getattr(r, m)) for m in METRIC_NAMES], ";".join(r.flags)))
    return csv_bytes(rows)


SUMMARY_HEADER = ("label", "n", "excluded") + tuple(
    f"{m}_{stat}" for m in METRIC_NAMES for stat in ("mean", "std")
)


def summary_csv(summaries: list[PathologySummary]) -> bytes:
    rows = [SUMMARY_HEADER]
    for s in summaries:
        vals = [format_float(v) for m in METRIC_NAMES for v in (s.mean[m], s.std[m])]
        rows.append((s.label, s.n, s.excluded, *vals))
    return csv_bytes(rows)


def save_report(path, records: list[MetricsRecord]) -> None:
    atomic_write(path, records_csv(records))


def save_summary(path, summaries: list[PathologySummary]) -> None:
    atomic_write(path, summary_csv(summaries))
