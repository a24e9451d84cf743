"""8-bit binary PGM (P5) images and the on-disk dataset layout.

A dataset directory holds images/NNNNN.pgm plus a labels.jsonl whose lines
carry {"id", "file", "expression", "pose", "gt_region": [x, y, l]}. Pixel
values are quantized to 8 bits on save; loading returns floats in [0, 1].
"""

import json
import os

import numpy as np

from .attention import Region
from .errors import DatasetError
from .synthdata import Sample


def save_pgm(path, image):
    """image: (H, W) floats in [0, 1], written as maxval-255 binary PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DatasetError(f"PGM wants a 2-D image, got shape {image.shape}")
    quant = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = quant.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quant.tobytes())


def load_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with optional #-comment lines
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DatasetError(f"{path}: bad PGM header fields {tokens}")
    if maxval != 255:
        raise DatasetError(f"{path}: expected maxval 255, got {maxval}")
    data = blob[pos:pos + w * h]
    if len(data) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixels, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0


def save_dataset(samples, out_dir):
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        fname = f"images/{i:05d}.pgm"
        save_pgm(os.path.join(out_dir, fname), s.image[0, 0])
        lines.append(json.dumps({
            "id": s.id, "file": fname, "expression": s.y_e, "pose": s.y_p,
            "gt_region": [s.gt_region.x, s.gt_region.y, s.gt_region.l],
        }))
    with open(os.path.join(out_dir, "labels.jsonl"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(in_dir):
    labels_path = os.path.join(in_dir, "labels.jsonl")
    if not os.path.exists(labels_path):
        raise DatasetError(f"{labels_path}: no labels.jsonl in dataset directory")
    samples = []
    with open(labels_path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                region = Region(*(float(v) for v in row["gt_region"]))
                samples.append(Sample(
                    image=load_pgm(os.path.join(in_dir, row["file"]))[None, None],
                    y_e=int(row["expression"]), y_p=int(row["pose"]),
                    gt_region=region, id=str(row["id"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(
                    f"{labels_path}:{lineno}: bad label line ({exc})")
    return samples
