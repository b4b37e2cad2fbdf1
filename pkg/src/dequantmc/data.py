"""Dataset ingestion and small file formats: IDX, CSV tables, PGM, sample dumps."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
SAMPLES_MAGIC = b"DQSM"


def load_mnist_idx(path):
    """Read an IDX image (n, rows, cols) or label (n,) file as uint8."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic == IDX_IMAGES:
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated image header")
        rows, cols = struct.unpack(">II", raw[8:16])
        shape, offset = (n, rows, cols), 16
    elif magic == IDX_LABELS:
        shape, offset = (n,), 8
    else:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    if body.size != int(np.prod(shape)):
        raise FormatError(f"{path}: expected {int(np.prod(shape))} bytes of data, got {body.size}")
    return body.reshape(shape).copy()


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES, *images.shape))
        fh.write(images.tobytes())


def binarize(image, tau=0.5):
    """{0,1} image; uint8 input is scaled to [0, 1] first."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img / 255.0
    return (img > tau).astype(np.int64)


def corrupt(image, p=0.1, seed=0):
    """Flip each binary pixel independently with probability p."""
    img = np.asarray(image, dtype=np.int64)
    flips = np.random.default_rng(seed).random(img.shape) < p
    return np.where(flips, 1 - img, img)


def synthetic_glyph(size=16):
    """Deterministic ring-shaped binary test image (a hand-drawn '0' stand-in)."""
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = (size - 1) / 2.0, (size - 1) / 2.0
    r = np.sqrt(((yy - cy) / 1.25) ** 2 + (xx - cx) ** 2)
    outer, inner = 0.40 * size, 0.22 * size
    return ((r <= outer) & (r >= inner)).astype(np.int64)


def to_spins(binary):
    return 2 * np.asarray(binary, dtype=np.int64) - 1


# -- CSV tables ---------------------------------------------------------------------


def load_labeled_csv(path, label="label"):
    """Header-row CSV with a label column; returns (X float, y int, feature names)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or label not in header:
            raise FormatError(f"{path}: missing header or '{label}' column")
        rows = [r for r in reader if r]
    li = header.index(label)
    names = [h for i, h in enumerate(header) if i != li]
    data = np.array([[float(v) for i, v in enumerate(r) if i != li] for r in rows]).reshape(len(rows), len(names))
    labels_raw = [r[li] for r in rows]
    classes = sorted(set(labels_raw), key=lambda s: (len(s), s))
    y = np.array([classes.index(v) for v in labels_raw], dtype=np.int64)
    return data, y, names


def standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd


def save_bvs_dataset(path, target, info):
    """CSV of features + y, plus a JSON sidecar with generation metadata."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x{j}" for j in range(target.d)] + ["y"])
        for row, yv in zip(target.X, target.y):
            wr.writerow([repr(float(v)) for v in row] + [repr(float(yv))])
    path.with_suffix(".json").write_text(json.dumps(info, indent=2, sort_keys=True))


# -- PGM ------------------------------------------------------------------------------


def write_pgm(path, image, maxval=255):
    """Binary P5 PGM; a {0,1} image maps 1 -> white."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError("PGM image must be 2-d")
    if img.max(initial=0) <= 1:
        img = img * maxval
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode())
        fh.write(img.astype(np.uint8).tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        parts.append(raw[start:pos])
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a P5 PGM")
    w, h, _ = (int(p) for p in parts[1:])
    body = np.frombuffer(raw, dtype=np.uint8, offset=pos + 1)
    if body.size != w * h:
        raise FormatError(f"{path}: pixel count mismatch")
    return body.reshape(h, w).copy()


# -- sample dumps -----------------------------------------------------------------------
# binary: magic "DQSM" | u32 version | u32 n_chains | u32 n_draws | u32 d | row-major <i4


def write_samples_csv(path, theta):
    """theta: (n_chains, n_draws, d) integer array."""
    theta = np.asarray(theta)
    n_chains, n_draws, d = theta.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["chain_id", "step"] + [f"theta_{j}" for j in range(d)])
        for c in range(n_chains):
            for s in range(n_draws):
                wr.writerow([c, s, *theta[c, s].tolist()])


def read_samples_csv(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    n_chains = int(arr[:, 0].max()) + 1
    return arr[:, 2:].reshape(n_chains, -1, arr.shape[1] - 2)


def write_samples_bin(path, theta):
    theta = np.asarray(theta)
    with open(path, "wb") as fh:
        fh.write(SAMPLES_MAGIC)
        fh.write(struct.pack("<IIII", 1, *theta.shape))
        fh.write(np.ascontiguousarray(theta, dtype="<i4").tobytes())


def read_samples_bin(path):
    raw = Path(path).read_bytes()
    if raw[:4] != SAMPLES_MAGIC:
        raise FormatError(f"{path}: bad sample-file magic")
    version, n_chains, n_draws, d = struct.unpack("<IIII", raw[4:20])
    if version != 1:
        raise FormatError(f"unsupported sample-file version {version}")
    body = np.frombuffer(raw, dtype="<i4", offset=20)
    if body.size != n_chains * n_draws * d:
        raise FormatError(f"{path}: truncated sample body")
    return body.reshape(n_chains, n_draws, d).astype(np.int64)
