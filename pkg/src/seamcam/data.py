"""Synthetic multi-label shapes dataset and its on-disk formats.

Each sample is a square RGB image containing 1-3 non-overlapping shapes
of distinct classes over a solid background, plus a pixel-exact class
mask. Shapes carry a class-specific texture (stripes, solid, dots) so a
single pixel never identifies the class, forcing spatially extended
activation maps.

Files: binary PPM (P6) images, binary PGM (P5) masks whose gray levels
are class ids, a ``labels.csv`` with multi-hot rows, and a
``manifest.txt`` tying the set together. Everything is deterministic for
a given seed, byte for byte.
"""

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError, ParseError

CLASS_NAMES = ("circle", "triangle", "square")
MANIFEST_VERSION = 1

# per-class fill texture; a lone pixel cannot identify the class
_TEXTURES = {0: "stripes", 1: "solid", 2: "dots"}


@dataclass
class ImageSample:
    id: str
    image: np.ndarray          # [3,H,W] float64 in [0,1]
    label: np.ndarray          # multi-hot over foreground classes
    gt_mask: np.ndarray = None  # [H,W] int64, 0 = background


@dataclass
class DatasetManifest:
    version: int
    size: int
    class_names: tuple
    count: int
    seed: int
    sample_ids: list

    def paths(self, root, sample_id):
        return (os.path.join(root, "images", f"{sample_id}.ppm"),
                os.path.join(root, "masks", f"{sample_id}.pgm"))


# ---------------------------------------------------------------------------
# PPM / PGM

def _write_pnm(path, magic, arr):
    h, w = arr.shape[:2]
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fp:
        fp.write(header)
        fp.write(arr.astype(np.uint8).tobytes())


def write_ppm(path, rgb):
    """rgb: [H,W,3] uint8."""
    _write_pnm(path, "P6", rgb)


def write_pgm(path, gray):
    """gray: [H,W] uint8."""
    _write_pnm(path, "P5", gray)


def _read_pnm(path, magic, channels):
    with open(path, "rb") as fp:
        data = fp.read()
    stream = io.BytesIO(data)

    def token():
        # skip whitespace and '#' comments, track offset for errors
        out = b""
        while True:
            ch = stream.read(1)
            if not ch:
                raise ParseError(f"{path}: truncated header at byte {stream.tell()}")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = stream.read(1)
                continue
            if ch.isspace():
                if out:
                    return out
                continue
            out += ch

    got_magic = token()
    if got_magic != magic.encode("ascii"):
        raise ParseError(f"{path}: expected {magic} at byte 0, got {got_magic!r}")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise ParseError(f"{path}: non-numeric header field at byte {stream.tell()}")
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    payload = stream.read()
    expected = w * h * channels
    if len(payload) < expected:
        raise ParseError(
            f"{path}: truncated payload at byte {stream.tell() + len(payload)}; "
            f"expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload[:expected], dtype=np.uint8)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return arr.reshape(shape).copy()


def read_ppm(path):
    return _read_pnm(path, "P6", 3)


def read_pgm(path):
    return _read_pnm(path, "P5", 1)


# ---------------------------------------------------------------------------
# generation

def _pick_color(rng, avoid, min_dist=60):
    """Random uint8 color at L1 distance >= min_dist from every avoid color."""
    while True:
        color = rng.integers(0, 256, size=3)
        if all(np.abs(color - np.asarray(a)).sum() >= min_dist for a in avoid):
            return color


def _shape_mask(kind, size, cy, cx, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:  # circle
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    if kind == 1:  # upright triangle
        top = cy - radius
        half = (yy - top) / 2.0
        inside = (yy >= top) & (yy <= cy + radius)
        return inside & (np.abs(xx - cx) <= half)
    # axis-aligned square
    return (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)


def _texture(rng, kind, mask, primary, secondary, size):
    """Fill pixels of ``mask`` with the class texture; returns [H,W,3] u8 patch."""
    yy, xx = np.mgrid[0:size, 0:size]
    patch = np.zeros((size, size, 3), dtype=np.uint8)
    patch[mask] = primary
    tex = _TEXTURES[kind]
    if tex == "stripes":
        along = rng.integers(2)  # horizontal or diagonal bands
        bands = (yy // 3 if along == 0 else (yy + xx) // 3) % 2 == 0
        patch[mask & bands] = secondary
    elif tex == "dots":
        dots = (yy % 4 < 2) & (xx % 4 < 2)
        patch[mask & dots] = secondary
    return patch


def generate_dataset(n, size, seed, out_dir, classes=CLASS_NAMES):
    """Write ``n`` samples under ``out_dir``; returns the manifest.

    Deterministic per seed. Shapes never touch the image border and
    never overlap; the multi-hot label is derived from the final mask,
    so label support always equals the mask's class set.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if size < 32:
        raise ParameterError(f"size must be >= 32, got {size}")
    if tuple(classes) != CLASS_NAMES:
        raise ParameterError(f"supported classes are {CLASS_NAMES}, got {tuple(classes)}")
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out_dir}: {exc}")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 17])))
    num_classes = len(classes)
    sample_ids = []
    label_rows = []
    for i in range(n):
        sample_id = f"sample_{i:05d}"
        background = rng.integers(0, 256, size=3)
        image = np.ones((size, size, 3), dtype=np.uint8) * background.astype(np.uint8)
        mask = np.zeros((size, size), dtype=np.uint8)
        occupied = np.zeros((size, size), dtype=bool)
        k = int(rng.integers(1, num_classes + 1))
        chosen = rng.choice(num_classes, size=k, replace=False)
        for kind in chosen:
            primary = _pick_color(rng, [background])
            secondary = _pick_color(rng, [primary, background])
            for _ in range(50):  # rejection sampling for a free spot
                radius = int(rng.integers(6, min(15, size // 4)))
                margin = radius + 2
                cy = int(rng.integers(margin, size - margin))
                cx = int(rng.integers(margin, size - margin))
                shape = _shape_mask(kind, size, cy, cx, radius)
                if not (shape & occupied).any():
                    break
            else:
                continue  # no room; label comes from the mask, so stays consistent
            occupied |= shape
            mask[shape] = kind + 1
            patch = _texture(rng, kind, shape, primary, secondary, size)
            image[shape] = patch[shape]
        label = np.array([(mask == c + 1).any() for c in range(num_classes)],
                         dtype=np.int64)
        img_path, mask_path = DatasetManifest(
            MANIFEST_VERSION, size, tuple(classes), n, seed, []).paths(out_dir, sample_id)
        write_ppm(img_path, image)
        write_pgm(mask_path, mask)
        sample_ids.append(sample_id)
        label_rows.append([sample_id] + label.tolist())

    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["id"] + list(classes))
        writer.writerows(label_rows)

    manifest = DatasetManifest(MANIFEST_VERSION, size, tuple(classes), n, seed,
                               sample_ids)
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    return manifest


def write_manifest(path, manifest):
    lines = [
        f"version={manifest.version}",
        f"size={manifest.size}",
        "classes=" + ",".join(manifest.class_names),
        f"count={manifest.count}",
        f"seed={manifest.seed}",
    ] + [f"sample {sid}" for sid in manifest.sample_ids]
    with open(path, "w") as fp:
        fp.write("\n".join(lines) + "\n")


def read_manifest(path):
    kv = {}
    sample_ids = []
    try:
        with open(path) as fp:
            for lineno, raw in enumerate(fp, 1):
                line = raw.strip()
                if not line:
                    continue
                if line.startswith("sample "):
                    sample_ids.append(line.split(" ", 1)[1])
                elif "=" in line:
                    key, _, value = line.partition("=")
                    kv[key] = value
                else:
                    raise ParseError(f"{path}:{lineno}: unrecognized line {line!r}")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}")
    try:
        manifest = DatasetManifest(
            version=int(kv["version"]), size=int(kv["size"]),
            class_names=tuple(kv["classes"].split(",")),
            count=int(kv["count"]), seed=int(kv["seed"]), sample_ids=sample_ids)
    except KeyError as exc:
        raise ParseError(f"{path}: missing manifest key {exc}")
    if manifest.count != len(sample_ids):
        raise ParseError(
            f"{path}: count={manifest.count} but {len(sample_ids)} sample lines")
    return manifest


def validate_dataset(root):
    """Check that every referenced file exists; returns the manifest."""
    manifest = read_manifest(os.path.join(root, "manifest.txt"))
    missing = []
    for sid in manifest.sample_ids:
        img_path, mask_path = manifest.paths(root, sid)
        if not os.path.exists(img_path) or not os.path.exists(mask_path):
            missing.append(sid)
    if missing:
        raise DataError(f"dataset {root} is missing files for: {', '.join(missing)}")
    return manifest


def _read_labels(root, class_names):
    path = os.path.join(root, "labels.csv")
    labels = {}
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader)
        if header[1:] != list(class_names):
            raise ParseError(f"{path}: label columns {header[1:]} != {list(class_names)}")
        for row in reader:
            labels[row[0]] = np.array([int(v) for v in row[1:]], dtype=np.int64)
    return labels


def save_sample(sample, root):
    """Write one sample's image and mask under ``root`` (images/, masks/)."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    rgb = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
    write_ppm(os.path.join(root, "images", f"{sample.id}.ppm"),
              rgb.transpose(1, 2, 0))
    if sample.gt_mask is not None:
        write_pgm(os.path.join(root, "masks", f"{sample.id}.pgm"),
                  sample.gt_mask.astype(np.uint8))


def load_sample(root, sample_id, label=None):
    """Read one sample; image round-trips within 1/255 quantization."""
    img = read_ppm(os.path.join(root, "images", f"{sample_id}.ppm"))
    mask_path = os.path.join(root, "masks", f"{sample_id}.pgm")
    mask = read_pgm(mask_path).astype(np.int64) if os.path.exists(mask_path) else None
    image = img.astype(np.float64).transpose(2, 0, 1) / 255.0
    if label is None and mask is not None:
        label = np.array([(mask == c + 1).any() for c in range(len(CLASS_NAMES))],
                         dtype=np.int64)
    return ImageSample(id=sample_id, image=image, label=label, gt_mask=mask)


def load_dataset(root):
    """All samples in manifest order; raises DataError on missing files."""
    manifest = validate_dataset(root)
    labels = _read_labels(root, manifest.class_names)
    samples = []
    for sid in manifest.sample_ids:
        if sid not in labels:
            raise DataError(f"labels.csv is missing id {sid}")
        samples.append(load_sample(root, sid, label=labels[sid]))
    return manifest, samples
