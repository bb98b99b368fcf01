"""Datasets on disk and synthetic data.

Directory layout::

    images/<id>.ppm | images/<id>.png   RGB, 8 bit
    labels/<id>.txt                     one "class cx cy w h" line per box
    split.txt                           [train] / [val] / [test] id lists

Detections interchange: one ``image_id class score cx cy w h`` record per line.
Images are read as float64 (3, H, W) arrays in [0, 1].
"""
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, Detection
from .rng import make_rng

DEFAULT_PROPORTIONS = (5000, 1000, 500)
IMAGE_EXTS = (".ppm", ".png", ".jpg", ".jpeg")


class LabelFormatError(ValueError):
    def __init__(self, line_no, msg):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


@dataclass
class LabeledImage:
    image_id: str
    image: np.ndarray
    boxes: list = field(default_factory=list)


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int = 0


# ---------------------------------------------------------------- labels

def parse_labels(text):
    boxes = []
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise LabelFormatError(n, f"expected 5 fields 'class cx cy w h', got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise LabelFormatError(n, f"unparseable values in {line.strip()!r}") from None
        if cls < 0:
            raise LabelFormatError(n, f"negative class id {cls}")
        if not (0 <= cx <= 1 and 0 <= cy <= 1):
            raise LabelFormatError(n, f"center ({cx}, {cy}) outside [0, 1]")
        if not (0 < w <= 1 and 0 < h <= 1):
            raise LabelFormatError(n, f"extent ({w}, {h}) outside (0, 1]")
        boxes.append(BBox(cx, cy, w, h, cls))
    return boxes


def serialize_labels(boxes):
    return "".join(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b in boxes)


def read_label_dir(labels_dir):
    """``{image_id: [BBox]}`` for every ``*.txt`` in ``labels_dir``, sorted by id."""
    out = {}
    for name in sorted(os.listdir(labels_dir)):
        if not name.endswith(".txt"):
            continue
        path = os.path.join(labels_dir, name)
        with open(path) as fh:
            try:
                out[name[:-4]] = parse_labels(fh.read())
            except LabelFormatError as e:
                raise LabelFormatError(e.line_no, f"{path}: {e}") from None
    return out


def write_detections(path, detections):
    with open(path, "w") as fh:
        for d in detections:
            b = d.bbox
            fh.write(f"{d.image_id} {b.class_id} {d.score:.6f} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n")


def read_detections(path):
    dets = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise LabelFormatError(n, "expected 'image_id class score cx cy w h'")
            try:
                box = BBox(*(float(p) for p in parts[3:]), int(parts[1]))
                dets.append(Detection(box, float(parts[2]), parts[0]))
            except ValueError as e:
                raise LabelFormatError(n, str(e)) from None
    return dets


# ---------------------------------------------------------------- images

def _read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pix.reshape(h, w, 3)


def _write_ppm(path, hwc):
    h, w, _ = hwc.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(hwc, dtype=np.uint8).tobytes())


def load_image(path, size=None):
    """Read an RGB image as a (3, H, W) float array; ``size=(H, W)`` resizes (bilinear)."""
    ext = os.path.splitext(path)[1].lower()
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if ext == ".ppm" and size is None:
        hwc = _read_ppm(path)
    else:
        from PIL import Image
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                if size is not None:
                    im = im.resize((int(size[1]), int(size[0])), Image.BILINEAR)
                hwc = np.asarray(im, dtype=np.uint8)
        except OSError as e:
            raise ValueError(f"{path}: unreadable image ({e})") from None
    return hwc.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_image(image, path):
    """Write a (3, H, W) array in [0, 1] as 8-bit PPM or PNG (by extension)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {image.shape}")
    hwc = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        _write_ppm(path, hwc)
    elif ext == ".png":
        from PIL import Image
        Image.fromarray(hwc, "RGB").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image extension {ext!r} (use .ppm or .png)")


def find_image(images_dir, image_id):
    for ext in IMAGE_EXTS:
        p = os.path.join(images_dir, image_id + ext)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"no image for id {image_id!r} in {images_dir}")


# ---------------------------------------------------------------- splits

def _allocate(n, proportions):
    props = np.asarray(proportions, dtype=np.float64)
    quotas = n * props / props.sum()
    sizes = np.floor(quotas).astype(int)
    # largest remainder, earlier parts win ties
    for i in sorted(range(len(sizes)), key=lambda i: -(quotas[i] - sizes[i]))[: n - sizes.sum()]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            sizes[int(np.argmax(sizes))] -= 1
            sizes[i] = 1
    return sizes


def split_dataset(ids, proportions=DEFAULT_PROPORTIONS, seed=0):
    """Seeded shuffle, then partition into train/val/test by ``proportions``."""
    ids = list(ids)
    if len(proportions) != 3 or any(p <= 0 for p in proportions):
        raise ValueError("proportions must be three positive numbers")
    if len(ids) < 3:
        raise ValueError(f"need at least 3 ids to split three ways, got {len(ids)}")
    order = make_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b, _ = _allocate(len(ids), proportions)
    return DatasetSplit(shuffled[:a], shuffled[a:a + b], shuffled[a + b:], seed)


def write_split(path, split):
    with open(path, "w") as fh:
        fh.write(f"# seed {split.seed}\n")
        for name in ("train", "val", "test"):
            fh.write(f"[{name}]\n")
            for i in getattr(split, name):
                fh.write(f"{i}\n")


def read_split(path):
    parts, current, seed = {"train": [], "val": [], "test": []}, None, 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# seed"):
                seed = int(line.split()[-1])
            elif line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in parts:
                    raise ValueError(f"{path}: unknown split section {current!r}")
            elif line:
                if current is None:
                    raise ValueError(f"{path}: id {line!r} outside any section")
                parts[current].append(line)
    return DatasetSplit(parts["train"], parts["val"], parts["test"], seed)


# ---------------------------------------------------------------- synthetic

@dataclass
class SceneConfig:
    height: int = 500
    width: int = 500
    birds: tuple = (1, 6)           # inclusive count range
    size: tuple = (0.02, 0.25)      # log-uniform bird width as a fraction of image width
    aspect: tuple = (0.35, 0.8)     # bird height / width
    classes: int = 1


def gen_synthetic_scene(rng, config=None, image_id="0"):
    """Gradient sky with dark elliptical birds; boxes are tight to the blobs."""
    cfg = config or SceneConfig()
    rng = make_rng(rng)
    h, w = cfg.height, cfg.width
    top = rng.uniform([0.05, 0.15, 0.35], [0.35, 0.45, 0.75])
    bottom = rng.uniform([0.55, 0.6, 0.7], [0.9, 0.9, 1.0])
    t = np.linspace(0.0, 1.0, h)[None, :, None]
    image = np.broadcast_to(top[:, None, None] * (1 - t) + bottom[:, None, None] * t, (3, h, w)).copy()
    n = int(rng.integers(cfg.birds[0], cfg.birds[1] + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    boxes = []
    for _ in range(n):
        bw = w * np.exp(rng.uniform(np.log(cfg.size[0]), np.log(cfg.size[1])))
        bh = bw * rng.uniform(*cfg.aspect)
        ax, ay = max(bw / 2, 0.75), max(bh / 2, 0.75)
        cx = rng.uniform(ax, w - ax)
        cy = rng.uniform(ay, h - ay)
        shade = rng.uniform(0.02, 0.2)
        cls = int(rng.integers(0, cfg.classes))
        mask = ((xx + 0.5 - cx) / ax) ** 2 + ((yy + 0.5 - cy) / ay) ** 2 <= 1.0
        if not mask.any():
            continue
        image[:, mask] = shade
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        x0, x1 = cols[0], cols[-1] + 1
        y0, y1 = rows[0], rows[-1] + 1
        boxes.append(BBox((x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h, cls))
    return LabeledImage(image_id, image, boxes)


def darken(image, gamma, gain, noise_sigma, rng=None):
    """clamp(gain * image ** gamma + N(0, noise_sigma)) to [0, 1]."""
    if gamma <= 0 or gain <= 0 or noise_sigma < 0:
        raise ValueError("gamma and gain must be positive, noise_sigma non-negative")
    out = gain * np.power(np.asarray(image, dtype=np.float64), gamma)
    if noise_sigma > 0:
        out = out + make_rng(rng if rng is not None else 0).normal(0.0, noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def make_pairs(n, size=32, seed=0, gamma=(2.0, 3.5), gain=(0.4, 0.7), noise_sigma=0.02):
    """``n`` (S_low, S_normal) pairs of square synthetic scenes."""
    rng = make_rng(seed)
    cfg = SceneConfig(height=size, width=size, birds=(1, 3), size=(0.12, 0.4))
    pairs = []
    for i in range(n):
        normal = gen_synthetic_scene(rng, cfg, str(i)).image
        low = darken(normal, rng.uniform(*gamma), rng.uniform(*gain), noise_sigma, rng)
        pairs.append((low, normal))
    return pairs
