"""Synthetic scene corpus: colored geometric objects on textured backgrounds
with exact labels/boxes/masks/depth planted in image-adjacent sidecars.

The label -> color table is the shared ground truth that lets the mock
embedding client recognize object crops without any learned model.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

SIDECAR_SCHEMA = 1
SIDECAR_SUFFIX = ".truth.json"

LABELS = [
    "apple", "ball", "book", "bottle", "bowl", "car", "cat", "chair", "cow",
    "cup", "dog", "hat", "lamp", "mug", "parrot", "plant", "shoe", "table",
]
# labels that the starter blocklist rejects; planted occasionally so the
# keyword filter has real work to do
BLOCKED_LABELS = ["hand", "shirt", "red", "running"]

_ADJECTIVES = ["small", "large", "shiny", "wooden", "striped", "vintage",
               "dark", "bright", "plastic", "round"]
_COLOR_WORDS = ["red", "green", "blue", "yellow", "brown", "purple",
                "orange", "gray"]


def label_color(label):
    """Deterministic saturated RGB for a label; stable across processes."""
    digest = hashlib.sha1(f"color:{label}".encode()).digest()
    hue = digest[0] / 255.0
    # crude HSV->RGB at s=0.85, v=0.9 keeps labels far apart in RGB
    i = int(hue * 6) % 6
    f = hue * 6 - int(hue * 6)
    v, s = 0.9, 0.85
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return tuple(int(round(255 * c)) for c in rgb)


def _shape_mask(kind, params, size):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "circle":
        cy, cx, r = params["cy"], params["cx"], params["r"]
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
    if kind == "rect":
        x0, y0, x1, y1 = params["x0"], params["y0"], params["x1"], params["y1"]
        return ((yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)).astype(np.uint8)
    if kind == "triangle":
        cy, cx, r = params["cy"], params["cx"], params["r"]
        inside = (yy >= cy - r) & (yy <= cy + r)
        half = (yy - (cy - r)) / 2.0
        inside &= (xx >= cx - half) & (xx <= cx + half)
        return inside.astype(np.uint8)
    raise ValueError(f"unknown shape kind {kind!r}")


def mask_bbox(mask):
    ys, xs = np.nonzero(mask)
    return [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]


def _background(rng, size):
    h, w = size
    c0 = rng.integers(30, 226, size=3).astype(np.float64)
    c1 = rng.integers(30, 226, size=3).astype(np.float64)
    ramp = np.linspace(0, 1, w)[None, :, None]
    img = np.empty((h, w, 3))
    img[:] = c0[None, None, :] * (1 - ramp) + c1[None, None, :] * ramp
    img += rng.normal(0, 6.0, size=(h, w, 3))
    return np.clip(img, 0, 255)


def _caption(rng, label):
    return f"{rng.choice(_ADJECTIVES)} {rng.choice(_COLOR_WORDS)} {label}"


def make_scene(rng, size=(96, 96), n_objects=3, blocked_prob=0.1,
               extreme_prob=0.12):
    """One scene: image array (uint8 HWC) + ground-truth dict.

    A slice of objects is deliberately out of policy (blocked label, or
    tiny/huge area) to exercise the filters downstream.
    """
    h, w = size
    img = _background(rng, size)
    objects = []
    occupied = np.zeros(size, dtype=np.uint8)
    for _ in range(n_objects):
        blocked = rng.random() < blocked_prob
        label = str(rng.choice(BLOCKED_LABELS if blocked else LABELS))
        extreme = rng.random() < extreme_prob
        for _attempt in range(20):
            kind = str(rng.choice(["circle", "rect", "triangle"]))
            if extreme and rng.random() < 0.5:
                r = int(rng.integers(1, 3))  # below the 0.18% area floor
            elif extreme:
                r = int(min(h, w) * 0.45)    # above the 50% area ceiling
            else:
                r = int(rng.integers(6, max(7, min(h, w) // 6)))
            cy = int(rng.integers(r + 1, h - r - 1)) if h - 2 * r - 2 > 0 else h // 2
            cx = int(rng.integers(r + 1, w - r - 1)) if w - 2 * r - 2 > 0 else w // 2
            if kind == "rect":
                params = {"x0": cx - r, "y0": cy - r, "x1": cx + r, "y1": cy + r}
            else:
                params = {"cy": cy, "cx": cx, "r": r}
            mask = _shape_mask(kind, params, size)
            if mask.sum() == 0:
                continue
            if extreme or (occupied & mask).sum() == 0:
                break
        else:
            continue
        occupied |= mask
        color = np.array(label_color(label), dtype=np.float64)
        jitter = rng.normal(0, 4.0, size=3)
        img[mask.astype(bool)] = np.clip(color + jitter, 0, 255)
        objects.append({
            "label": label,
            "caption": _caption(rng, label),
            "bbox": mask_bbox(mask),
            "score": round(float(rng.uniform(0.55, 0.99)), 4),
            "shape": {"kind": kind, **params},
        })
    depth = {
        "base": round(float(rng.uniform(2.0, 5.0)), 4),
        "gx": round(float(rng.uniform(-0.01, 0.01)), 6),
        "gy": round(float(rng.uniform(-0.01, 0.01)), 6),
    }
    truth = {
        "schema": SIDECAR_SCHEMA,
        "size": [h, w],
        "labels": sorted({o["label"] for o in objects}),
        "objects": objects,
        "depth": depth,
    }
    return np.clip(img, 0, 255).astype(np.uint8), truth


def object_mask(obj, size):
    """Exact raster of a sidecar object's shape."""
    return _shape_mask(obj["shape"]["kind"], obj["shape"], size)


def sidecar_path(image_path):
    return Path(str(image_path) + SIDECAR_SUFFIX)


def write_corpus(out_dir, n, seed, size=(96, 96), objects_low=2, objects_high=4):
    """n deterministic scenes + sidecars; returns the image paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        n_obj = int(rng.integers(objects_low, objects_high + 1))
        img, truth = make_scene(rng, size=size, n_objects=n_obj)
        path = out_dir / f"scene_{i:05d}.png"
        Image.fromarray(img).save(path)
        sidecar_path(path).write_text(
            json.dumps(truth, sort_keys=True, separators=(",", ":")) + "\n")
        paths.append(path)
    return paths


def make_micro_pairs(n_pairs, seed, size=32):
    """32x32 add/remove training pairs for the adapter experiments.

    Returns float32 arrays in [-1,1]: sources, targets (both [N,3,s,s]),
    plus instruction strings and task tags. Remove pairs go
    (with-object -> background); add pairs are the byte swap.
    """
    rng = np.random.default_rng(seed)
    sources = np.empty((n_pairs, 3, size, size), dtype=np.float32)
    targets = np.empty_like(sources)
    instructions, tasks = [], []
    for i in range(n_pairs):
        bg = _background(rng, (size, size))
        label = str(rng.choice(LABELS))
        r = int(rng.integers(4, 9))
        cy = int(rng.integers(r + 1, size - r - 1))
        cx = int(rng.integers(r + 1, size - r - 1))
        kind = str(rng.choice(["circle", "rect", "triangle"]))
        if kind == "rect":
            params = {"x0": cx - r, "y0": cy - r, "x1": cx + r, "y1": cy + r}
        else:
            params = {"cy": cy, "cx": cx, "r": r}
        mask = _shape_mask(kind, params, (size, size)).astype(bool)
        with_obj = bg.copy()
        with_obj[mask] = np.clip(
            np.array(label_color(label), dtype=np.float64) + rng.normal(0, 4.0, 3),
            0, 255)
        task = "remove" if rng.random() < 0.5 else "add"
        src, tgt = (with_obj, bg) if task == "remove" else (bg, with_obj)
        article = "an" if label[0] in "aeiou" else "a"
        text = (f"remove the {label}" if task == "remove" else f"add {article} {label}")
        sources[i] = (src.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)
        targets[i] = (tgt.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)
        instructions.append(text)
        tasks.append(task)
    return {"sources": sources, "targets": targets,
            "instructions": instructions, "tasks": tasks}
