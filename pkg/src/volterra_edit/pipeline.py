"""Dataset pipeline: detection/mask acquisition through clients, rule-based
and semantic filtering, mask dilation, inpainting, and add/remove pair
construction, plus canny-map extraction for edge conditioning.

Artifacts of a run:
  manifest.jsonl    one sample per line (schema below)
  scenes.jsonl      per-image kept objects (internal plumbing for the
                    instruction stage)
  quarantine.jsonl  samples set aside on client failure, with diagnostics
  images/, masks/   PNG payloads referenced by relative path
"""

import importlib.resources
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels, synth
from .clients import ClientError, ImageRef
from .instructions import multi_instance_instruction, multi_instance_plan, simple_instruction

PIPELINE_VERSION = "1"

MANIFEST_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["sample_id", "task", "source_path", "target_path", "mask_path",
                 "instructions", "object", "provenance"],
    "properties": {
        "sample_id": {"type": "string", "minLength": 1},
        "task": {"enum": ["add", "remove"]},
        "source_path": {"type": "string"},
        "target_path": {"type": "string"},
        "mask_path": {"type": "string"},
        "instructions": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["text", "strategy"],
                "properties": {"text": {"type": "string", "minLength": 1},
                               "strategy": {"type": "string"}},
            },
        },
        "object": {
            "type": "object", "additionalProperties": False,
            "required": ["label", "caption", "bbox", "clip_pre", "clip_post",
                         "area_fraction"],
            "properties": {
                "label": {"type": "string"},
                "caption": {"type": "string"},
                "bbox": {"type": "array", "minItems": 4, "maxItems": 4,
                         "items": {"type": "number"}},
                "clip_pre": {"type": ["number", "null"]},
                "clip_post": {"type": ["number", "null"]},
                "area_fraction": {"type": "number"},
            },
        },
        "provenance": {
            "type": "object", "additionalProperties": False,
            "required": ["pipeline_version", "seed"],
            "properties": {"pipeline_version": {"type": "string"},
                           "seed": {"type": "integer"}},
        },
    },
}


class ConfigError(Exception):
    pass


@dataclass
class FilterPolicy:
    min_area_fraction: float = 0.0018
    max_area_fraction: float = 0.5
    keyword_blocklist: frozenset = field(default_factory=frozenset)
    clip_accept_threshold: float = 0.2
    dilation_kernel: int = 15
    multi_instance: bool = True
    quality_variance_max: float = 1500.0
    quality_edge_density_max: float = 0.35

    def __post_init__(self):
        if not 0 < self.min_area_fraction < self.max_area_fraction <= 1:
            raise ConfigError("area bounds must satisfy 0 < min < max <= 1")
        if self.dilation_kernel % 2 == 0 or self.dilation_kernel < 1:
            raise ConfigError("dilation kernel must be odd and >= 1")

    @classmethod
    def load(cls, path=None, **overrides):
        """Policy from YAML, with the packaged starter blocklist by default."""
        data = {}
        if path is not None:
            import yaml

            data = yaml.safe_load(Path(path).read_text()) or {}
        data.update(overrides)
        bl_path = data.pop("blocklist_file", None)
        if bl_path is not None:
            bl_file = Path(bl_path)
            if not bl_file.exists():
                raise ConfigError(f"blocklist file not found: {bl_file}")
            words = bl_file.read_text().split()
        else:
            words = (importlib.resources.files("volterra_edit") / "data/blocklist.txt"
                     ).read_text().split()
        data["keyword_blocklist"] = frozenset(w.strip().lower() for w in words if w.strip())
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ObjectRecord:
    label: str
    caption: str
    bbox: list
    mask: np.ndarray | None = None
    source: str = "open_set_tagger"
    clip_pre: float | None = None
    clip_post: float | None = None
    area_fraction: float = 0.0

    def validate(self, image_shape):
        h, w = image_shape[:2]
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"bbox {self.bbox} outside image bounds {w}x{h}")
        if self.mask is not None:
            if self.mask.shape != (h, w):
                raise ValueError("mask shape does not match image")
            frac = float((self.mask > 0).sum()) / (h * w)
            if abs(frac - self.area_fraction) > 1e-9:
                raise ValueError("area_fraction inconsistent with mask popcount")

    def manifest_entry(self):
        return {"label": self.label, "caption": self.caption,
                "bbox": [int(v) for v in self.bbox],
                "clip_pre": self.clip_pre, "clip_post": self.clip_post,
                "area_fraction": round(self.area_fraction, 8)}

    @classmethod
    def from_manifest(cls, entry):
        return cls(label=entry["label"], caption=entry.get("caption", ""),
                   bbox=list(entry["bbox"]), clip_pre=entry.get("clip_pre"),
                   clip_post=entry.get("clip_post"),
                   area_fraction=entry.get("area_fraction", 0.0))


# ---------------------------------------------------------------------------
# filters


def filter_by_size(obj, pol):
    return pol.min_area_fraction <= obj.area_fraction <= pol.max_area_fraction


def _tokens(text):
    return [t for t in "".join(c if c.isalnum() else " " for c in text.lower()).split() if t]


def filter_by_keywords(obj, pol):
    if not pol.keyword_blocklist:
        raise ConfigError("keyword blocklist is empty; policy not loaded?")
    return not any(t in pol.keyword_blocklist for t in _tokens(obj.label))


def semantic_filter(obj, crop_pre, crop_post, embedder, tau):
    """Keep iff the pre-edit crop matches its tag and the post-edit crop
    matches it strictly less; scores are stored on the record."""
    label_vec = embedder.embed(obj.label)
    obj.clip_pre = float(np.dot(embedder.embed(crop_pre), label_vec))
    obj.clip_post = float(np.dot(embedder.embed(crop_post), label_vec))
    return obj.clip_pre >= tau and obj.clip_post < obj.clip_pre


def dilate_mask(mask, k):
    if k % 2 == 0:
        raise ValueError(f"dilation kernel must be odd, got {k}")
    return kernels.dilate_binary(np.asarray(mask, dtype=np.uint8), k)


def crop(image, bbox):
    x0, y0, x1, y1 = [int(v) for v in bbox]
    return image[y0:y1, x0:x1]


def inpaint_quality_ok(inpainted, mask, pol):
    """Stand-in for the classical quality check on the filled region:
    bounded local variance and edge density inside the mask."""
    region = inpainted[mask > 0].astype(np.float64)
    if region.size == 0:
        return False
    variance = float(region.var(axis=0).mean())
    gray = inpainted.astype(np.float64).mean(axis=2) / 255.0
    gy, gx = np.gradient(gray)
    edges = (np.hypot(gx, gy) > 0.12) & (mask > 0)
    density = float(edges.sum()) / max(1, int((mask > 0).sum()))
    return variance <= pol.quality_variance_max and density <= pol.quality_edge_density_max


# ---------------------------------------------------------------------------
# canny


def _gaussian_kernel1d(sigma, radius):
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2 * sigma * sigma))
    return k / k.sum()


def _convolve_sep(img, k1d):
    r = len(k1d) // 2
    padded = np.pad(img, r, mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for i, kv in enumerate(k1d):
        out += kv * padded[:, i:i + img.shape[1]][r:r + img.shape[0], :]
    img2 = out
    padded = np.pad(img2, r, mode="reflect")
    out = np.zeros_like(img2)
    for i, kv in enumerate(k1d):
        out += kv * padded[i:i + img.shape[0], :][:, r:r + img.shape[1]]
    return out


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def _conv3(img, kernel):
    padded = np.pad(img, 1, mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out


def canny_edges(image, low, high, sigma=1.4):
    """Full chain: Gaussian smooth, Sobel gradients, directional NMS,
    double-threshold hysteresis. Thresholds apply to the gradient magnitude
    of the [0,1]-scaled grayscale image. Returns a uint8 {0,1} edge map."""
    if not 0 <= low < high:
        raise ValueError(f"need 0 <= low < high, got low={low} high={high}")
    img = np.asarray(image)
    gray = img.astype(np.float64).mean(axis=2) if img.ndim == 3 else img.astype(np.float64)
    if gray.max() > 1.5:
        gray = gray / 255.0
    smooth = _convolve_sep(gray, _gaussian_kernel1d(sigma, radius=2))
    gx = _conv3(smooth, _SOBEL_X)
    gy = _conv3(smooth, _SOBEL_X.T)
    mag = np.hypot(gx, gy)
    nms = kernels.nms_suppress(mag, gx, gy)
    strong = (nms >= high).astype(np.uint8)
    weak = ((nms >= low) & (nms < high)).astype(np.uint8)
    return kernels.hysteresis_link(strong, weak)


def random_canny(image, rng, low_range=(0.03, 0.15), high_scale=(2.0, 4.0)):
    """Canny with random thresholds, as used for edge conditioning."""
    low = float(rng.uniform(*low_range))
    high = low * float(rng.uniform(*high_scale))
    return canny_edges(image, low, high)


# ---------------------------------------------------------------------------
# samples and manifest io


@dataclass
class EditSample:
    sample_id: str
    task: str
    source_path: str
    target_path: str
    mask_path: str
    instructions: list
    objects: list            # member ObjectRecords (>=1)
    combined_mask: np.ndarray
    provenance: dict

    def record(self):
        return {
            "sample_id": self.sample_id,
            "task": self.task,
            "source_path": self.source_path,
            "target_path": self.target_path,
            "mask_path": self.mask_path,
            "instructions": list(self.instructions),
            "object": self.objects[0].manifest_entry(),
            "provenance": dict(self.provenance),
        }


def save_mask(path, mask):
    Image.fromarray(((np.asarray(mask) > 0) * 255).astype(np.uint8), mode="L").save(path)


def load_mask(path):
    arr = np.asarray(Image.open(path))
    values = set(np.unique(arr).tolist())
    if not values <= {0, 255}:
        raise ValueError(f"mask {path} has values outside {{0,255}}: {sorted(values)[:5]}")
    return (arr > 0).astype(np.uint8)


def atomic_write_lines(path, lines):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_record(rec):
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# pipeline driver


def _collect_objects(ref, clients):
    """Tag -> detect -> segment -> caption-match; returns ObjectRecords."""
    h, w = ref.array.shape[:2]
    labels = clients.tagger.tag(ref)
    detections = clients.detector.detect(ref, labels)
    captions = clients.captioner.caption(ref)
    objects = []
    for det in detections:
        mask = clients.segmenter.segment(ref, det.bbox)
        caption = ""
        best = 0.0
        for cap, cbox in captions:
            iou = _bbox_iou(det.bbox, cbox)
            if iou > max(0.5, best):
                best, caption = iou, cap
        rec = ObjectRecord(
            label=det.label, caption=caption, bbox=[int(v) for v in det.bbox],
            mask=mask, source="open_set_tagger",
            area_fraction=float((mask > 0).sum()) / (h * w))
        rec.validate(ref.array.shape)
        objects.append(rec)
    return objects


def _bbox_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    inter = max(0, ix1 - ix0) * max(0, iy1 - iy0)
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _emit_pair(unit_id, ref, members, combined_mask, instructions_remove,
               instructions_add, clients, pol, out_dir, rel_orig, provenance,
               quarantine):
    """Inpaint one mask and emit the (remove, add) sample pair, or quarantine
    on client failure. Returns the two samples or None."""
    dmask = dilate_mask(combined_mask, pol.dilation_kernel)
    try:
        inpainted = clients.inpainter.inpaint(ref, dmask)
    except ClientError as exc:
        quarantine.append({"sample_id": unit_id, "stage": "inpaint",
                           "error": str(exc),
                           "object": members[0].manifest_entry()})
        return None

    # semantic validation: tag similarity must drop after removal
    keep = True
    for m in members:
        if not semantic_filter(m, crop(ref.array, m.bbox), crop(inpainted, m.bbox),
                               clients.embedder, pol.clip_accept_threshold):
            keep = False
    if not keep or not inpaint_quality_ok(inpainted, dmask, pol):
        return None

    inp_rel = f"images/{unit_id}.inpainted.png"
    mask_rel = f"masks/{unit_id}.png"
    Image.fromarray(inpainted).save(out_dir / inp_rel)
    save_mask(out_dir / mask_rel, dmask)

    remove = EditSample(
        sample_id=f"{unit_id}-remove", task="remove",
        source_path=rel_orig, target_path=inp_rel, mask_path=mask_rel,
        instructions=instructions_remove, objects=members,
        combined_mask=dmask, provenance=provenance)
    add = EditSample(
        sample_id=f"{unit_id}-add", task="add",
        source_path=inp_rel, target_path=rel_orig, mask_path=mask_rel,
        instructions=instructions_add, objects=members,
        combined_mask=dmask, provenance=provenance)
    return [remove, add]


def build_pairs(ref, kept_objects, clients, pol, rng, out_dir, rel_orig,
                provenance, quarantine, groups=None):
    """Per-object pairs plus multi-instance group pairs (swap rule: the add
    sample is the remove sample with source/target exchanged)."""
    samples = []
    stem = Path(rel_orig).stem
    for idx, obj in enumerate(kept_objects):
        unit_id = f"{stem}-{idx:02d}"
        pair = _emit_pair(
            unit_id, ref, [obj], obj.mask,
            [{"text": simple_instruction(obj, "remove"), "strategy": "simple"}],
            [{"text": simple_instruction(obj, "add"), "strategy": "simple"}],
            clients, pol, out_dir, rel_orig, provenance, quarantine)
        if pair:
            samples.extend(pair)

    if groups is None and pol.multi_instance:
        groups = []
        by_label = {}
        for obj in kept_objects:
            by_label.setdefault(obj.label, []).append(obj)
        for label in sorted(by_label):
            if len(by_label[label]) >= 2:
                groups.append(multi_instance_plan(by_label[label], rng))
    for gidx, group in enumerate(groups or []):
        unit_id = f"{stem}-g{gidx:02d}"
        pair = _emit_pair(
            unit_id, ref, group.selected, group.combined_mask,
            [{"text": multi_instance_instruction(group, "remove"),
              "strategy": "multi_instance"}],
            [{"text": multi_instance_instruction(group, "add"),
              "strategy": "multi_instance"}],
            clients, pol, out_dir, rel_orig, provenance, quarantine)
        if pair:
            samples.extend(pair)
    return samples


def run_pipeline(images_dir, out_dir, pol, clients, seed):
    """Stages 1-3 over a corpus directory; deterministic under fixed seed
    with mock clients."""
    images_dir, out_dir = Path(images_dir), Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    provenance = {"pipeline_version": PIPELINE_VERSION, "seed": int(seed)}

    samples, scenes, quarantine = [], [], []
    counts = {"detected": 0, "size_filtered": 0, "keyword_filtered": 0,
              "semantic_or_quality_filtered": 0, "kept": 0}
    image_paths = sorted(p for p in images_dir.glob("*.png"))
    for img_idx, img_path in enumerate(image_paths):
        ref = ImageRef.from_path(img_path)
        rng = np.random.default_rng([seed, img_idx])
        try:
            objects = _collect_objects(ref, clients)
        except ClientError as exc:
            quarantine.append({"sample_id": img_path.stem, "stage": "detect",
                               "error": str(exc), "object": None})
            continue
        counts["detected"] += len(objects)
        sized = [o for o in objects if filter_by_size(o, pol)]
        counts["size_filtered"] += len(objects) - len(sized)
        kept = [o for o in sized if filter_by_keywords(o, pol)]
        counts["keyword_filtered"] += len(sized) - len(kept)
        if not kept:
            continue

        rel_orig = f"images/{img_path.stem}.png"
        Image.fromarray(ref.array).save(out_dir / rel_orig)
        # keep the planted ground truth adjacent so downstream mock-backed
        # stages (depth, re-tagging) still resolve
        src_sidecar = synth.sidecar_path(img_path)
        if src_sidecar.exists():
            synth.sidecar_path(out_dir / rel_orig).write_text(src_sidecar.read_text())
        before = len(samples)
        samples.extend(build_pairs(ref, kept, clients, pol, rng, out_dir,
                                   rel_orig, provenance, quarantine))
        emitted = (len(samples) - before) // 2
        counts["semantic_or_quality_filtered"] += max(0, len(kept) - emitted)
        counts["kept"] += emitted

        scene_objs = []
        for oidx, obj in enumerate(kept):
            mask_rel = f"masks/{img_path.stem}-obj{oidx:02d}.png"
            save_mask(out_dir / mask_rel, obj.mask)
            scene_objs.append({**obj.manifest_entry(), "mask_path": mask_rel})
        scenes.append({"image_path": rel_orig, "objects": scene_objs})

    atomic_write_lines(out_dir / "manifest.jsonl",
                       [dump_record(s.record()) for s in samples])
    atomic_write_lines(out_dir / "scenes.jsonl", [dump_record(s) for s in scenes])
    atomic_write_lines(out_dir / "quarantine.jsonl", [dump_record(q) for q in quarantine])
    summary = {"images": len(image_paths), "samples": len(samples),
               "quarantined": len(quarantine), **counts}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# manifest validation


def validate_manifest(manifest_path):
    """Schema plus cross-file invariants; returns a list of violations."""
    import jsonschema

    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    violations = []
    records = []
    for ln, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line:
            continue
        try:
            rec = json.loads(line)
            jsonschema.validate(rec, MANIFEST_SCHEMA)
            records.append(rec)
        except Exception as exc:  # noqa: BLE001
            violations.append(f"line {ln}: {exc}")
    by_id = {r["sample_id"]: r for r in records}
    for rec in records:
        for key in ("source_path", "target_path", "mask_path"):
            if not (root / rec[key]).exists():
                violations.append(f"{rec['sample_id']}: missing file {rec[key]}")
        if rec["task"] == "add":
            twin_id = rec["sample_id"].rsplit("-", 1)[0] + "-remove"
            twin = by_id.get(twin_id)
            if twin is None:
                violations.append(f"{rec['sample_id']}: no remove twin")
            elif (twin["source_path"] != rec["target_path"]
                  or twin["target_path"] != rec["source_path"]):
                violations.append(f"{rec['sample_id']}: swap rule violated")
        try:
            mask = load_mask(root / rec["mask_path"])
            if mask.sum() == 0:
                violations.append(f"{rec['sample_id']}: empty mask")
        except Exception as exc:  # noqa: BLE001
            violations.append(f"{rec['sample_id']}: bad mask ({exc})")
    return violations
