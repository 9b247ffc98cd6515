"""Instruction generation: simple, attribute, spatial, and multi-instance
strategies, plus the depth -> metric point-cloud geometry behind the
spatial predicates."""

import json
from dataclasses import dataclass

import numpy as np

from .clients import ClientError, head_noun

STRATEGIES = ("simple", "attribute", "spatial", "multi_instance")

RELATION_PHRASES = {
    "left": "to the left of",
    "right": "to the right of",
    "above": "above",
    "below": "below",
    "front": "in front of",
    "behind": "behind",
}

NUMBER_WORDS = ["zero", "one", "two", "three", "four", "five", "six",
                "seven", "eight", "nine", "ten"]

_IRREGULAR_PLURALS = {"person": "people", "child": "children", "foot": "feet",
                      "mouse": "mice", "sheep": "sheep", "cow": "cows"}
_ARTICLES = ("a ", "an ", "the ")


def article(word):
    return "an" if word[:1].lower() in "aeiou" else "a"


def pluralize(label):
    if label in _IRREGULAR_PLURALS:
        return _IRREGULAR_PLURALS[label]
    if label.endswith(("s", "x", "z", "ch", "sh")):
        return label + "es"
    if label.endswith("y") and len(label) > 1 and label[-2] not in "aeiou":
        return label[:-1] + "ies"
    return label + "s"


def number_word(k):
    return NUMBER_WORDS[k] if 0 <= k < len(NUMBER_WORDS) else str(k)


def normalize_caption(caption):
    """Lowercase, trim, fold a leading article."""
    c = " ".join(caption.strip().lower().split())
    for art in _ARTICLES:
        if c.startswith(art):
            return c[len(art):]
    return c


def simple_instruction(obj, task):
    label = obj.label.strip().lower()
    if not label:
        raise ValueError("object label is empty")
    if task == "remove":
        return f"remove the {label}"
    return f"add {article(label)} {label}"


def attribute_instruction(obj, task):
    caption = normalize_caption(obj.caption or "")
    if not caption:
        return simple_instruction(obj, task)
    if task == "remove":
        return f"remove the {caption}"
    return f"add {article(caption)} {caption}"


# ---------------------------------------------------------------------------
# spatial geometry


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def default_for(cls, h, w):
        # pinhole with f = max(H, W): relative geometry is all the
        # predicates need, absolute scale is irrelevant
        f = float(max(h, w))
        return cls(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0)


def project_to_pointcloud(depth, mask, intrinsics):
    """Back-project masked pixels: X=(u-cx)d/fx, Y=(v-cy)d/fy, Z=d.

    Non-positive depths inside the mask are skipped and counted.
    Returns (points [N,3] float64, skipped count).
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask) > 0
    if depth.shape != mask.shape:
        raise ValueError(f"depth {depth.shape} vs mask {mask.shape} shape mismatch")
    vs, us = np.nonzero(mask)
    d = depth[vs, us]
    ok = d > 0
    skipped = int((~ok).sum())
    us, vs, d = us[ok], vs[ok], d[ok]
    x = (us - intrinsics.cx) * d / intrinsics.fx
    y = (vs - intrinsics.cy) * d / intrinsics.fy
    return np.stack([x, y, d], axis=1), skipped


@dataclass
class SceneObject3D:
    record: object
    points: np.ndarray
    bbox3d: np.ndarray   # [3,2] per-axis [min,max] from robust percentiles
    centroid: np.ndarray

    @property
    def extents(self):
        return self.bbox3d[:, 1] - self.bbox3d[:, 0]


def scene_object_3d(record, depth, intrinsics, lo=5.0, hi=95.0):
    """None when no valid depth fell inside the mask."""
    points, _skipped = project_to_pointcloud(depth, record.mask, intrinsics)
    if len(points) == 0:
        return None
    bbox3d = np.stack([np.percentile(points, lo, axis=0),
                       np.percentile(points, hi, axis=0)], axis=1)
    return SceneObject3D(record=record, points=points, bbox3d=bbox3d,
                         centroid=points.mean(axis=0))


@dataclass
class SpatialPredicate:
    value: str
    subject: object
    anchor: object
    margin: float


# displacement sign -> predicate per axis; y follows the image-down
# convention, front means closer to the camera (smaller Z)
_AXIS_PREDICATES = [("left", "right"), ("above", "below"), ("front", "behind")]


def assign_predicate(a: SceneObject3D, b: SceneObject3D, margin=0.3):
    """Dominant-axis rule: normalize |centroid delta| per axis by the mean
    extent of the two boxes; emit a predicate only when the top axis beats
    the runner-up by `margin`. Ambiguous geometry yields None."""
    delta = a.centroid - b.centroid
    mean_ext = np.maximum((a.extents + b.extents) / 2.0, 1e-9)
    nd = np.abs(delta) / mean_ext
    order = np.argsort(-nd)
    dom, second = int(order[0]), int(order[1])
    if nd[dom] - nd[second] <= margin:
        return None
    neg, pos = _AXIS_PREDICATES[dom]
    value = neg if delta[dom] < 0 else pos
    return SpatialPredicate(value=value, subject=a.record, anchor=b.record,
                            margin=margin)


def spatial_instruction(subject, pred_value, anchor, task):
    """None when the anchor has no caption: specificity is the point."""
    anchor_caption = normalize_caption(anchor.caption or "")
    if not anchor_caption:
        return None
    phrase = RELATION_PHRASES[pred_value]
    label = subject.label.strip().lower()
    if task == "remove":
        return f"remove the {label} {phrase} the {anchor_caption}"
    return f"add {article(label)} {label} {phrase} the {anchor_caption}"


def caption_to_label(caption, llm_client):
    """(label, flagged): flagged marks the rule-based fallback path."""
    if not caption or not caption.strip():
        raise ValueError("empty caption")
    try:
        return llm_client.extract_label(caption), False
    except ClientError:
        return head_noun(caption), True


# ---------------------------------------------------------------------------
# multi-instance


@dataclass
class InstanceGroup:
    class_label: str
    instances: list
    layout: str      # horizontal | vertical
    k: int
    direction: str   # left | right | top | bottom
    selected: list
    combined_mask: np.ndarray


def multi_instance_plan(instances, rng):
    """Layout from bbox-center spread; k instances nearest the sampled edge;
    masks merged with logical OR."""
    if len(instances) < 2:
        raise ValueError("need >= 2 instances of one class")
    labels = {o.label for o in instances}
    if len(labels) != 1:
        raise ValueError(f"instances span multiple classes: {sorted(labels)}")
    cx = np.array([(o.bbox[0] + o.bbox[2]) / 2.0 for o in instances])
    cy = np.array([(o.bbox[1] + o.bbox[3]) / 2.0 for o in instances])
    spread_x = cx.max() - cx.min()
    spread_y = cy.max() - cy.min()
    layout = "horizontal" if spread_x >= spread_y else "vertical"
    coord = cx if layout == "horizontal" else cy
    direction = str(rng.choice(["left", "right"] if layout == "horizontal"
                               else ["top", "bottom"]))
    # ties resolve by original index order on both ends
    if direction in ("right", "bottom"):
        order = np.argsort(-coord, kind="stable")
    else:
        order = np.argsort(coord, kind="stable")
    k = int(rng.integers(1, len(instances) + 1))
    selected = [instances[i] for i in order[:k]]
    combined = np.zeros_like(selected[0].mask)
    for o in selected:
        combined = np.logical_or(combined, o.mask > 0)
    return InstanceGroup(class_label=instances[0].label, instances=list(instances),
                         layout=layout, k=k, direction=direction,
                         selected=selected, combined_mask=combined.astype(np.uint8))


def multi_instance_instruction(group, task):
    label = group.class_label.strip().lower()
    noun = label if group.k == 1 else pluralize(label)
    kw = number_word(group.k)
    if task == "remove":
        return f"remove {kw} {noun} from the {group.direction}"
    return f"add {kw} {noun}"


# ---------------------------------------------------------------------------
# manifest enrichment driver


def _record_scene_key(rec):
    # the original (pre-edit) image: the source of a remove sample, the
    # target of its add twin
    return rec["source_path"] if rec["task"] == "remove" else rec["target_path"]


def enrich_manifest(manifest_path, scenes_path, clients, strategies, seed,
                    margin=0.3, intrinsics=None):
    """Append attribute/spatial instructions to single-object samples in
    place (atomic rewrite). Multi-instance samples keep their planned
    instruction from the pairing stage."""
    from .pipeline import ObjectRecord, atomic_write_lines  # local import: no cycle at module load

    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise ValueError(f"unknown strategies: {sorted(unknown)}")
    records = [json.loads(l) for l in manifest_path.read_text().splitlines() if l]
    scenes = {}
    for line in scenes_path.read_text().splitlines():
        if line:
            sc = json.loads(line)
            scenes[sc["image_path"]] = sc

    depth_cache = {}
    stats = {"spatial": 0, "attribute": 0, "simple": 0, "skipped_spatial": 0}

    for rec in records:
        strategies_present = {i["strategy"] for i in rec["instructions"]}
        if "multi_instance" in strategies_present:
            continue
        obj = ObjectRecord.from_manifest(rec["object"])
        task = rec["task"]
        if "simple" in strategies and "simple" not in strategies_present:
            rec["instructions"].append(
                {"text": simple_instruction(obj, task), "strategy": "simple"})
            stats["simple"] += 1
        if "attribute" in strategies and obj.caption:
            rec["instructions"].append(
                {"text": attribute_instruction(obj, task), "strategy": "attribute"})
            stats["attribute"] += 1
        if "spatial" in strategies:
            scene = scenes.get(_record_scene_key(rec))
            text = None
            if scene is not None and len(scene["objects"]) >= 2:
                text = _spatial_for(rec, scene, clients, margin, intrinsics,
                                    depth_cache, manifest_path.parent)
            if text:
                rec["instructions"].append({"text": text, "strategy": "spatial"})
                stats["spatial"] += 1
            else:
                stats["skipped_spatial"] += 1

    atomic_write_lines(
        manifest_path,
        [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in records])
    return stats


def _spatial_for(rec, scene, clients, margin, intrinsics, depth_cache, root):
    from .clients import ImageRef
    from .pipeline import ObjectRecord, load_mask

    image_path = root / scene["image_path"]
    if scene["image_path"] not in depth_cache:
        depth_cache[scene["image_path"]] = clients.depth.estimate_depth(
            ImageRef.from_path(image_path))
    depth = depth_cache[scene["image_path"]]
    intr = intrinsics or Intrinsics.default_for(*depth.shape)

    target_bbox = rec["object"]["bbox"]
    subject_sc = None
    others = []
    for so in scene["objects"]:
        record = ObjectRecord.from_manifest(so)
        record.mask = load_mask(root / so["mask_path"])
        if so["bbox"] == target_bbox and record.label == rec["object"]["label"]:
            subject_sc = record
        else:
            others.append(record)
    if subject_sc is None or not others:
        return None
    subject_3d = scene_object_3d(subject_sc, depth, intr)
    if subject_3d is None:
        return None
    # nearest other object by 3D centroid distance is "the adjacent object"
    anchors = [scene_object_3d(o, depth, intr) for o in others]
    anchors = [a for a in anchors if a is not None]
    if not anchors:
        return None
    anchor = min(anchors, key=lambda a: float(np.linalg.norm(a.centroid - subject_3d.centroid)))
    pred = assign_predicate(subject_3d, anchor, margin=margin)
    if pred is None:
        return None
    return spatial_instruction(subject_sc, pred.value, anchor.record, rec["task"])
