"""Client layer for the external neural services the pipeline composes:
tagger, grounded detector, segmenter, dense captioner, inpainter, depth
estimator, embedding provider, label-extraction LLM.

Every kind speaks one JSON-over-HTTP POST schema (images as base64 PNG,
`schema: 1`) through a retrying, rate-limited transport; the deterministic
in-process mock implements the same wire schema and reads planted ground
truth from `<image>.truth.json` sidecars.
"""

import base64
import hashlib
import io
import json
import threading
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import synth

WIRE_SCHEMA = 1
KINDS = ("tagger", "detector", "segmenter", "captioner", "inpainter",
         "depth", "embedder", "llm")

PROMPT_VERSION = 1
LABEL_PROMPT_EXAMPLES = [
    ("person in blue shirt", "person"),
    ("dark brown cow", "cow"),
    ("small wooden table", "table"),
]
LABEL_PROMPT_TEMPLATE = (
    "Extract the object class label from the caption.\n"
    + "\n".join(f"caption: {c}\nlabel: {l}" for c, l in LABEL_PROMPT_EXAMPLES)
    + "\ncaption: {caption}\nlabel:"
)

_PREPOSITIONS = {"in", "on", "with", "of", "at", "near", "by", "under",
                 "over", "behind", "beside", "wearing", "holding", "to",
                 "from", "inside", "outside"}
_ARTICLES = {"a", "an", "the"}


class ClientError(Exception):
    pass


class TransportError(ClientError):
    pass


@dataclass
class ClientConfig:
    endpoint: str
    timeout_ms: int = 5000
    max_retries: int = 2
    backoff_base_ms: int = 50
    auth_token: str | None = None
    rate_per_s: float = 20.0

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class ImageRef:
    """Image plus its on-disk identity; mocks resolve sidecars via `path`."""
    array: np.ndarray
    path: Path | None = None

    @classmethod
    def from_path(cls, path):
        arr = np.asarray(Image.open(path).convert("RGB"))
        return cls(array=arr, path=Path(path))

    def truth(self):
        if self.path is None:
            raise ClientError("mock client needs an image with an on-disk path")
        sc = synth.sidecar_path(self.path)
        if not sc.exists():
            raise ClientError(f"missing sidecar {sc}")
        return json.loads(sc.read_text())


def img_to_b64(arr):
    buf = io.BytesIO()
    Image.fromarray(np.asarray(arr)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def b64_to_img(s):
    return np.asarray(Image.open(io.BytesIO(base64.b64decode(s))))


def head_noun(caption):
    """Rule-based head noun: leading article dropped, stop at the first
    preposition, take the final token of what remains."""
    tokens = [t for t in "".join(
        c if c.isalnum() else " " for c in caption.lower()).split() if t]
    if tokens and tokens[0] in _ARTICLES:
        tokens = tokens[1:]
    head = []
    for t in tokens:
        if t in _PREPOSITIONS:
            break
        head.append(t)
    if not head:
        raise ClientError(f"cannot extract label from caption {caption!r}")
    return head[-1]


class TokenBucket:
    """Blocking per-endpoint limiter bounding sustained request rate."""

    def __init__(self, rate_per_s, capacity=None):
        self.rate = float(rate_per_s)
        self.capacity = float(capacity if capacity is not None else max(1.0, rate_per_s))
        self._tokens = self.capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class HttpTransport:
    """JSON POST with bounded retries and exponential backoff."""

    def __init__(self, cfg: ClientConfig, session=None, sleep=time.sleep):
        import requests

        self.cfg = cfg
        self.session = session or requests.Session()
        self.limiter = TokenBucket(cfg.rate_per_s)
        self._sleep = sleep

    def post(self, body):
        headers = {}
        if self.cfg.auth_token:
            headers["Authorization"] = f"Bearer {self.cfg.auth_token}"
        last = None
        for attempt in range(self.cfg.max_retries + 1):
            self.limiter.acquire()
            try:
                resp = self.session.post(
                    self.cfg.endpoint, json=body, headers=headers,
                    timeout=self.cfg.timeout_ms / 1000.0)
                resp.raise_for_status()
                return resp.json()
            except Exception as exc:  # noqa: BLE001 - every failure is retryable here
                last = exc
                if attempt < self.cfg.max_retries:
                    self._sleep(self.cfg.backoff_base_ms * (2 ** attempt) / 1000.0)
        raise TransportError(
            f"{self.cfg.endpoint}: gave up after {self.cfg.max_retries + 1} attempts: {last}")


class MockTransport:
    """In-process stand-in speaking the same wire schema; deterministic as a
    function of (payload, seed)."""

    def __init__(self, seed=0, embed_dim=64):
        self.seed = seed
        self.embed_dim = embed_dim

    # -- embedding helpers ------------------------------------------------
    def _hash_vec(self, key):
        digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        v = rng.standard_normal(self.embed_dim)
        return v / np.linalg.norm(v)

    def _embed_text(self, text):
        return self._hash_vec(f"text:{text.strip().lower()}")

    def _embed_image(self, arr):
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        mean = arr.reshape(-1, arr.shape[-1]).mean(axis=0)[:3]
        known = synth.LABELS + synth.BLOCKED_LABELS
        dists = [np.linalg.norm(mean - np.array(synth.label_color(l))) for l in known]
        i = int(np.argmin(dists))
        noise = self._hash_vec("img:" + hashlib.sha1(
            np.round(mean).astype(np.uint8).tobytes()).hexdigest())
        if dists[i] < 60.0:
            v = 0.85 * self._embed_text(known[i]) + 0.15 * noise
        else:
            v = noise
        return v / np.linalg.norm(v)

    # -- dispatch ----------------------------------------------------------
    def post(self, body):
        if body.get("schema") != WIRE_SCHEMA:
            raise ClientError(f"unsupported wire schema {body.get('schema')}")
        kind = body["kind"]
        handler = getattr(self, f"_do_{kind}", None)
        if handler is None:
            raise ClientError(f"mock cannot serve kind {kind!r}")
        return {"schema": WIRE_SCHEMA, "kind": kind, **handler(body)}

    def _truth(self, body):
        ref = body.get("ref")
        if not ref:
            raise ClientError("mock requires the image 'ref' field")
        sc = synth.sidecar_path(ref)
        if not sc.exists():
            raise ClientError(f"missing sidecar {sc}")
        return json.loads(sc.read_text())

    def _do_tagger(self, body):
        truth = self._truth(body)
        return {"labels": [l for l in truth["labels"] for _ in (0, 1)]}  # dupes on purpose

    def _do_detector(self, body):
        truth = self._truth(body)
        wanted = {l.lower() for l in body["labels"]}
        dets = [{"label": o["label"], "bbox": o["bbox"], "score": o["score"]}
                for o in truth["objects"] if o["label"].lower() in wanted]
        return {"detections": dets}

    def _do_segmenter(self, body):
        img = b64_to_img(body["image"])
        h, w = img.shape[:2]
        x0, y0, x1, y1 = body["bbox"]
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[max(0, y0):min(h, y1), max(0, x0):min(w, x1)] = 255
        return {"mask": img_to_b64(mask)}

    def _do_captioner(self, body):
        truth = self._truth(body)
        return {"captions": [{"caption": o["caption"], "bbox": o["bbox"]}
                             for o in truth["objects"]]}

    def _do_inpainter(self, body):
        img = b64_to_img(body["image"]).astype(np.float64)
        mask = b64_to_img(body["mask"]) > 0
        from . import kernels

        ring = kernels.dilate_binary(mask.astype(np.uint8), 7).astype(bool) & ~mask
        fill = img[ring].mean(axis=0) if ring.any() else img.reshape(-1, 3).mean(axis=0)
        out = img.copy()
        out[mask] = fill
        return {"image": img_to_b64(np.clip(out, 0, 255).astype(np.uint8))}

    def _do_depth(self, body):
        truth = self._truth(body)
        h, w = truth["size"]
        p = truth["depth"]
        yy, xx = np.mgrid[0:h, 0:w]
        d = p["base"] + p["gx"] * xx + p["gy"] * yy
        return {"depth": np.maximum(d, 0.05).tolist()}

    def _do_embedder(self, body):
        if "text" in body:
            v = self._embed_text(body["text"])
        else:
            v = self._embed_image(b64_to_img(body["image"]))
        return {"vector": v.tolist()}

    def _do_llm(self, body):
        prompt = body["prompt"]
        caption = prompt.rsplit("caption:", 1)[1].split("label:")[0].strip()
        return {"label": head_noun(caption)}


# --------------------------------------------------------------------------
# per-kind clients


class _Client:
    kind = None

    def __init__(self, transport):
        self.transport = transport
        self.flags = []

    def _post(self, **payload):
        body = {"schema": WIRE_SCHEMA, "kind": self.kind, **payload}
        return self.transport.post(body)

    @staticmethod
    def _ref_field(ref):
        return {"image": img_to_b64(ref.array),
                "ref": str(ref.path) if ref.path else None}


class TaggerClient(_Client):
    kind = "tagger"

    def tag(self, ref):
        resp = self._post(**self._ref_field(ref))
        seen, out = set(), []
        for label in resp["labels"]:
            label = label.strip().lower()
            if label and label not in seen:
                seen.add(label)
                out.append(label)
        return out


@dataclass
class Detection:
    label: str
    bbox: list
    score: float


class DetectorClient(_Client):
    kind = "detector"

    def __init__(self, transport, min_score=0.35):
        super().__init__(transport)
        self.min_score = min_score

    def detect(self, ref, labels):
        if not labels:
            return []
        h, w = ref.array.shape[:2]
        resp = self._post(labels=list(labels), **self._ref_field(ref))
        out = []
        for d in resp["detections"]:
            x0, y0, x1, y1 = d["bbox"]
            cl = [min(max(0, x0), w), min(max(0, y0), h),
                  min(max(0, x1), w), min(max(0, y1), h)]
            if cl != [x0, y0, x1, y1]:
                self.flags.append(f"clamped bbox {d['bbox']} -> {cl}")
            score = float(d["score"])
            if not 0.0 <= score <= 1.0:
                raise ClientError(f"detector score out of range: {score}")
            if score >= self.min_score and cl[0] < cl[2] and cl[1] < cl[3]:
                out.append(Detection(label=d["label"], bbox=cl, score=score))
        return out


class SegmenterClient(_Client):
    kind = "segmenter"

    def segment(self, ref, bbox):
        resp = self._post(bbox=list(bbox), **self._ref_field(ref))
        mask = (b64_to_img(resp["mask"]) > 0).astype(np.uint8)
        if mask.shape != ref.array.shape[:2]:
            raise ClientError(
                f"mask shape {mask.shape} does not match image {ref.array.shape[:2]}")
        x0, y0, x1, y1 = bbox
        if mask[y0:y1, x0:x1].sum() == 0:
            raise ClientError("segmenter mask does not intersect the query bbox")
        return mask


class CaptionerClient(_Client):
    kind = "captioner"

    def caption(self, ref):
        resp = self._post(**self._ref_field(ref))
        return [(c["caption"], c["bbox"]) for c in resp["captions"]]


class InpainterClient(_Client):
    kind = "inpainter"

    def inpaint(self, ref, mask):
        mask = (np.asarray(mask) > 0)
        resp = self._post(mask=img_to_b64(mask.astype(np.uint8) * 255),
                          **self._ref_field(ref))
        out = b64_to_img(resp["image"])
        if out.shape != ref.array.shape:
            raise ClientError("inpainter changed the image shape")
        # outside-mask pixels are contractually untouched
        return np.where(mask[..., None], out, ref.array)


class DepthClient(_Client):
    kind = "depth"

    def estimate_depth(self, ref):
        resp = self._post(**self._ref_field(ref))
        depth = np.asarray(resp["depth"], dtype=np.float64)
        if depth.shape != ref.array.shape[:2]:
            raise ClientError(
                f"depth shape {depth.shape} does not match image {ref.array.shape[:2]}")
        if not np.isfinite(depth).all():
            raise ClientError("non-finite depth values")
        if (depth <= 0).any():
            self.flags.append(f"clamped {(depth <= 0).sum()} non-positive depths")
            depth = np.maximum(depth, 1e-3)
        return depth


class EmbedderClient(_Client):
    kind = "embedder"

    def embed(self, item):
        if isinstance(item, str):
            resp = self._post(text=item)
        else:
            resp = self._post(image=img_to_b64(np.asarray(item)))
        v = np.asarray(resp["vector"], dtype=np.float32)
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > 1e-4:
            v = v / n
        return v

    def similarity(self, a, b):
        return float(np.dot(self.embed(a), self.embed(b)))


class LlmClient(_Client):
    kind = "llm"

    def extract_label(self, caption):
        if not caption.strip():
            raise ClientError("empty caption")
        prompt = LABEL_PROMPT_TEMPLATE.format(caption=caption)
        resp = self._post(prompt=prompt, prompt_version=PROMPT_VERSION)
        return resp["label"].strip().lower()


@dataclass
class ClientSet:
    tagger: TaggerClient
    detector: DetectorClient
    segmenter: SegmenterClient
    captioner: CaptionerClient
    inpainter: InpainterClient
    depth: DepthClient
    embedder: EmbedderClient
    llm: LlmClient
    config: dict = field(default_factory=dict)


def load_clients(config=None, session=None):
    """Build a ClientSet from a config mapping (or YAML/JSON file path).

    Each kind maps to "mock" or a ClientConfig dict. Defaults to all-mock.
    """
    if config is None:
        config = {}
    if isinstance(config, (str, Path)):
        import yaml

        config = yaml.safe_load(Path(config).read_text()) or {}
    seed = config.get("mock_seed", 0)
    embed_dim = config.get("embed_dim", 64)
    min_score = config.get("detector_min_score", 0.35)
    entries = config.get("clients", {})
    unknown = set(entries) - set(KINDS)
    if unknown:
        raise ValueError(f"unknown client kinds in config: {sorted(unknown)}")
    mock = MockTransport(seed=seed, embed_dim=embed_dim)

    def transport_for(kind):
        spec = entries.get(kind, "mock")
        if spec == "mock":
            return mock
        if isinstance(spec, dict):
            return HttpTransport(ClientConfig(**spec), session=session)
        raise ValueError(f"bad client spec for {kind!r}: {spec!r}")

    return ClientSet(
        tagger=TaggerClient(transport_for("tagger")),
        detector=DetectorClient(transport_for("detector"), min_score=min_score),
        segmenter=SegmenterClient(transport_for("segmenter")),
        captioner=CaptionerClient(transport_for("captioner")),
        inpainter=InpainterClient(transport_for("inpainter")),
        depth=DepthClient(transport_for("depth")),
        embedder=EmbedderClient(transport_for("embedder")),
        llm=LlmClient(transport_for("llm")),
        config=dict(config),
    )
