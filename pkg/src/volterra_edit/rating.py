"""Blind human-evaluation service: sessions over a sampled item set,
anonymized candidates, 1-5 ratings on an append-only journal, and the
per-(model, task) average report.

Model identity lives only in the server-side blind map; nothing sent to an
evaluator ever carries a model tag. The journal is newline-delimited JSON
with a per-line checksum; a torn tail from a crash is dropped on replay,
acknowledged ratings are flushed to disk before the ack.
"""

import hashlib
import json
import secrets
import threading
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np


class RatingError(Exception):
    status = 400


class UnknownSession(RatingError):
    status = 404


class RatingConflict(RatingError):
    status = 409


class JournalStore:
    """Append-only NDJSON with per-record sha256 checksum."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")

    @staticmethod
    def _checksum(payload_json):
        return hashlib.sha256(payload_json.encode("utf-8")).hexdigest()[:12]

    def append(self, record):
        payload = json.dumps(record, sort_keys=True, separators=(",", ":"))
        line = json.dumps({"r": record, "sum": self._checksum(payload)},
                          sort_keys=True, separators=(",", ":"))
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            import os

            os.fsync(self._fh.fileno())

    def replay(self):
        """(records, dropped): dropped counts checksum-failing/torn lines."""
        records, dropped = [], 0
        if not self.path.exists():
            return records, dropped
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                wrapper = json.loads(line)
                payload = json.dumps(wrapper["r"], sort_keys=True, separators=(",", ":"))
                if self._checksum(payload) != wrapper["sum"]:
                    dropped += 1
                    continue
                records.append(wrapper["r"])
            except (json.JSONDecodeError, KeyError, TypeError):
                dropped += 1
        return records, dropped

    def compact(self, snapshot_path):
        records, dropped = self.replay()
        snapshot = Path(snapshot_path)
        tmp = snapshot.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for rec in records:
                payload = json.dumps(rec, sort_keys=True, separators=(",", ":"))
                f.write(json.dumps({"r": rec, "sum": self._checksum(payload)},
                                   sort_keys=True, separators=(",", ":")) + "\n")
        tmp.replace(snapshot)
        return len(records), dropped

    def close(self):
        self._fh.close()


@dataclass
class Session:
    session_id: str
    evaluator_id: str
    item_order: list
    candidate_order: dict          # item_id -> [blind_id, ...]
    blind_map: dict                # item_id -> {blind_id: model_tag}, server-side only
    rated: dict = field(default_factory=dict)  # (item_id, blind_id) -> rating

    @property
    def cursor(self):
        done = 0
        for item_id in self.item_order:
            if all((item_id, b) in self.rated for b in self.candidate_order[item_id]):
                done += 1
            else:
                break
        return done


def load_samples(path):
    """Samples file: JSON list of items with candidates (model_tag + image)."""
    data = json.loads(Path(path).read_text())
    items = data["items"] if isinstance(data, dict) else data
    if not items:
        raise RatingError("sample set is empty")
    for item in items:
        for key in ("item_id", "source", "instruction", "task", "candidates"):
            if key not in item:
                raise RatingError(f"sample item missing {key!r}")
    return items


class RatingService:
    def __init__(self, items, store_path):
        if not items:
            raise RatingError("sample set is empty")
        self.items = {it["item_id"]: it for it in items}
        self.item_ids = [it["item_id"] for it in items]
        self.store = JournalStore(store_path)
        self.sessions = {}
        self._lock = threading.Lock()
        self.recovered_drops = self._replay()

    def _replay(self):
        records, dropped = self.store.replay()
        for rec in records:
            if rec["type"] == "session":
                self.sessions[rec["session_id"]] = Session(
                    session_id=rec["session_id"], evaluator_id=rec["evaluator_id"],
                    item_order=rec["item_order"],
                    candidate_order=rec["candidate_order"],
                    blind_map=rec["blind_map"])
            elif rec["type"] == "rating":
                sess = self.sessions.get(rec["session_id"])
                if sess is not None:
                    sess.rated[(rec["item_id"], rec["blind_id"])] = rec["rating"]
        return dropped

    # -- session flow -----------------------------------------------------
    def create_session(self, evaluator_id, seed=None):
        if not evaluator_id:
            raise RatingError("evaluator_id required")
        rng = np.random.default_rng(seed if seed is not None
                                    else secrets.randbits(63))
        order = list(rng.permutation(self.item_ids))
        candidate_order, blind_map = {}, {}
        for item_id in order:
            cands = self.items[item_id]["candidates"]
            perm = rng.permutation(len(cands))
            blinds, mapping = [], {}
            for j, ci in enumerate(perm):
                blind_id = f"cand-{rng.integers(0, 2**48):012x}-{j}"
                blinds.append(blind_id)
                mapping[blind_id] = cands[int(ci)]["model_tag"]
            candidate_order[item_id] = blinds
            blind_map[item_id] = mapping
        with self._lock:
            session_id = f"sess-{secrets.token_hex(8)}"
            sess = Session(session_id=session_id, evaluator_id=evaluator_id,
                           item_order=order, candidate_order=candidate_order,
                           blind_map=blind_map)
            self.store.append({"type": "session", "session_id": session_id,
                               "evaluator_id": evaluator_id, "item_order": order,
                               "candidate_order": candidate_order,
                               "blind_map": blind_map})
            self.sessions[session_id] = sess
        return sess

    def _session(self, session_id):
        sess = self.sessions.get(session_id)
        if sess is None:
            raise UnknownSession(f"unknown session {session_id!r}")
        return sess

    def next_item(self, session_id):
        """Client payload for the item at the cursor. Candidate images hide
        behind opaque per-session routes: a raw file path could leak the
        producing model through its name."""
        sess = self._session(session_id)
        cursor = sess.cursor
        total = len(sess.item_order)
        if cursor >= total:
            return {"done": True, "progress": 1.0}
        item_id = sess.item_order[cursor]
        item = self.items[item_id]
        candidates = []
        for blind_id in sess.candidate_order[item_id]:
            candidates.append({
                "blind_id": blind_id,
                "image": f"/candidates/{session_id}/{item_id}/{blind_id}",
                "rated": (item_id, blind_id) in sess.rated,
            })
        return {
            "done": False,
            "item_id": item_id,
            "source": item["source"],
            "instruction": item["instruction"],
            "task": item["task"],
            "candidates": candidates,
            "progress": cursor / total,
            "items_total": total,
        }

    def candidate_image(self, session_id, item_id, blind_id):
        """Server-side de-anonymization of a blind candidate to its file."""
        sess = self._session(session_id)
        mapping = sess.blind_map.get(item_id)
        if not mapping or blind_id not in mapping:
            raise RatingError(f"unknown candidate {blind_id!r}")
        tag = mapping[blind_id]
        for cand in self.items[item_id]["candidates"]:
            if cand["model_tag"] == tag:
                return cand["image"]
        raise RatingError(f"candidate image missing for {item_id!r}")

    def submit_rating(self, session_id, item_id, blind_id, rating):
        if not isinstance(rating, int) or isinstance(rating, bool) or not 1 <= rating <= 5:
            raise RatingError(f"rating must be an integer in [1,5], got {rating!r}")
        sess = self._session(session_id)
        if item_id not in sess.blind_map or blind_id not in sess.blind_map[item_id]:
            raise RatingError(f"unknown candidate {blind_id!r} for item {item_id!r}")
        with self._lock:
            existing = sess.rated.get((item_id, blind_id))
            if existing is not None:
                if existing == rating:
                    return {"ok": True, "duplicate": True}
                raise RatingConflict(
                    f"{item_id}/{blind_id} already rated {existing}, refusing {rating}")
            self.store.append({"type": "rating", "session_id": session_id,
                               "item_id": item_id, "blind_id": blind_id,
                               "rating": rating})
            sess.rated[(item_id, blind_id)] = rating
        return {"ok": True, "duplicate": False}

    # -- reporting ----------------------------------------------------------
    def aggregate_report(self):
        """De-anonymized per-(model, task) averages, half-up to 1 decimal;
        ground truth collapses to a single row."""
        sums, counts = {}, {}
        gt_sum, gt_n = 0, 0
        for sess in self.sessions.values():
            for (item_id, blind_id), rating in sess.rated.items():
                tag = sess.blind_map[item_id][blind_id]
                task = self.items[item_id]["task"]
                if tag == "ground_truth":
                    gt_sum += rating
                    gt_n += 1
                    continue
                key = (tag, task)
                sums[key] = sums.get(key, 0) + rating
                counts[key] = counts.get(key, 0) + 1
        rows = []
        for (tag, task) in sorted(sums):
            rows.append({"model": tag, "task": task,
                         "average": _round_half_up(sums[(tag, task)], counts[(tag, task)]),
                         "n": counts[(tag, task)]})
        report = {"rows": rows}
        if gt_n:
            report["ground_truth"] = {"average": _round_half_up(gt_sum, gt_n), "n": gt_n}
        return report


def _round_half_up(total, count):
    mean = Decimal(total) / Decimal(count)
    return float(mean.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


# ---------------------------------------------------------------------------
# HTTP surface


def create_app(service: RatingService, media_root=None):
    from fastapi import FastAPI, HTTPException
    from fastapi.middleware.cors import CORSMiddleware
    from pydantic import BaseModel

    app = FastAPI(title="blind rating service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    app.state.service = service

    class SessionRequest(BaseModel):
        evaluator_id: str
        seed: int | None = None

    class RatingRequest(BaseModel):
        session_id: str
        item_id: str
        blind_id: str
        rating: int

    def _http(exc: RatingError):
        return HTTPException(status_code=exc.status, detail=str(exc))

    @app.post("/sessions")
    def create_session(req: SessionRequest):
        try:
            sess = service.create_session(req.evaluator_id, req.seed)
        except RatingError as exc:
            raise _http(exc) from exc
        return {"session_id": sess.session_id, "items_total": len(sess.item_order)}

    @app.get("/sessions/{session_id}/next")
    def next_item(session_id: str):
        try:
            return service.next_item(session_id)
        except RatingError as exc:
            raise _http(exc) from exc

    @app.post("/ratings")
    def submit_rating(req: RatingRequest):
        try:
            return service.submit_rating(req.session_id, req.item_id,
                                         req.blind_id, req.rating)
        except RatingError as exc:
            raise _http(exc) from exc

    @app.get("/report")
    def report():
        return service.aggregate_report()

    if media_root is not None:
        from fastapi.responses import FileResponse
        from fastapi.staticfiles import StaticFiles

        media_root = Path(media_root)

        @app.get("/candidates/{session_id}/{item_id}/{blind_id}")
        def candidate_image(session_id: str, item_id: str, blind_id: str):
            try:
                rel = service.candidate_image(session_id, item_id, blind_id)
            except RatingError as exc:
                raise _http(exc) from exc
            path = (media_root / rel).resolve()
            if media_root.resolve() not in path.parents and path != media_root.resolve():
                raise HTTPException(status_code=400, detail="path escapes media root")
            if not path.exists():
                raise HTTPException(status_code=404, detail="image not found")
            return FileResponse(path)

        app.mount("/media", StaticFiles(directory=str(media_root)), name="media")
    return app
