import json
import threading

import pytest

from volterra_edit.rating import (
    JournalStore,
    RatingConflict,
    RatingError,
    RatingService,
    UnknownSession,
    create_app,
    load_samples,
)

MODELS = ["baseline_a", "baseline_b", "baseline_c", "ours", "ground_truth"]


def make_items(n=6):
    items = []
    for i in range(n):
        task = "remove" if i % 2 == 0 else "add"
        items.append({
            "item_id": f"item-{i}",
            "source": f"media/src_{i}.png",
            "instruction": f"remove the cat {i}" if task == "remove" else f"add a cat {i}",
            "task": task,
            "candidates": [{"model_tag": m, "image": f"media/{m}_{i}.png"}
                           for m in MODELS],
        })
    return items


@pytest.fixture()
def service(tmp_path):
    return RatingService(make_items(), tmp_path / "journal.jsonl")


class TestJournal:
    def test_roundtrip(self, tmp_path):
        store = JournalStore(tmp_path / "j.jsonl")
        store.append({"type": "rating", "rating": 3})
        store.append({"type": "rating", "rating": 5})
        records, dropped = store.replay()
        assert [r["rating"] for r in records] == [3, 5]
        assert dropped == 0

    def test_torn_tail_dropped(self, tmp_path):
        path = tmp_path / "j.jsonl"
        store = JournalStore(path)
        store.append({"type": "rating", "rating": 3})
        store.close()
        with open(path, "a") as f:
            f.write('{"r": {"type": "rating", "rating": 5}, "sum": "')  # torn line
        records, dropped = JournalStore(path).replay()
        assert len(records) == 1 and dropped == 1

    def test_corrupted_checksum_dropped(self, tmp_path):
        path = tmp_path / "j.jsonl"
        store = JournalStore(path)
        store.append({"type": "rating", "rating": 3})
        store.close()
        text = path.read_text().replace('"rating":3', '"rating":5')
        path.write_text(text)
        records, dropped = JournalStore(path).replay()
        assert records == [] and dropped == 1

    def test_compaction_keeps_valid_records(self, tmp_path):
        path = tmp_path / "j.jsonl"
        store = JournalStore(path)
        store.append({"type": "rating", "rating": 1})
        with open(path, "a") as f:
            f.write("garbage\n")
        store.append({"type": "rating", "rating": 2})
        kept, dropped = store.compact(tmp_path / "snap.jsonl")
        assert kept == 2 and dropped == 1
        records, d2 = JournalStore(tmp_path / "snap.jsonl").replay()
        assert len(records) == 2 and d2 == 0


class TestSessions:
    def test_seeded_shuffle_reproducible(self, service):
        s1 = service.create_session("eval-1", seed=5)
        s2 = service.create_session("eval-2", seed=5)
        s3 = service.create_session("eval-3", seed=6)
        assert s1.item_order == s2.item_order
        assert s1.item_order != s3.item_order

    def test_order_is_permutation(self, service):
        sess = service.create_session("eval-1", seed=0)
        assert sorted(sess.item_order) == sorted(service.item_ids)

    def test_concurrent_creation_distinct(self, tmp_path):
        service = RatingService(make_items(), tmp_path / "j.jsonl")
        sessions = []
        lock = threading.Lock()

        def create(i):
            s = service.create_session(f"eval-{i}")
            with lock:
                sessions.append(s.session_id)
        threads = [threading.Thread(target=create, args=(i,)) for i in range(25)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(set(sessions)) == 25
        # all persisted: a fresh service instance sees all 25
        reloaded = RatingService(make_items(), tmp_path / "j.jsonl")
        assert len(reloaded.sessions) == 25

    def test_empty_sample_set_config_error(self, tmp_path):
        with pytest.raises(RatingError):
            RatingService([], tmp_path / "j.jsonl")


class TestNextItem:
    def test_fresh_session_first_item(self, service):
        sess = service.create_session("e", seed=1)
        payload = service.next_item(sess.session_id)
        assert payload["item_id"] == sess.item_order[0]
        assert payload["progress"] == 0.0

    def test_payload_never_contains_model_tags(self, service):
        sess = service.create_session("e", seed=1)
        while True:
            payload = service.next_item(sess.session_id)
            if payload.get("done"):
                break
            blob = json.dumps(payload)
            for tag in MODELS:
                assert tag not in blob
            for cand in payload["candidates"]:
                service.submit_rating(sess.session_id, payload["item_id"],
                                      cand["blind_id"], 3)

    def test_done_after_all_rated(self, service):
        sess = service.create_session("e", seed=2)
        for item_id in sess.item_order:
            for blind_id in sess.candidate_order[item_id]:
                service.submit_rating(sess.session_id, item_id, blind_id, 4)
        assert service.next_item(sess.session_id)["done"] is True

    def test_unknown_session_404(self, service):
        with pytest.raises(UnknownSession):
            service.next_item("sess-nope")


class TestSubmitRating:
    def test_out_of_range_rejected(self, service):
        sess = service.create_session("e", seed=3)
        item = sess.item_order[0]
        blind = sess.candidate_order[item][0]
        for bad in (0, 6, 2.5, "3", True):
            with pytest.raises(RatingError):
                service.submit_rating(sess.session_id, item, blind, bad)

    def test_exact_duplicate_idempotent(self, service, tmp_path):
        sess = service.create_session("e", seed=3)
        item = sess.item_order[0]
        blind = sess.candidate_order[item][0]
        a = service.submit_rating(sess.session_id, item, blind, 3)
        b = service.submit_rating(sess.session_id, item, blind, 3)
        assert not a["duplicate"] and b["duplicate"]
        records, _ = service.store.replay()
        ratings = [r for r in records if r["type"] == "rating"]
        assert len(ratings) == 1

    def test_conflicting_rating_rejected(self, service):
        sess = service.create_session("e", seed=3)
        item = sess.item_order[0]
        blind = sess.candidate_order[item][0]
        service.submit_rating(sess.session_id, item, blind, 3)
        with pytest.raises(RatingConflict):
            service.submit_rating(sess.session_id, item, blind, 4)

    def test_acked_rating_survives_restart(self, tmp_path):
        items = make_items()
        service = RatingService(items, tmp_path / "j.jsonl")
        sess = service.create_session("e", seed=4)
        item = sess.item_order[0]
        blind = sess.candidate_order[item][0]
        service.submit_rating(sess.session_id, item, blind, 5)
        # simulate crash: no clean shutdown, fresh process replays the journal
        revived = RatingService(items, tmp_path / "j.jsonl")
        assert revived.sessions[sess.session_id].rated[(item, blind)] == 5
        report = revived.aggregate_report()
        total = sum(r["n"] for r in report["rows"]) + report.get(
            "ground_truth", {}).get("n", 0)
        assert total == 1


def plant_ratings(service, spec):
    """spec: {(model, task): [ratings]}; ground_truth key uses task=None."""
    sess = service.create_session("planter", seed=0)
    queues = {k: list(v) for k, v in spec.items()}
    for item_id in sess.item_order:
        task = service.items[item_id]["task"]
        for blind_id in sess.candidate_order[item_id]:
            tag = sess.blind_map[item_id][blind_id]
            key = (tag, None if tag == "ground_truth" else task)
            queue = queues.get(key)
            if queue:
                service.submit_rating(sess.session_id, item_id, blind_id, queue.pop(0))


class TestAggregateReport:
    def test_all_fives(self, service):
        sess = service.create_session("e", seed=9)
        for item_id in sess.item_order:
            for blind_id in sess.candidate_order[item_id]:
                service.submit_rating(sess.session_id, item_id, blind_id, 5)
        report = service.aggregate_report()
        assert all(r["average"] == 5.0 for r in report["rows"])
        assert report["ground_truth"]["average"] == 5.0

    def test_half_up_rounding(self, tmp_path):
        # 4.75 must round to 4.8 (half-up), not 4.7/4.8-bankers ambiguity
        items = make_items(4)
        service = RatingService(items, tmp_path / "j.jsonl")
        plant_ratings(service, {("ours", "remove"): [5, 4], ("ours", "add"): [5, 5]})
        # remove avg = 4.5 -> 4.5 ; add avg = 5
        report = service.aggregate_report()
        by = {(r["model"], r["task"]): r["average"] for r in report["rows"]}
        assert by[("ours", "remove")] == 4.5
        from volterra_edit.rating import _round_half_up

        assert _round_half_up(19, 4) == 4.8     # 4.75 rounds up
        assert _round_half_up(5, 4) == 1.3      # 1.25 rounds up
        assert _round_half_up(29, 10) == 2.9

    def test_permutation_invariance(self, tmp_path):
        items = make_items(4)
        s1 = RatingService(items, tmp_path / "a.jsonl")
        s2 = RatingService(items, tmp_path / "b.jsonl")
        spec = {("baseline_a", "remove"): [1, 2], ("baseline_a", "add"): [3, 4]}
        plant_ratings(s1, spec)
        plant_ratings(s2, {k: list(reversed(v)) for k, v in spec.items()})
        assert s1.aggregate_report()["rows"] == s2.aggregate_report()["rows"]

    def test_matches_bruteforce_recomputation(self, tmp_path):
        items = make_items(6)
        service = RatingService(items, tmp_path / "j.jsonl")
        import random

        rnd = random.Random(0)
        sess = service.create_session("e", seed=1)
        for item_id in sess.item_order:
            for blind_id in sess.candidate_order[item_id]:
                service.submit_rating(sess.session_id, item_id, blind_id,
                                      rnd.randint(1, 5))
        report = service.aggregate_report()
        # brute force from the raw journal
        records, _ = service.store.replay()
        sessions = {r["session_id"]: r for r in records if r["type"] == "session"}
        sums, counts = {}, {}
        for r in records:
            if r["type"] != "rating":
                continue
            tag = sessions[r["session_id"]]["blind_map"][r["item_id"]][r["blind_id"]]
            task = next(it["task"] for it in make_items(6) if it["item_id"] == r["item_id"])
            key = (tag, "gt" if tag == "ground_truth" else task)
            sums[key] = sums.get(key, 0) + r["rating"]
            counts[key] = counts.get(key, 0) + 1
        for row in report["rows"]:
            key = (row["model"], row["task"])
            mean = sums[key] / counts[key]
            assert row["average"] == pytest.approx(round(mean, 1), abs=0.05001)


@pytest.fixture()
def client(service, tmp_path):
    from fastapi.testclient import TestClient

    media = tmp_path / "media"
    media.mkdir(exist_ok=True)
    (media / "x.png").write_bytes(b"\x89PNG\r\n\x1a\n")
    return TestClient(create_app(service, media_root=media))


class TestHttpApi:
    def test_session_flow(self, client):
        resp = client.post("/sessions", json={"evaluator_id": "e1", "seed": 3})
        assert resp.status_code == 200
        sid = resp.json()["session_id"]
        nxt = client.get(f"/sessions/{sid}/next")
        assert nxt.status_code == 200
        payload = nxt.json()
        assert payload["done"] is False
        cand = payload["candidates"][0]
        ack = client.post("/ratings", json={
            "session_id": sid, "item_id": payload["item_id"],
            "blind_id": cand["blind_id"], "rating": 4})
        assert ack.status_code == 200 and ack.json()["ok"]

    def test_evaluator_facing_payloads_contain_no_model_names(self, client):
        resp = client.post("/sessions", json={"evaluator_id": "e1", "seed": 3})
        sid = resp.json()["session_id"]
        while True:
            nxt = client.get(f"/sessions/{sid}/next")
            for tag in MODELS:
                assert tag.encode() not in nxt.content
            payload = nxt.json()
            if payload["done"]:
                break
            for cand in payload["candidates"]:
                ack = client.post("/ratings", json={
                    "session_id": sid, "item_id": payload["item_id"],
                    "blind_id": cand["blind_id"], "rating": 2})
                for tag in MODELS:
                    assert tag.encode() not in ack.content

    def test_unknown_session_is_404(self, client):
        assert client.get("/sessions/nope/next").status_code == 404

    def test_conflict_is_409(self, client):
        sid = client.post("/sessions", json={"evaluator_id": "e"}).json()["session_id"]
        payload = client.get(f"/sessions/{sid}/next").json()
        cand = payload["candidates"][0]
        body = {"session_id": sid, "item_id": payload["item_id"],
                "blind_id": cand["blind_id"], "rating": 3}
        assert client.post("/ratings", json=body).status_code == 200
        body["rating"] = 5
        assert client.post("/ratings", json=body).status_code == 409

    def test_out_of_range_rejected(self, client):
        sid = client.post("/sessions", json={"evaluator_id": "e"}).json()["session_id"]
        payload = client.get(f"/sessions/{sid}/next").json()
        body = {"session_id": sid, "item_id": payload["item_id"],
                "blind_id": payload["candidates"][0]["blind_id"], "rating": 0}
        assert client.post("/ratings", json=body).status_code == 400

    def test_media_served(self, client):
        assert client.get("/media/x.png").status_code == 200


def test_load_samples_validation(tmp_path):
    path = tmp_path / "samples.json"
    path.write_text(json.dumps({"items": [{"item_id": "x"}]}))
    with pytest.raises(RatingError):
        load_samples(path)
    path.write_text(json.dumps({"items": []}))
    with pytest.raises(RatingError):
        load_samples(path)
