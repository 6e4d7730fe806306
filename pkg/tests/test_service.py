import json
import warnings
from io import StringIO

import numpy as np
import pytest
from fastapi.testclient import TestClient

from _helpers import toy_corpus
from _service_harness import durability_trial, make_demo_study
from salperc.features import SaliencyMap, Sentence, Token
from salperc.records import read_csv, read_jsonl
from salperc.render import render_bars, render_heatmap
from salperc.service import create_app, create_study
from salperc.simulate import make_study_plan


@pytest.fixture
def study(tmp_path):
    plan, sentences = make_demo_study(tmp_path, n_sentences=6, n_participants=3)
    app = create_app(tmp_path)
    return TestClient(app), plan, sentences


def open_session(client, worker="alice", study_id="demo"):
    r = client.post(f"/studies/{study_id}/sessions", json={"worker_id": worker})
    assert r.status_code == 201, r.text
    return r.json()["session_id"]


def answer(client, sid, rating=4, ct=2.0, comment=""):
    nxt = client.get(f"/sessions/{sid}/next").json()
    assert not nxt["done"]
    r = client.post(f"/sessions/{sid}/ratings",
                    json={"cursor": nxt["cursor"], "rating": rating,
                          "completion_time_s": ct, "comment": comment})
    assert r.status_code == 200, r.text
    return nxt, r.json()


def run_through(client, sid, rating_for=None):
    payloads = []
    while True:
        nxt = client.get(f"/sessions/{sid}/next").json()
        if nxt["done"]:
            return payloads
        rating = rating_for(nxt) if rating_for else 4
        payloads.append(nxt)
        r = client.post(f"/sessions/{sid}/ratings",
                        json={"cursor": nxt["cursor"], "rating": rating,
                              "completion_time_s": 2.0})
        assert r.status_code == 200, r.text


class TestSessions:
    def test_first_session_takes_slot_zero(self, study):
        client, plan, _ = study
        sid = open_session(client)
        assert sid.endswith("-0000")
        nxt = client.get(f"/sessions/{sid}/next").json()
        assert nxt["progress"] == {"answered": 0,
                                   "total": len(plan.participants[0].items)}

    def test_duplicate_active_worker_conflict(self, study):
        client, _, _ = study
        open_session(client, "bob")
        r = client.post("/studies/demo/sessions", json={"worker_id": "bob"})
        assert r.status_code == 409
        assert r.json()["detail"]["code"] == "worker-active"

    def test_completed_worker_may_rejoin(self, study):
        client, _, _ = study
        sid = open_session(client, "carol")
        run_through(client, sid)
        sid2 = open_session(client, "carol")
        assert sid2 != sid

    def test_capacity_exhausted(self, tmp_path):
        make_demo_study(tmp_path, n_participants=1)
        client = TestClient(create_app(tmp_path))
        open_session(client, "w-a")
        r = client.post("/studies/demo/sessions", json={"worker_id": "w-b"})
        assert r.status_code == 409
        assert r.json()["detail"]["code"] == "plan-exhausted"

    def test_unknown_study_and_session(self, study):
        client, _, _ = study
        r = client.post("/studies/nope/sessions", json={"worker_id": "x"})
        assert r.status_code == 404
        assert r.json()["detail"]["code"] == "unknown-study"
        r = client.get("/sessions/ghost/next")
        assert r.status_code == 404
        assert r.json()["detail"]["code"] == "unknown-session"


class TestNextItem:
    def test_idempotent_read(self, study):
        client, _, _ = study
        sid = open_session(client)
        a = client.get(f"/sessions/{sid}/next").json()
        b = client.get(f"/sessions/{sid}/next").json()
        assert a == b
        answer(client, sid)
        c = client.get(f"/sessions/{sid}/next").json()
        assert c["cursor"] == 1 and c != a

    def test_question_names_target_word(self, study):
        client, plan, sentences = study
        by_id = {s.id: s for s in sentences}
        for t in plan.trap_sentences:
            by_id[t.id] = t
        sid = open_session(client)
        items = plan.participants[0].items
        for k in range(len(items)):
            nxt = client.get(f"/sessions/{sid}/next").json()
            item = items[k]
            word = by_id[item.sentence_id].tokens[item.target_token - 1].surface
            assert nxt["item"]["question"] == (
                f'How important (1-7) do you think the word "{word}" '
                "was to the model?")
            answer(client, sid)

    def test_trap_payload_shape_indistinguishable(self, study):
        client, plan, _ = study
        sid = open_session(client)
        items = plan.participants[0].items
        key_sets = []
        for k in range(len(items)):
            nxt = client.get(f"/sessions/{sid}/next").json()
            key_sets.append((set(nxt), set(nxt["item"])))
            answer(client, sid)
        assert len(set(map(str, key_sets))) == 1
        assert "is_trap" not in str(key_sets[0])
        assert any(it.is_trap for it in items)

    def test_end_of_study_marker(self, study):
        client, plan, _ = study
        sid = open_session(client)
        run_through(client, sid)
        nxt = client.get(f"/sessions/{sid}/next").json()
        assert nxt["done"] is True
        assert nxt["progress"]["answered"] == nxt["progress"]["total"]


class TestMarkup:
    def test_markup_equals_renderer_output(self, tmp_path):
        plan, sentences = make_demo_study(tmp_path, n_sentences=6,
                                          n_participants=2,
                                          mode="within-subject", seed=4)
        client = TestClient(create_app(tmp_path))
        by_id = {s.id: s for s in sentences}
        for t in plan.trap_sentences:
            by_id[t.id] = t
        sid = open_session(client)
        items = plan.participants[0].items
        seen = set()
        for k in range(len(items)):
            nxt = client.get(f"/sessions/{sid}/next").json()
            item = items[k]
            sent = by_id[item.sentence_id]
            if item.condition == "bars":
                expected = render_bars(sent, item.saliency)
            else:
                expected = render_heatmap(sent, item.saliency).svg
            assert nxt["item"]["markup"] == expected
            seen.add(item.condition)
            answer(client, sid)
        assert seen == {"saliency", "corrected", "bars"}


class TestSubmit:
    def test_rating_range_enforced(self, study):
        client, _, _ = study
        sid = open_session(client)
        nxt = client.get(f"/sessions/{sid}/next").json()
        for bad in (0, 8):
            r = client.post(f"/sessions/{sid}/ratings",
                            json={"cursor": nxt["cursor"], "rating": bad,
                                  "completion_time_s": 2.0})
            assert r.status_code == 422
            assert r.json()["detail"]["code"] == "bad-rating"

    def test_nonpositive_completion_time_rejected(self, study):
        client, _, _ = study
        sid = open_session(client)
        r = client.post(f"/sessions/{sid}/ratings",
                        json={"cursor": 0, "rating": 4,
                              "completion_time_s": 0.0})
        assert r.status_code == 422
        assert r.json()["detail"]["code"] == "bad-completion-time"

    def test_double_submit_is_cursor_conflict(self, study):
        client, _, _ = study
        sid = open_session(client)
        nxt, ack = answer(client, sid)
        r = client.post(f"/sessions/{sid}/ratings",
                        json={"cursor": nxt["cursor"], "rating": 5,
                              "completion_time_s": 2.0})
        assert r.status_code == 409
        assert r.json()["detail"]["code"] == "cursor-conflict"
        # rejected submission must not advance anything
        assert client.get(f"/sessions/{sid}/next").json()["cursor"] == ack["cursor"]

    def test_submit_after_completion_conflict(self, study):
        client, _, _ = study
        sid = open_session(client)
        run_through(client, sid)
        r = client.post(f"/sessions/{sid}/ratings",
                        json={"cursor": 99, "rating": 4,
                              "completion_time_s": 2.0})
        assert r.status_code == 409
        assert r.json()["detail"]["code"] == "session-complete"

    def test_trap_failure_does_not_abort(self, study):
        client, plan, _ = study
        sid = open_session(client)
        items = plan.participants[0].items

        def wrong_on_traps(nxt):
            item = items[nxt["cursor"]]
            if item.is_trap:
                return item.trap_expected % 7 + 1
            return 4

        run_through(client, sid, wrong_on_traps)
        assert client.get(f"/sessions/{sid}/next").json()["done"]


class TestExport:
    def _filled_study(self, tmp_path):
        sentences = [
            Sentence("n1", (Token("short"), Token("words"), Token("here"))),
            Sentence("n2", (Token("a" * 21), Token("b" * 25))),
            Sentence("n3", (Token("plain"), Token("text"), Token("row"))),
        ]
        plan = make_study_plan(sentences, 2, seed=7)
        create_study(tmp_path, "flags", plan, sentences)
        client = TestClient(create_app(tmp_path))
        items = plan.participants[0].items

        sid = open_session(client, "honest", "flags")

        def honest(nxt):
            item = items[nxt["cursor"]]
            return item.trap_expected if item.is_trap else 3

        while True:
            nxt = client.get(f"/sessions/{sid}/next").json()
            if nxt["done"]:
                break
            item = items[nxt["cursor"]]
            ct = 61.0 if item.sentence_id == "n3" else 2.0
            r = client.post(f"/sessions/{sid}/ratings",
                            json={"cursor": nxt["cursor"],
                                  "rating": honest(nxt),
                                  "completion_time_s": ct})
            assert r.status_code == 200

        sid2 = open_session(client, "allwrong", "flags")
        items2 = plan.participants[1].items

        def wrong(nxt):
            item = items2[nxt["cursor"]]
            return (item.trap_expected % 7 + 1) if item.is_trap else 3

        run_through(client, sid2, wrong)
        return client, plan

    def test_flag_columns(self, tmp_path):
        client, plan = self._filled_study(tmp_path)
        text = client.get("/studies/flags/export").text
        rows = list(__import__("csv").DictReader(StringIO(text)))
        assert {"ct_outlier", "len_outlier", "trap_fail", "is_trap"} <= set(rows[0])
        by = lambda **kv: [r for r in rows
                           if all(r[k] == v for k, v in kv.items())]
        # slow answers on sentence n3 only
        assert all(r["sentence_id"] == "n3" for r in by(ct_outlier="1"))
        assert len(by(ct_outlier="1")) == 1
        # every n2 token is 21+ chars
        assert {r["sentence_id"] for r in by(len_outlier="1")} == {"n2"}
        # the all-wrong worker gets every record flagged
        assert {r["worker_id"] for r in by(trap_fail="1")} == {"allwrong"}
        assert all(r["worker_id"] == "allwrong"
                   for r in by(trap_fail="1"))
        trap_rows = by(is_trap="1")
        assert len(trap_rows) == 6  # 3 traps x 2 workers
        assert all(r["sentence_id"].startswith("trap-") for r in trap_rows)

    def test_paper_filters_drop_flagged(self, tmp_path):
        client, plan = self._filled_study(tmp_path)
        full = list(__import__("csv").DictReader(
            StringIO(client.get("/studies/flags/export").text)))
        kept = list(__import__("csv").DictReader(StringIO(
            client.get("/studies/flags/export",
                       params={"paper-filters": "true"}).text)))
        flagged = [r for r in full if "1" in (r["ct_outlier"], r["len_outlier"],
                                              r["trap_fail"], r["is_trap"])]
        assert len(kept) == len(full) - len(flagged)
        assert all(r["worker_id"] == "honest" for r in kept)

    def test_reexport_byte_identical(self, tmp_path):
        client, _ = self._filled_study(tmp_path)
        a = client.get("/studies/flags/export").text
        b = client.get("/studies/flags/export").text
        assert a == b

    def test_jsonl_mirrors_csv_records(self, tmp_path):
        client, _ = self._filled_study(tmp_path)
        csv_recs = read_csv(StringIO(client.get("/studies/flags/export").text))
        jl = client.get("/studies/flags/export", params={"format": "jsonl"}).text
        jl_recs = list(read_jsonl(StringIO(jl)))
        assert jl_recs == csv_recs

    def test_bad_format_rejected(self, study):
        client, _, _ = study
        r = client.get("/studies/demo/export", params={"format": "xml"})
        assert r.status_code == 422
        assert r.json()["detail"]["code"] == "bad-format"

    def test_export_feeds_model_fit(self, tmp_path):
        rng = np.random.default_rng(12)
        sentences, freq = toy_corpus(rng, 12)
        plan = make_study_plan(sentences, 2, seed=12)
        create_study(tmp_path, "fitme", plan, sentences, freq_table=freq)
        client = TestClient(create_app(tmp_path))
        for worker in ("wa", "wb"):
            sid = open_session(client, worker, "fitme")
            k = 0
            while True:
                nxt = client.get(f"/sessions/{sid}/next").json()
                if nxt["done"]:
                    break
                client.post(f"/sessions/{sid}/ratings",
                            json={"cursor": nxt["cursor"],
                                  "rating": k % 7 + 1,
                                  "completion_time_s": 2.0})
                k += 1
        text = client.get("/studies/fitme/export",
                          params={"paper-filters": "true"}).text
        records = read_csv(StringIO(text))
        assert records

        from salperc.design import ModelSpec, SmoothTerm
        from salperc.model import fit

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # tiny n, convergence noise is fine
            model = fit(records, ModelSpec(
                (SmoothTerm("saliency", num_basis=5, lam=10.0),),
                double_penalty=False))
        assert np.all(np.isfinite(model.beta))


class TestRestart:
    def test_sessions_survive_app_rebuild(self, tmp_path):
        make_demo_study(tmp_path, n_sentences=6, n_participants=3)
        client = TestClient(create_app(tmp_path))
        sid = open_session(client, "dana")
        answer(client, sid, rating=6)
        answer(client, sid, rating=2)
        before = client.get("/studies/demo/export").text

        fresh = TestClient(create_app(tmp_path))
        nxt = fresh.get(f"/sessions/{sid}/next").json()
        assert nxt["cursor"] == 2
        assert fresh.get("/studies/demo/export").text == before
        # allocation continues after the restored sessions
        sid2 = open_session(fresh, "erin")
        assert sid2.endswith("-0001")

    def test_hard_kill_durability(self, tmp_path):
        make_demo_study(tmp_path, study_id="kill", n_sentences=6,
                        n_participants=4, seed=3)
        for trial, kill_after in enumerate((2, 5)):
            acked, got = durability_trial(tmp_path, "kill",
                                          f"dw{trial}", kill_after)
            assert got == acked
