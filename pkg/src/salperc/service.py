"""HTTP service for running live rating studies.

One study = one directory under the state root, holding the study plan,
the sentence inventory, the lexicons, and an append-only event log.
Sessions allocate plan slots in arrival order; every accepted rating is
fsynced to the log before the request is acknowledged, so process state
is always reconstructible by replaying the log from the top.

Trap items travel through the same payload shape as ordinary items and
a failed trap never aborts the session; exclusion happens at export
time, where outlier and trap-failure flags mark records without
dropping them (unless the caller asks for the filtered variant).
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from io import StringIO
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel

from .features import SaliencyMap, Sentence, Token, extract
from .records import RatingRecord, write_csv, write_jsonl
from .render import render_bars, render_heatmap
from .simulate import StudyPlan, read_plan, write_plan

CT_OUTLIER_S = 60.0
LEN_OUTLIER_CHARS = 20.0
QUESTION_TEMPLATE = ('How important (1-7) do you think the word "{word}" '
                     "was to the model?")


def _fail(status: int, code: str, message: str):
    raise HTTPException(status_code=status,
                        detail={"code": code, "message": message})


def _sentence_to_dict(s: Sentence) -> dict:
    return {
        "id": s.id,
        "language": s.language,
        "tokens": [{"surface": t.surface, "lemma": t.lemma,
                    "deprel": t.deprel, "head": t.head} for t in s.tokens],
    }


def _sentence_from_dict(d: dict) -> Sentence:
    toks = tuple(Token(t["surface"], t.get("lemma"), t.get("deprel"),
                       t.get("head")) for t in d["tokens"])
    return Sentence(d["id"], toks, d.get("language", "en"))


def create_study(state_dir, study_id: str, plan: StudyPlan,
                 sentences, freq_table=None, sentiment_lexicon=None) -> Path:
    """Persist a study definition under the state root."""
    root = Path(state_dir) / study_id
    root.mkdir(parents=True, exist_ok=False)
    with open(root / "plan.jsonl", "w") as f:
        write_plan(plan, f)
    with open(root / "sentences.jsonl", "w") as f:
        for s in sentences:
            f.write(json.dumps(_sentence_to_dict(s)) + "\n")
    with open(root / "lexicons.json", "w") as f:
        json.dump({"frequency": freq_table or {},
                   "sentiment": sentiment_lexicon or {}}, f)
    return root


@dataclass
class Session:
    session_id: str
    worker_id: str
    slot: int
    items: tuple
    cursor: int = 0
    trap_results: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @property
    def status(self) -> str:
        return "complete" if self.cursor >= len(self.items) else "active"

    def progress(self) -> dict:
        return {"answered": self.cursor, "total": len(self.items)}


class _Study:
    """Runtime state of one study: plan, sentences, sessions, log."""

    def __init__(self, root: Path):
        self.root = root
        self.study_id = root.name
        with open(root / "plan.jsonl") as f:
            self.plan = read_plan(f)
        self.sentences = {}
        with open(root / "sentences.jsonl") as f:
            for line in f:
                if line.strip():
                    s = _sentence_from_dict(json.loads(line))
                    self.sentences[s.id] = s
        for trap in self.plan.trap_sentences:
            self.sentences[trap.id] = trap
        lex_path = root / "lexicons.json"
        lex = json.loads(lex_path.read_text()) if lex_path.exists() else {}
        self.freq_table = lex.get("frequency", {})
        self.sentiment_lexicon = lex.get("sentiment", {})
        self.trap_ids = {t.id for t in self.plan.trap_sentences}
        self.sessions: dict[str, Session] = {}
        self.lock = threading.RLock()
        self._log_path = root / "log.jsonl"
        self._replay()
        self._fh = open(self._log_path, "a")

    # -- persistence ----------------------------------------------------

    def _replay(self):
        if not self._log_path.exists():
            return
        with open(self._log_path) as f:
            for line in f:
                if not line.strip():
                    continue
                ev = json.loads(line)
                if ev["type"] == "session":
                    self._add_session(ev["session_id"], ev["worker_id"],
                                      ev["slot"])
                elif ev["type"] == "rating":
                    sess = self.sessions[ev["session_id"]]
                    sess.records.append(RatingRecord.from_json(ev["record"]))
                    if ev["trap_pass"] is not None:
                        sess.trap_results.append(bool(ev["trap_pass"]))
                    sess.cursor += 1

    def _append(self, event: dict):
        # the ack contract: nothing is acknowledged before it is on disk
        self._fh.write(json.dumps(event, separators=(",", ":")) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def _add_session(self, session_id: str, worker_id: str, slot: int) -> Session:
        sess = Session(session_id, worker_id, slot,
                       self.plan.participants[slot].items)
        self.sessions[session_id] = sess
        return sess

    # -- operations -----------------------------------------------------

    def create_session(self, worker_id: str) -> Session:
        with self.lock:
            for sess in self.sessions.values():
                if sess.worker_id == worker_id and sess.status == "active":
                    _fail(409, "worker-active",
                          f"worker {worker_id!r} already has an active session")
            slot = len(self.sessions)
            if slot >= len(self.plan.participants):
                _fail(409, "plan-exhausted",
                      f"all {len(self.plan.participants)} participant slots "
                      "are taken")
            session_id = f"{self.study_id}-{slot:04d}"
            self._append({"type": "session", "session_id": session_id,
                          "worker_id": worker_id, "slot": slot})
            return self._add_session(session_id, worker_id, slot)

    def _markup(self, item, sentence: Sentence) -> str:
        smap = item.saliency
        if not isinstance(smap, SaliencyMap):
            smap = SaliencyMap(item.sentence_id, tuple(smap))
        if item.condition == "bars":
            return render_bars(sentence, smap)
        return render_heatmap(sentence, smap).svg

    def next_payload(self, sess: Session) -> dict:
        with self.lock:
            if sess.status == "complete":
                return {"done": True, "session_id": sess.session_id,
                        "progress": sess.progress()}
            item = sess.items[sess.cursor]
            sentence = self.sentences[item.sentence_id]
            # target_token is 1-based, matching RatingRecord.token_index
            target = sentence.tokens[item.target_token - 1].surface
            return {
                "done": False,
                "session_id": sess.session_id,
                "cursor": sess.cursor,
                "progress": sess.progress(),
                "item": {
                    "tokens": [t.surface for t in sentence.tokens],
                    "target_token": item.target_token,
                    "condition": item.condition,
                    "question": QUESTION_TEMPLATE.format(word=target),
                    "markup": self._markup(item, sentence),
                    "display_index": item.display_index,
                },
            }

    def submit(self, sess: Session, cursor: int, rating: int,
               completion_time_s: float, comment: str | None) -> dict:
        with self.lock:
            if sess.status == "complete":
                _fail(409, "session-complete",
                      f"session {sess.session_id} already answered everything")
            if cursor != sess.cursor:
                _fail(409, "cursor-conflict",
                      f"submission for cursor {cursor} but session is at "
                      f"{sess.cursor}")
            if not (isinstance(rating, int) and 1 <= rating <= 7):
                _fail(422, "bad-rating", f"rating must be 1..7, got {rating}")
            if not completion_time_s > 0:
                _fail(422, "bad-completion-time",
                      f"completion time must be positive, got {completion_time_s}")
            item = sess.items[cursor]
            sentence = self.sentences[item.sentence_id]
            ctx = extract(sentence, item.saliency, item.display_index,
                          self.freq_table,
                          self.sentiment_lexicon)[item.target_token - 1]
            record = RatingRecord(
                worker_id=sess.worker_id,
                sentence_id=item.sentence_id,
                token_index=item.target_token,
                context=ctx,
                rating=rating,
                completion_time_s=completion_time_s,
                comment=comment or None,
                display_index=item.display_index,
                condition=item.condition,
            )
            trap_pass = (rating == item.trap_expected) if item.is_trap else None
            self._append({"type": "rating", "session_id": sess.session_id,
                          "cursor": cursor, "trap_pass": trap_pass,
                          "record": record.to_json()})
            sess.records.append(record)
            if trap_pass is not None:
                sess.trap_results.append(trap_pass)
            sess.cursor += 1
            return {"ack": True, "cursor": sess.cursor,
                    "done": sess.status == "complete"}

    # -- export ---------------------------------------------------------

    def _flagged_records(self):
        out = []
        for sess in self.sessions.values():
            trap_fail = bool(sess.trap_results) and not any(sess.trap_results)
            for rec in sess.records:
                flags = {
                    "ct_outlier": rec.completion_time_s >= CT_OUTLIER_S,
                    "len_outlier": rec.context.word_length >= LEN_OUTLIER_CHARS,
                    "trap_fail": trap_fail,
                    "is_trap": rec.sentence_id in self.trap_ids,
                }
                out.append((rec, flags))
        return out

    def export(self, fmt: str = "csv", paper_filters: bool = False) -> str:
        rows = self._flagged_records()
        if paper_filters:
            rows = [(rec, fl) for rec, fl in rows if not any(fl.values())]
        recs = [rec for rec, _ in rows]
        buf = StringIO()
        if fmt == "jsonl":
            write_jsonl(recs, buf)
            return buf.getvalue()

        def column(name):
            it = iter([fl[name] for _, fl in rows])
            return lambda rec: "1" if next(it) else "0"

        write_csv(recs, buf, extra={name: column(name) for name in
                                    ("ct_outlier", "len_outlier",
                                     "trap_fail", "is_trap")})
        return buf.getvalue()


def export_study(state_dir, study_id: str, fmt: str = "csv",
                 paper_filters: bool = False) -> str:
    """Offline export straight from a study directory's log."""
    root = Path(state_dir) / study_id
    if not (root / "plan.jsonl").exists():
        raise FileNotFoundError(f"no study {study_id!r} under {state_dir}")
    return _Study(root).export(fmt, paper_filters)


class CreateSessionBody(BaseModel):
    worker_id: str


class RatingBody(BaseModel):
    cursor: int
    rating: int
    completion_time_s: float
    comment: str | None = None


def create_app(state_dir) -> FastAPI:
    """Application over one state root; every study directory found
    under it is loaded (and its log replayed) at startup."""
    root = Path(state_dir)
    root.mkdir(parents=True, exist_ok=True)
    studies: dict[str, _Study] = {}
    for child in sorted(root.iterdir()):
        if (child / "plan.jsonl").exists():
            studies[child.name] = _Study(child)

    app = FastAPI(title="rating-study service")

    def get_study(study_id: str) -> _Study:
        st = studies.get(study_id)
        if st is None:
            _fail(404, "unknown-study", f"no study {study_id!r}")
        return st

    def find_session(session_id: str):
        for st in studies.values():
            sess = st.sessions.get(session_id)
            if sess is not None:
                return st, sess
        _fail(404, "unknown-session", f"no session {session_id!r}")

    @app.post("/studies/{study_id}/sessions", status_code=201)
    def create_session(study_id: str, body: CreateSessionBody):
        st = get_study(study_id)
        sess = st.create_session(body.worker_id)
        return {"session_id": sess.session_id, "worker_id": sess.worker_id,
                "progress": sess.progress()}

    @app.get("/sessions/{session_id}/next")
    def next_item(session_id: str):
        st, sess = find_session(session_id)
        return st.next_payload(sess)

    @app.post("/sessions/{session_id}/ratings")
    def submit_rating(session_id: str, body: RatingBody):
        st, sess = find_session(session_id)
        return st.submit(sess, body.cursor, body.rating,
                         body.completion_time_s, body.comment)

    @app.get("/studies/{study_id}/export")
    def export(study_id: str, format: str = Query("csv"),
               paper_filters: bool = Query(False, alias="paper-filters")):
        st = get_study(study_id)
        if format not in ("csv", "jsonl"):
            _fail(422, "bad-format", f"format must be csv or jsonl, got {format!r}")
        media = "text/csv" if format == "csv" else "application/x-ndjson"
        return PlainTextResponse(st.export(format, paper_filters),
                                 media_type=media)

    return app
