"""Subprocess helpers for exercising the rating service over real HTTP,
including hard-kill durability trials."""

import socket
import subprocess
import sys
import time

import httpx
import numpy as np

from _helpers import toy_corpus
from salperc.service import create_study
from salperc.simulate import make_study_plan

RUNNER = """
import sys
import uvicorn
from salperc.service import create_app

uvicorn.run(create_app(sys.argv[1]), host="127.0.0.1", port=int(sys.argv[2]),
            log_level="error")
"""


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def make_demo_study(state_dir, study_id="demo", n_sentences=6,
                    n_participants=3, mode="single-condition", seed=0,
                    condition="saliency"):
    sentences, freq = toy_corpus(np.random.default_rng(seed), n_sentences)
    plan = make_study_plan(sentences, n_participants, mode=mode, seed=seed,
                           condition=condition)
    create_study(state_dir, study_id, plan, sentences, freq_table=freq)
    return plan, sentences


def start_server(state_dir, port, timeout=20.0):
    proc = subprocess.Popen(
        [sys.executable, "-c", RUNNER, str(state_dir), str(port)],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    base = f"http://127.0.0.1:{port}"
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            raise RuntimeError(f"server exited early with {proc.returncode}")
        try:
            httpx.get(base + "/docs", timeout=1.0)
            return proc, base
        except httpx.TransportError:
            time.sleep(0.05)
    proc.kill()
    proc.wait()
    raise RuntimeError("server did not come up in time")


def kill_hard(proc):
    if proc.poll() is None:
        proc.kill()  # SIGKILL: no flush, no atexit
        proc.wait()


def durability_trial(state_dir, study_id, worker_id, kill_after_acks):
    """Submit ratings over HTTP, SIGKILL the server right after the
    kill_after_acks-th acknowledgment, restart over the same state dir,
    and verify every acknowledged rating is still exported."""
    port = free_port()
    proc, base = start_server(state_dir, port)
    acked = []
    try:
        r = httpx.post(f"{base}/studies/{study_id}/sessions",
                       json={"worker_id": worker_id}, timeout=5.0)
        r.raise_for_status()
        session_id = r.json()["session_id"]
        for i in range(kill_after_acks):
            nxt = httpx.get(f"{base}/sessions/{session_id}/next", timeout=5.0).json()
            assert not nxt["done"]
            rating = (i % 7) + 1
            resp = httpx.post(
                f"{base}/sessions/{session_id}/ratings",
                json={"cursor": nxt["cursor"], "rating": rating,
                      "completion_time_s": 1.5}, timeout=5.0)
            resp.raise_for_status()
            assert resp.json()["ack"]
            acked.append(rating)
    finally:
        kill_hard(proc)

    port2 = free_port()
    proc2, base2 = start_server(state_dir, port2)
    try:
        out = httpx.get(f"{base2}/studies/{study_id}/export",
                        params={"format": "jsonl"}, timeout=5.0)
        out.raise_for_status()
        import json as _json
        got = [_json.loads(ln)["rating"] for ln in out.text.splitlines()
               if ln.strip() and _json.loads(ln)["worker_id"] == worker_id]
    finally:
        kill_hard(proc2)
    return acked, got
