from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from dlmuq.oracle import ToyDiffusion, dirichlet_table, generate_trace, uniform_table
from dlmuq.trace import InstanceTrace, PositionObs, StepRecord, TraceHeader, Vocab


@pytest.fixture
def tiny_uniform_model() -> ToyDiffusion:
    return ToyDiffusion(2, 2, uniform_table(2, 2), steps=2, seed=11)


@pytest.fixture
def mid_model() -> ToyDiffusion:
    rng = np.random.default_rng(42)
    return ToyDiffusion(3, 3, dirichlet_table(3, 3, 1.0, rng), steps=3, seed=42)


@pytest.fixture
def sim_traces(mid_model) -> list[InstanceTrace]:
    return generate_trace(mid_model, 20, n_mc=8)


def small_vocab() -> Vocab:
    # 0..2 content tokens, 3 mask, 4 end-of-text
    return Vocab(entries=("x", "y", "z", "[MASK]", "<eos>"), mask_id=3, special_ids=frozenset({3, 4}))


def build_trace(
    blocks: list[dict],
    instance_id: str = "t0",
    vocab: Vocab | None = None,
    mc_samples=(),
    max_steps: int | None = None,
    precomputed=None,
) -> InstanceTrace:
    """Assemble a trace from per-block specs.

    Each block dict has ``final`` (token list) and ``steps``: a list of steps,
    each a list of per-position tuples
    ``(argmax, logprob, entropy, was_masked, committed_now, remasked_now)``.
    """
    vocab = vocab or small_vocab()
    records = []
    steps_per_block = []
    for b, spec in enumerate(blocks):
        steps_per_block.append(len(spec["steps"]))
        for t, step in enumerate(spec["steps"], start=1):
            positions = tuple(
                PositionObs(k, tok, lp, ent, wm, cm, rm)
                for k, (tok, lp, ent, wm, cm, rm) in enumerate(step)
            )
            records.append(StepRecord(block=b, step=t, positions=positions))
    header = TraceHeader(
        format_version=1,
        model_name="hand",
        task="unit",
        max_steps_per_block=max_steps or max(steps_per_block),
        block_length=max(len(b["final"]) for b in blocks),
        num_blocks=len(blocks),
        vocab=vocab,
    )
    return InstanceTrace(
        instance_id=instance_id,
        header_ref=header,
        final_tokens=tuple(tuple(b["final"]) for b in blocks),
        steps=tuple(records),
        steps_per_block=tuple(steps_per_block),
        nfe=sum(steps_per_block),
        mc_samples=tuple(mc_samples),
        precomputed_similarity=precomputed,
    )


@pytest.fixture
def hand_trace() -> InstanceTrace:
    """Two blocks with a prediction flip, a re-mask event, and a special token."""
    return build_trace(
        [
            {
                "final": [0, 1],
                "steps": [
                    [(2, -0.5, 0.9, True, False, False), (1, -0.1, 0.3, True, True, False)],
                    [(0, -0.2, 0.6, True, True, False), (1, -0.1, 0.0, False, False, False)],
                ],
            },
            {
                "final": [2, 4],
                "steps": [
                    [(2, -0.7, 1.0, True, False, False), (4, -0.05, 0.2, True, True, False)],
                    [(0, -0.6, 0.8, False, False, True), (4, -0.05, 0.0, False, False, False)],
                    [(2, -0.3, 0.4, True, True, False), (4, -0.05, 0.0, False, False, False)],
                ],
            },
        ],
        instance_id="hand-1",
    )


# -- stub similarity service ---------------------------------------------------


class StubSimilarityServer:
    """Minimal wire-protocol endpoint with scriptable failure behavior."""

    def __init__(self, fail_first: int = 0, mode: str = "ok"):
        self.fail_first = fail_first
        self.mode = mode
        self.calls = 0
        self.received: list[list[list[str]]] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def do_POST(self):
                outer.calls += 1
                if self.path != "/v1/similarity":
                    self.send_error(404)
                    return
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                try:
                    pairs = json.loads(body)["pairs"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    self.send_error(400)
                    return
                outer.received.append(pairs)
                if outer.calls <= outer.fail_first:
                    self.send_error(500)
                    return
                if outer.mode == "bad_length":
                    scores = [0.5] * (len(pairs) + 1)
                elif outer.mode == "out_of_range":
                    scores = [1.5 if a == b else -0.25 for a, b in pairs]
                else:
                    scores = [outer.score(a, b) for a, b in pairs]
                payload = json.dumps({"scores": scores}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @staticmethod
    def score(a: str, b: str) -> float:
        if a == b:
            return 1.0
        if not a or not b:
            return 0.0
        common = sum(1 for x, y in zip(a, b) if x == y)
        return common / max(len(a), len(b))

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1/similarity"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def stub_server():
    def factory(**kwargs):
        return StubSimilarityServer(**kwargs)

    return factory
