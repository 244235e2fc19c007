"""Trajectory semantic-instability scores over pluggable similarity providers.

A provider maps a pair of sequences (or rendered texts, for the remote
provider) to a similarity in [0, 1] with sim(a, a) = 1; dissimilarity is
``1 - sim``.  The trajectory score averages the dissimilarity between each
argmax-decoded intermediate state and the view's final output, optionally
down-weighting later steps so that early divergence counts most.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import requests

from .signals import SignalValue
from .trace import InstanceTrace, detokenize, intermediate_sequence

LOCAL_KINDS = ("exact_match", "token_levenshtein", "token_lcs")
PROVIDER_KINDS = LOCAL_KINDS + ("precomputed", "remote")

ENDPOINT_ENV_VAR = "DLMUQ_SIM_ENDPOINT"


class SimilarityError(Exception):
    pass


class RemoteSimilarityError(SimilarityError):
    """Remote provider failed after retries; carries the failed pair count."""

    def __init__(self, message: str, failed_pairs: int):
        super().__init__(f"{message} ({failed_pairs} pairs failed)")
        self.failed_pairs = failed_pairs


class PrecomputedSimilarityMissing(SimilarityError):
    def __init__(self, view: str, block: int, step: int):
        super().__init__(f"no precomputed similarity for (view={view!r}, block={block}, step={step})")
        self.key = (view, block, step)


@dataclass(frozen=True)
class SimilarityProvider:
    """Configuration of one similarity backend."""

    kind: str
    endpoint: str | None = None
    batch_size: int = 32
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}; expected one of {PROVIDER_KINDS}")

    def resolved_endpoint(self) -> str:
        url = os.environ.get(ENDPOINT_ENV_VAR) or self.endpoint
        if not url:
            raise SimilarityError(
                f"remote provider needs an endpoint (set it in the config or via ${ENDPOINT_ENV_VAR})"
            )
        return url


@dataclass(frozen=True)
class ADConfig:
    """How to compute one trajectory-dissimilarity score."""

    view: str  # block | last | last_prefix | full
    provider: SimilarityProvider
    weighted: bool = False
    render_masks: str = "sentinel"  # sentinel | strip


# -- local similarity functions --------------------------------------------


def _exact_match(a: Sequence, b: Sequence) -> float:
    return 1.0 if list(a) == list(b) else 0.0


def _levenshtein(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _levenshtein_sim(a: Sequence, b: Sequence) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - _levenshtein(a, b) / longest


def _lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _lcs_f1(a: Sequence, b: Sequence) -> float:
    """Longest-common-subsequence F-measure (precision/recall harmonic mean)."""
    if len(a) == 0 and len(b) == 0:
        return 1.0
    if len(a) == 0 or len(b) == 0:
        return 0.0
    lcs = _lcs_length(a, b)
    if lcs == 0:
        return 0.0
    precision = lcs / len(b)
    recall = lcs / len(a)
    return 2.0 * precision * recall / (precision + recall)


_LOCAL_FUNCS = {
    "exact_match": _exact_match,
    "token_levenshtein": _levenshtein_sim,
    "token_lcs": _lcs_f1,
}


# -- remote client ----------------------------------------------------------


def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


def _post_batch(provider: SimilarityProvider, url: str, batch: list[tuple[str, str]]) -> list[float]:
    last_error: Exception | None = None
    for attempt in range(provider.max_retries + 1):
        if attempt:
            time.sleep(min(0.25 * 2 ** (attempt - 1), 4.0))
        try:
            resp = requests.post(
                url, json={"pairs": [[a, b] for a, b in batch]}, timeout=provider.timeout
            )
            if resp.status_code != 200:
                raise SimilarityError(f"HTTP {resp.status_code} from {url}")
            scores = resp.json().get("scores")
            if not isinstance(scores, list) or len(scores) != len(batch):
                raise SimilarityError(
                    f"protocol error: expected {len(batch)} scores, got "
                    f"{len(scores) if isinstance(scores, list) else type(scores).__name__}"
                )
            return [_clamp01(float(s)) for s in scores]
        except (requests.RequestException, ValueError, SimilarityError) as e:
            last_error = e
    raise RemoteSimilarityError(f"remote similarity failed after retries: {last_error}", len(batch))


def similarity_batch(
    provider: SimilarityProvider, pairs: Sequence[tuple[Sequence, Sequence]]
) -> list[float]:
    """Score each pair, order preserving.

    Local providers compare the pair elements as sequences (strings compare
    per character, lists per element).  The remote provider posts batches of
    text pairs and clamps returned scores to [0, 1]; up to ``max_in_flight``
    batches are outstanding at once and results are reassembled in request
    order.
    """
    if provider.kind in _LOCAL_FUNCS:
        fn = _LOCAL_FUNCS[provider.kind]
        return [fn(a, b) for a, b in pairs]
    if provider.kind == "remote":
        url = provider.resolved_endpoint()
        batches = [
            list(pairs[i : i + provider.batch_size])
            for i in range(0, len(pairs), provider.batch_size)
        ]
        if not batches:
            return []
        with ThreadPoolExecutor(max_workers=max(1, provider.max_in_flight)) as pool:
            results = pool.map(lambda b: _post_batch(provider, url, b), batches)
            return [s for batch_scores in results for s in batch_scores]
    raise SimilarityError(f"provider kind {provider.kind!r} does not score raw pairs")


# -- trajectory dissimilarity -----------------------------------------------


def _render(tokens: Sequence[int], trace: InstanceTrace, config: ADConfig):
    """Project a raw state onto what the provider compares."""
    vocab = trace.header_ref.vocab
    if config.provider.kind == "remote":
        return detokenize(tokens, vocab, render_masks=config.render_masks)
    kept: list[int] = []
    for t in tokens:
        if t == vocab.mask_id:
            if config.render_masks == "sentinel":
                kept.append(t)
            elif config.render_masks != "strip":
                raise ValueError(f"render_masks must be 'sentinel' or 'strip', got {config.render_masks!r}")
        elif t not in vocab.special_ids:
            kept.append(t)
    return kept


def _view_dissimilarities(trace: InstanceTrace, config: ADConfig, view: str) -> list[float]:
    """D(state_t, final) for t = 1..T under one concrete view, generation order."""
    if view.startswith("block:"):
        block = int(view.split(":", 1)[1])
        total = trace.steps_per_block[block]
        key_view, key_block = "block", block
    elif view in ("last", "last_prefix"):
        last = trace.valid_blocks()[-1]
        total = trace.steps_per_block[last]
        key_view, key_block = view, last
    elif view == "full":
        total = sum(trace.steps_per_block)
        key_view, key_block = "full", 0
    else:
        raise ValueError(f"unknown view {view!r}")
    if total == 0:
        raise SimilarityError(f"trajectory is empty under view {view!r}")

    if config.provider.kind == "precomputed":
        table = trace.precomputed_similarity or {}
        out = []
        for t in range(1, total + 1):
            key = (key_view, key_block, t)
            if key not in table:
                raise PrecomputedSimilarityMissing(*key)
            out.append(1.0 - table[key])
        return out

    reference = _render(intermediate_sequence(trace, view, total), trace, config)
    pairs = [
        (_render(intermediate_sequence(trace, view, t), trace, config), reference)
        for t in range(1, total + 1)
    ]
    return [1.0 - s for s in similarity_batch(config.provider, pairs)]


def _aggregate(ds: list[float], weighted: bool) -> float:
    total = len(ds)
    if not weighted:
        return sum(ds) / total
    # Generation step s = 1 is earliest and carries weight 1; the final step
    # carries weight 1/T.
    return sum((total - s + 1) / total * d for s, d in enumerate(ds, start=1)) / total


def _score(trace: InstanceTrace, config: ADConfig, weighted: bool, name: str) -> SignalValue:
    if config.view == "block":
        valid = trace.valid_blocks()
        if not valid:
            return SignalValue(name, float("nan"), well_defined=False)
        per_block = [
            _aggregate(_view_dissimilarities(trace, config, f"block:{b}"), weighted) for b in valid
        ]
        return SignalValue(name, sum(per_block) / len(per_block))
    if config.view in ("last", "last_prefix") and not trace.valid_blocks():
        return SignalValue(name, float("nan"), well_defined=False)
    return SignalValue(name, _aggregate(_view_dissimilarities(trace, config, config.view), weighted))


def average_dissimilarity(trace: InstanceTrace, config: ADConfig) -> SignalValue:
    """Unweighted mean dissimilarity between intermediate states and the final
    output of the chosen view; for the block view, per-block means are averaged
    over valid blocks."""
    return _score(trace, config, weighted=False, name=f"ad_{config.view}")


def progressive_dissimilarity(trace: InstanceTrace, config: ADConfig) -> SignalValue:
    """Progress-weighted dissimilarity: the earliest step weighs 1, the final
    step 1/T, so slow convergence is penalized.  Always lies between
    ``average_dissimilarity / T`` and ``average_dissimilarity``."""
    return _score(trace, config, weighted=True, name=f"ad_{config.view}_weighted")


def trajectory_dissimilarity(trace: InstanceTrace, config: ADConfig) -> SignalValue:
    """Dispatch on ``config.weighted``."""
    if config.weighted:
        return progressive_dissimilarity(trace, config)
    return average_dissimilarity(trace, config)
