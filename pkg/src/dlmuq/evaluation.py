"""Selective-generation evaluation: rejection curves, PRR, and ROC-AUC.

The rejection curve tracks the mean quality of the instances retained after
abstaining from a growing fraction of them.  PRR normalizes the area under
the uncertainty-ordered curve between the random baseline (flat at the
overall mean) and the oracle ordering, integrated up to a capped rejection
fraction; ROC-AUC treats uncertainty as a score for the low-quality class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

# Quality thresholds used to binarize continuous scores for ROC-AUC.
TASK_PRESETS = {
    "qa": 0.3,
    "summ": 0.3,
    "mt": 0.8,
    "accuracy": 0.5,
}

DEFAULT_MAX_REJECT = 0.5


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class EvalRecord:
    instance_id: str
    quality: float
    uncertainty: float


@dataclass(frozen=True)
class PRRResult:
    prr: float
    auc_unc: float
    auc_oracle: float
    auc_random: float
    degenerate: bool


@dataclass(frozen=True)
class JoinStats:
    matched: int
    unmatched_reports: int
    unmatched_qualities: int
    excluded: int


def _check_records(records: Sequence[EvalRecord]) -> None:
    if len(records) < 2:
        raise EvalError(f"need at least 2 records, got {len(records)}")
    for r in records:
        if not np.isfinite(r.quality) or not np.isfinite(r.uncertainty):
            raise EvalError(f"non-finite value for instance {r.instance_id!r}")


def _rejection_order(
    records: Sequence[EvalRecord], order: str, seed: int | None
) -> list[EvalRecord]:
    """Records sorted so the first element is rejected first."""
    if order == "by_uncertainty":
        return sorted(records, key=lambda r: (-r.uncertainty, r.instance_id))
    if order == "oracle":
        return sorted(records, key=lambda r: (r.quality, r.instance_id))
    if order == "random":
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(records))
        return [records[i] for i in perm]
    raise EvalError(f"unknown rejection order {order!r}")


def rejection_curve(
    records: Sequence[EvalRecord],
    order: str = "by_uncertainty",
    max_reject: float = DEFAULT_MAX_REJECT,
    seed: int | None = None,
) -> list[tuple[float, float]]:
    """Mean retained quality at every rejection fraction k/n up to the cap.

    ``by_uncertainty`` rejects the most uncertain first (ties broken by
    ascending instance id), ``oracle`` rejects the lowest quality first, and
    ``random`` uses a seeded shuffle.
    """
    _check_records(records)
    if not 0.0 < max_reject <= 1.0:
        raise EvalError(f"max_reject must be in (0, 1], got {max_reject}")
    ordered = _rejection_order(records, order, seed)
    n = len(ordered)
    max_k = math.floor(max_reject * n + 1e-9)
    # Suffix means: after rejecting k, the retained set is ordered[k:].
    qualities = np.array([r.quality for r in ordered])
    suffix = np.cumsum(qualities[::-1])[::-1]
    points = []
    for k in range(max_k + 1):
        retained = n - k
        if retained == 0:
            break
        points.append((k / n, float(suffix[k] / retained)))
    return points


def _trapezoid(points: Sequence[tuple[float, float]]) -> float:
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    return float(np.trapezoid(ys, xs))


def prr(
    records: Sequence[EvalRecord], max_reject: float = DEFAULT_MAX_REJECT
) -> PRRResult:
    """Prediction rejection ratio up to ``max_reject``.

    1 means the uncertainty ordering matches the quality-oracle ordering, 0
    matches random rejection; the random baseline is the analytic flat curve
    at the overall mean, evaluated on the same trapezoid grid.
    """
    _check_records(records)
    curve_unc = rejection_curve(records, "by_uncertainty", max_reject)
    curve_oracle = rejection_curve(records, "oracle", max_reject)
    auc_unc = _trapezoid(curve_unc)
    auc_oracle = _trapezoid(curve_oracle)
    grid_end = curve_unc[-1][0]
    mean_quality = float(np.mean([r.quality for r in records]))
    auc_random = grid_end * mean_quality
    denom = auc_oracle - auc_random
    if denom <= 0.0:
        return PRRResult(0.0, auc_unc, auc_oracle, auc_random, degenerate=True)
    return PRRResult((auc_unc - auc_random) / denom, auc_unc, auc_oracle, auc_random, False)


def roc_auc(records: Sequence[EvalRecord], threshold: float) -> float:
    """Area under the ROC curve of uncertainty as a low-quality detector.

    Quality at or above the threshold is the positive class.  Computed by the
    rank-sum formulation with midrank tie correction, this equals the
    probability that a random negative carries higher uncertainty than a
    random positive, counting ties as half.
    """
    _check_records(records)
    labels = np.array([r.quality >= threshold for r in records])
    scores = np.array([r.uncertainty for r in records])
    n_pos = int(labels.sum())
    n_neg = len(records) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError(
            f"single-class data after thresholding at {threshold}: "
            f"{n_pos} positives, {n_neg} negatives"
        )
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0  # midrank of the tie group
        i = j + 1
    rank_sum_neg = float(ranks[~labels].sum())
    u = rank_sum_neg - n_neg * (n_neg + 1) / 2.0
    return u / (n_neg * n_pos)


def join(
    reports: Iterable[dict],
    qualities: Iterable[dict],
    signal: str,
) -> tuple[list[EvalRecord], JoinStats]:
    """Inner-join report objects with quality objects on instance id.

    ``reports`` are parsed report lines ({"instance_id", "signals": {...}}),
    ``qualities`` parsed quality lines ({"instance_id", "quality"}).  Records
    whose selected signal is not well defined are excluded and counted.
    """
    by_id_unc: dict[str, dict] = {}
    for obj in reports:
        iid = obj["instance_id"]
        if iid in by_id_unc:
            raise EvalError(f"duplicate instance_id {iid!r} in reports")
        by_id_unc[iid] = obj
    by_id_q: dict[str, float] = {}
    for obj in qualities:
        iid = obj["instance_id"]
        if iid in by_id_q:
            raise EvalError(f"duplicate instance_id {iid!r} in qualities")
        by_id_q[iid] = float(obj["quality"])

    records = []
    excluded = 0
    matched = 0
    for iid, obj in by_id_unc.items():
        if iid not in by_id_q:
            continue
        matched += 1
        entry = obj.get("signals", {}).get(signal)
        if entry is None or not entry.get("well_defined", False):
            excluded += 1
            continue
        records.append(EvalRecord(iid, by_id_q[iid], float(entry["value"])))
    stats = JoinStats(
        matched=matched,
        unmatched_reports=len(by_id_unc) - matched,
        unmatched_qualities=len(by_id_q) - matched,
        excluded=excluded,
    )
    return records, stats


def read_jsonl(path) -> Iterator:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
