"""Exactly calibrated toy masked-diffusion simulator and bound verifications.

The simulator holds an explicit probability table over all sequences of a
small vocabulary, so its denoiser can return the *true* posterior at any
partially masked state by direct marginalization.  That makes two kinds of
checks possible without any learned model:

* generation of fully valid trajectory traces whose logged probabilities and
  entropies are exact, and
* numerical verification that the expected indicator trajectory dissimilarity
  is bounded by the discretized masking loss, stepwise and in aggregate, and
  that the progressive dissimilarity stays between ``AD / T`` and ``AD``.

Forward corruption for the loss and bound computations masks each token
independently with probability ``t / T``; trace generation instead follows a
stepwise unmasking schedule like a real sampler.  The two processes serve
distinct claims and are not interchangeable.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .dissimilarity import ADConfig, _view_dissimilarities
from .trace import InstanceTrace, MCMaskSample, PositionObs, StepRecord, TraceHeader, Vocab

UNMASK_POLICIES = ("random_order", "confidence_order")
DECODE_MODES = ("greedy", "ancestral")

# Beyond this many (sequence, mask-pattern) pairs, exact enumeration of the
# discretized loss is refused in favor of Monte Carlo.
_ENUMERATION_LIMIT = 200_000


class InconsistentStateError(ValueError):
    """A masked state contradicts every sequence in the distribution's support."""


class EnumerationLimitError(ValueError):
    """Exact enumeration would be too large; use monte_carlo mode instead."""


@lru_cache(maxsize=32)
def _digit_table(vocab_size: int, length: int) -> np.ndarray:
    """(V**L, L) array of sequence digits in lexicographic row order."""
    idx = np.arange(vocab_size**length)
    powers = vocab_size ** np.arange(length - 1, -1, -1)
    return (idx[:, None] // powers[None, :]) % vocab_size


@dataclass(frozen=True, eq=False)
class ToyDiffusion:
    """A small discrete diffusion world with an enumerable joint distribution."""

    vocab_size: int
    length: int
    data_dist: np.ndarray  # flat, length vocab_size ** length, sums to 1
    steps: int
    unmask_policy: str = "random_order"
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.vocab_size <= 8:
            raise ValueError(f"vocab_size must be in 2..8, got {self.vocab_size}")
        if not 2 <= self.length <= 6:
            raise ValueError(f"length must be in 2..6, got {self.length}")
        if self.vocab_size**self.length > 10**6:
            raise ValueError("sequence space too large to enumerate")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.unmask_policy not in UNMASK_POLICIES:
            raise ValueError(f"unmask_policy must be one of {UNMASK_POLICIES}")
        dist = np.asarray(self.data_dist, dtype=np.float64).reshape(-1)
        if dist.shape[0] != self.vocab_size**self.length:
            raise ValueError(
                f"data_dist has {dist.shape[0]} entries, expected {self.vocab_size ** self.length}"
            )
        if np.any(dist < 0):
            raise ValueError("data_dist entries must be nonnegative")
        if abs(float(dist.sum()) - 1.0) > 1e-12:
            raise ValueError(f"data_dist sums to {dist.sum()!r}, not 1")
        object.__setattr__(self, "data_dist", dist)

    # The mask token sits one past the data symbols.
    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def digits(self) -> np.ndarray:
        return _digit_table(self.vocab_size, self.length)

    def vocab(self) -> Vocab:
        letters = string.ascii_lowercase[: self.vocab_size]
        return Vocab(
            entries=tuple(letters) + ("[MASK]",),
            mask_id=self.mask_id,
            special_ids=frozenset({self.mask_id}),
        )

    def header(self, num_blocks: int = 1) -> TraceHeader:
        return TraceHeader(
            format_version=1,
            model_name="toy-diffusion",
            task="simulated",
            max_steps_per_block=self.steps,
            block_length=self.length,
            num_blocks=num_blocks,
            vocab=self.vocab(),
        )

    def mode_sequence(self) -> tuple[int, ...]:
        """Most probable sequence (first in lexicographic order on ties)."""
        return tuple(int(d) for d in self.digits()[int(np.argmax(self.data_dist))])


def uniform_table(vocab_size: int, length: int) -> np.ndarray:
    n = vocab_size**length
    return np.full(n, 1.0 / n)


def dirichlet_table(vocab_size: int, length: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    n = vocab_size**length
    return rng.dirichlet(np.full(n, alpha))


# -- exact denoiser ---------------------------------------------------------


def _consistency_row(model: ToyDiffusion, z: Sequence[int]) -> np.ndarray:
    digits = model.digits()
    consistent = np.ones(digits.shape[0], dtype=bool)
    for k, tok in enumerate(z):
        if tok != model.mask_id and tok >= 0:
            consistent &= digits[:, k] == tok
    return consistent


def exact_posterior(model: ToyDiffusion, z: Sequence[int]) -> np.ndarray:
    """Per-position distributions over the data symbols given a masked state.

    Masked entries of ``z`` may be the mask token id or any negative value.
    Unmasked positions come back as point masses; masked positions as the
    table marginal conditioned on all unmasked values.
    """
    if len(z) != model.length:
        raise ValueError(f"state has length {len(z)}, expected {model.length}")
    digits = model.digits()
    weights = model.data_dist * _consistency_row(model, z)
    total = float(weights.sum())
    if total <= 0.0:
        raise InconsistentStateError(f"state {list(z)} has zero mass under the data distribution")
    marg = np.zeros((model.length, model.vocab_size))
    for k, tok in enumerate(z):
        if tok != model.mask_id and tok >= 0:
            marg[k, tok] = 1.0
        else:
            marg[k] = np.bincount(digits[:, k], weights=weights, minlength=model.vocab_size) / total
    return marg


def _entropy(dist: np.ndarray) -> float:
    nz = dist[dist > 0]
    return float(-(nz * np.log(nz)).sum())


def _batch_consistency(model: ToyDiffusion, z_batch: np.ndarray) -> np.ndarray:
    """(n, V**L) consistency matrix for a batch of masked states."""
    digits = model.digits()
    consistent = np.ones((z_batch.shape[0], digits.shape[0]), dtype=bool)
    for k in range(model.length):
        col = digits[:, k][None, :]
        zk = z_batch[:, k][:, None]
        consistent &= (zk == col) | (zk == model.mask_id)
    return consistent


def _batch_joint_argmax(model: ToyDiffusion, z_batch: np.ndarray) -> np.ndarray:
    """Most probable full sequence (table index) given each masked state.

    Ties resolve to the lexicographically smallest sequence, which is the
    lowest table index.
    """
    consistent = _batch_consistency(model, z_batch)
    scores = np.where(consistent, model.data_dist[None, :], -1.0)
    return np.argmax(scores, axis=1)


# -- trace generation --------------------------------------------------------


def _commit_groups(model: ToyDiffusion) -> tuple[int, int]:
    group = math.ceil(model.length / model.steps)
    actual_steps = math.ceil(model.length / group)
    return group, actual_steps


def _generate_block(
    model: ToyDiffusion, rng: np.random.Generator, decode: str
) -> tuple[list[int], list[StepRecord], int]:
    length, mask_id = model.length, model.mask_id
    group, actual_steps = _commit_groups(model)
    z = [mask_id] * length
    random_order = list(rng.permutation(length)) if model.unmask_policy == "random_order" else None

    records: list[StepRecord] = []
    for step in range(1, actual_steps + 1):
        marg = exact_posterior(model, z)  # one forward pass for the whole step
        masked = [k for k in range(length) if z[k] == mask_id]
        if model.unmask_policy == "confidence_order":
            confidence = [(-float(marg[k].max()), k) for k in masked]
            commit_now = [k for _, k in sorted(confidence)[:group]]
        else:
            commit_now = [k for k in random_order if k in masked][:group]

        chosen: dict[int, int] = {}
        if decode == "greedy":
            for k in commit_now:
                chosen[k] = int(np.argmax(marg[k]))
        else:
            # Exact ancestral sampling: within a step, later commits condition
            # on earlier in-group choices so the joint law matches the table.
            z_work = list(z)
            for k in commit_now:
                cond = exact_posterior(model, z_work) if z_work != z else marg
                chosen[k] = int(rng.choice(model.vocab_size, p=cond[k]))
                z_work[k] = chosen[k]

        positions = []
        for k in range(length):
            if z[k] != mask_id:
                positions.append(
                    PositionObs(k, z[k], 0.0, 0.0, was_masked=False, committed_now=False, remasked_now=False)
                )
                continue
            dist = marg[k]
            entropy = _entropy(dist)
            if k in chosen:
                token = chosen[k]
            else:
                token = int(np.argmax(dist))
            logprob = min(float(np.log(dist[token])), 0.0)
            positions.append(
                PositionObs(
                    k,
                    token,
                    logprob,
                    entropy,
                    was_masked=True,
                    committed_now=k in chosen,
                    remasked_now=False,
                )
            )
        records.append(StepRecord(block=0, step=step, positions=tuple(positions)))
        for k, tok in chosen.items():
            z[k] = tok

    return z, records, actual_steps


def draw_mc_samples(
    model: ToyDiffusion,
    y_blocks: Sequence[Sequence[int]],
    n: int,
    rng: np.random.Generator,
) -> tuple[MCMaskSample, ...]:
    """Uniform-size, uniform-position mask subsets with exact log-probabilities.

    Positions index the concatenated output; blocks are independent draws of
    the model, so each block's masked tokens are scored under its own state.
    """
    lengths = [len(blk) for blk in y_blocks]
    total_len = sum(lengths)
    offsets = np.cumsum([0] + lengths[:-1])
    samples = []
    for m in range(n):
        size = int(rng.integers(1, total_len + 1))
        positions = rng.choice(total_len, size=size, replace=False)
        logprob = 0.0
        for b, blk in enumerate(y_blocks):
            local = [int(k - offsets[b]) for k in positions if offsets[b] <= k < offsets[b] + lengths[b]]
            if not local:
                continue
            z = list(blk)
            for k in local:
                z[k] = model.mask_id
            marg = exact_posterior(model, z)
            logprob += sum(float(np.log(marg[k, blk[k]])) for k in local)
        samples.append(MCMaskSample(m, size, frozenset(int(k) for k in positions), min(logprob, 0.0)))
    return tuple(samples)


def generate_trace(
    model: ToyDiffusion,
    n: int,
    decode: str = "greedy",
    n_mc: int = 0,
    blocks: int = 1,
    id_prefix: str = "sim",
) -> list[InstanceTrace]:
    """Simulate ``n`` generations, each a fully valid trace.

    Every trace starts all-masked and unmasks fixed-size position groups per
    step under the configured policy.  ``decode='greedy'`` commits the argmax
    token; ``'ancestral'`` samples from the exact posterior, so the final
    sequences are distributed exactly like the data table.  ``blocks=2``
    produces a two-block layout (independent draws) purely to exercise
    multi-block trajectory views.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if decode not in DECODE_MODES:
        raise ValueError(f"decode must be one of {DECODE_MODES}")
    if blocks not in (1, 2):
        raise ValueError("blocks must be 1 or 2")
    header = model.header(num_blocks=blocks)
    streams = np.random.SeedSequence(model.seed).spawn(n)
    out = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        final_blocks: list[tuple[int, ...]] = []
        all_records: list[StepRecord] = []
        steps_per_block: list[int] = []
        for b in range(blocks):
            y, records, actual = _generate_block(model, rng, decode)
            final_blocks.append(tuple(y))
            all_records.extend(
                StepRecord(block=b, step=r.step, positions=r.positions) for r in records
            )
            steps_per_block.append(actual)
        mc = draw_mc_samples(model, final_blocks, n_mc, rng) if n_mc > 0 else ()
        out.append(
            InstanceTrace(
                instance_id=f"{id_prefix}-{model.seed}-{i:05d}",
                header_ref=header,
                final_tokens=tuple(final_blocks),
                steps=tuple(all_records),
                steps_per_block=tuple(steps_per_block),
                nfe=sum(steps_per_block),
                mc_samples=mc,
            )
        )
    return out


# -- discretized masking loss -------------------------------------------------


def _exact_mask_terms(model: ToyDiffusion) -> tuple[np.ndarray, np.ndarray]:
    """For every (sequence, mask pattern): masked-token negative log-likelihood.

    Returns ``(terms, mask_sizes)`` where ``terms[y_idx, m_idx]`` is the sum of
    ``-log p(y_i | z)`` over the pattern's masked positions, and ``mask_sizes``
    the pattern cardinalities.  Only support sequences get finite terms.
    """
    length = model.length
    digits = model.digits()
    n_seq = digits.shape[0]
    support = np.flatnonzero(model.data_dist > 0)
    if support.size * (2**length) > _ENUMERATION_LIMIT:
        raise EnumerationLimitError(
            f"{support.size} support sequences x {2 ** length} mask patterns exceed the "
            f"enumeration limit; use monte_carlo mode"
        )
    terms = np.zeros((n_seq, 2**length))
    mask_sizes = np.zeros(2**length, dtype=int)
    for m_idx in range(2**length):
        masked = [k for k in range(length) if (m_idx >> k) & 1]
        mask_sizes[m_idx] = len(masked)
        if not masked:
            continue
        unmasked = [k for k in range(length) if k not in masked]
        # Group support sequences sharing the same unmasked digits: they see
        # the same state, hence the same posterior.
        if unmasked:
            keys = digits[np.ix_(support, unmasked)]
            _, group_ids = np.unique(keys, axis=0, return_inverse=True)
        else:
            group_ids = np.zeros(support.size, dtype=int)
        for g in np.unique(group_ids):
            members = support[group_ids == g]
            z = [model.mask_id] * length
            for k in unmasked:
                z[k] = int(digits[members[0], k])
            marg = exact_posterior(model, z)
            t = np.zeros(members.size)
            for k in masked:
                t -= np.log(marg[k, digits[members, k]])
            terms[members, m_idx] = t
    return terms, mask_sizes


def _pattern_weights(length: int, p: float, mask_sizes: np.ndarray) -> np.ndarray:
    return p**mask_sizes * (1.0 - p) ** (length - mask_sizes)


def _exact_per_step_loss(model: ToyDiffusion) -> tuple[np.ndarray, np.ndarray]:
    """Exact raw masked loss R_t and discretized per-step loss L_t for t=1..T."""
    terms, mask_sizes = _exact_mask_terms(model)
    expected_term = model.data_dist @ terms  # per pattern
    raw = np.empty(model.steps)
    for t in range(1, model.steps + 1):
        p = t / model.steps
        raw[t - 1] = float(_pattern_weights(model.length, p, mask_sizes) @ expected_term)
    per_step = raw * model.steps / np.arange(1, model.steps + 1)
    return raw, per_step


def _mc_loss_samples(
    model: ToyDiffusion, samples: int, rng: np.random.Generator
) -> np.ndarray:
    length, mask_id = model.length, model.mask_id
    digits = model.digits()
    values = np.empty(samples)
    chunk = max(1, 2**21 // digits.shape[0])
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        t = rng.integers(1, model.steps + 1, size=n)
        y_idx = rng.choice(digits.shape[0], size=n, p=model.data_dist)
        y_dig = digits[y_idx]
        masked = rng.random((n, length)) < (t / model.steps)[:, None]
        z = np.where(masked, mask_id, y_dig)
        consistent = _batch_consistency(model, z)
        weights = consistent * model.data_dist[None, :]
        totals = weights.sum(axis=1)
        term = np.zeros(n)
        for k in range(length):
            match = digits[:, k][None, :] == y_dig[:, k][:, None]
            prob = (weights * match).sum(axis=1) / totals
            sel = masked[:, k]
            term[sel] -= np.log(prob[sel])
        values[done : done + n] = (model.steps / t) * term
        done += n
    return values


def masking_loss(
    model: ToyDiffusion, mode: str = "exact_discretized", samples: int = 0
) -> tuple[float, float]:
    """Discretized denoising loss, either exactly or by Monte Carlo.

    Returns ``(value, standard_error)``; the standard error is zero in exact
    mode.  Exact mode enumerates every (support sequence, mask pattern) pair
    at each discretized time and refuses to run past the enumeration limit.
    """
    if mode == "exact_discretized":
        _, per_step = _exact_per_step_loss(model)
        return float(per_step.mean()), 0.0
    if mode == "monte_carlo":
        if samples < 1:
            raise ValueError("monte_carlo mode needs samples >= 1")
        rng = np.random.default_rng([model.seed, 2])
        values = _mc_loss_samples(model, samples, rng)
        return float(values.mean()), float(values.std(ddof=1) / math.sqrt(samples))
    raise ValueError(f"mode must be 'exact_discretized' or 'monte_carlo', got {mode!r}")


# -- bound verification --------------------------------------------------------


@dataclass(frozen=True)
class TheoremReport:
    """Outcome of checking the dissimilarity-vs-loss bound on one toy model."""

    mean_u_ad: float
    mean_u_ad_se: float
    loss_value: float
    loss_se: float
    per_step_probs: tuple[float, ...]
    per_step_prob_ses: tuple[float, ...]
    per_step_bounds: tuple[float, ...]
    inequality_holds: bool
    margin: float
    steps: int
    samples: int
    mode: str
    seed: int

    def to_json(self) -> dict:
        return {
            "mean_u_ad": self.mean_u_ad,
            "mean_u_ad_se": self.mean_u_ad_se,
            "loss_value": self.loss_value,
            "loss_se": self.loss_se,
            "per_step_probs": list(self.per_step_probs),
            "per_step_prob_ses": list(self.per_step_prob_ses),
            "per_step_bounds": list(self.per_step_bounds),
            "inequality_holds": self.inequality_holds,
            "margin": self.margin,
            "steps": self.steps,
            "samples": self.samples,
            "mode": self.mode,
            "seed": self.seed,
        }


def _exact_mismatch_probs(model: ToyDiffusion) -> np.ndarray:
    """P(argmax-decoded state differs from the sample) per step, by enumeration."""
    length = model.length
    digits = model.digits()
    support = np.flatnonzero(model.data_dist > 0)
    if support.size * (2**length) > _ENUMERATION_LIMIT:
        raise EnumerationLimitError("sequence space too large for exact verification")
    probs = np.zeros(model.steps)
    # mismatch[y, pattern]: does the joint argmax at mask(y, pattern) differ from y?
    mismatch = np.zeros((support.size, 2**length))
    mask_sizes = np.zeros(2**length, dtype=int)
    for m_idx in range(2**length):
        masked = [k for k in range(length) if (m_idx >> k) & 1]
        mask_sizes[m_idx] = len(masked)
        z = digits[support].copy()
        for k in masked:
            z[:, k] = model.mask_id
        pred = _batch_joint_argmax(model, z)
        mismatch[:, m_idx] = pred != support
    expected = model.data_dist[support] @ mismatch
    for t in range(1, model.steps + 1):
        probs[t - 1] = float(_pattern_weights(length, t / model.steps, mask_sizes) @ expected)
    return probs


def verify_theorem1(
    model: ToyDiffusion, samples: int = 10_000, mode: str = "monte_carlo"
) -> TheoremReport:
    """Check that expected trajectory dissimilarity is bounded by the loss.

    ``monte_carlo`` draws states from the forward masking process, decodes
    the joint argmax under the exact posterior, and compares against the
    exactly enumerated loss with a one-sided three-standard-error slack;
    ``exact`` enumerates both sides (no sampling, no slack).
    """
    raw_bounds, per_step_loss = _exact_per_step_loss(model)
    loss_value = float(per_step_loss.mean())

    if mode == "exact":
        probs = _exact_mismatch_probs(model)
        mean_u_ad = float(probs.mean())
        prob_ses = np.zeros(model.steps)
        holds = mean_u_ad <= loss_value and bool(np.all(probs <= raw_bounds + 1e-15))
        return TheoremReport(
            mean_u_ad=mean_u_ad,
            mean_u_ad_se=0.0,
            loss_value=loss_value,
            loss_se=0.0,
            per_step_probs=tuple(float(p) for p in probs),
            per_step_prob_ses=tuple(float(s) for s in prob_ses),
            per_step_bounds=tuple(float(b) for b in raw_bounds),
            inequality_holds=holds,
            margin=loss_value - mean_u_ad,
            steps=model.steps,
            samples=0,
            mode=mode,
            seed=model.seed,
        )

    if mode != "monte_carlo":
        raise ValueError(f"mode must be 'monte_carlo' or 'exact', got {mode!r}")
    if samples < 1000:
        raise ValueError("monte_carlo verification needs samples >= 1000")

    rng = np.random.default_rng([model.seed, 1])
    digits = model.digits()
    length = model.length
    mismatch = np.empty((model.steps, samples))
    chunk = max(1, 2**21 // digits.shape[0])
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        y_idx = rng.choice(digits.shape[0], size=n, p=model.data_dist)
        y_dig = digits[y_idx]
        for t in range(1, model.steps + 1):
            masked = rng.random((n, length)) < t / model.steps
            z = np.where(masked, model.mask_id, y_dig)
            pred = _batch_joint_argmax(model, z)
            mismatch[t - 1, done : done + n] = pred != y_idx
        done += n

    per_sample_u = mismatch.mean(axis=0)
    mean_u_ad = float(per_sample_u.mean())
    mean_u_ad_se = float(per_sample_u.std(ddof=1) / math.sqrt(samples))
    probs = mismatch.mean(axis=1)
    prob_ses = np.sqrt(probs * (1.0 - probs) / samples)

    holds = mean_u_ad <= loss_value + 3.0 * mean_u_ad_se and bool(
        np.all(probs <= raw_bounds + 3.0 * prob_ses)
    )
    return TheoremReport(
        mean_u_ad=mean_u_ad,
        mean_u_ad_se=mean_u_ad_se,
        loss_value=loss_value,
        loss_se=0.0,
        per_step_probs=tuple(float(p) for p in probs),
        per_step_prob_ses=tuple(float(s) for s in prob_ses),
        per_step_bounds=tuple(float(b) for b in raw_bounds),
        inequality_holds=holds,
        margin=loss_value - mean_u_ad,
        steps=model.steps,
        samples=samples,
        mode=mode,
        seed=model.seed,
    )


@dataclass(frozen=True)
class Prop1Check:
    instance_id: str
    view: str
    lower: float
    progressive: float
    average: float
    holds: bool


def _prop1_for_dissimilarities(ds: list[float]) -> tuple[Fraction, Fraction, Fraction]:
    # Floats are exact rationals, so the bound check needs no tolerance.
    total = len(ds)
    exact = [Fraction(d) for d in ds]
    average = sum(exact, Fraction(0)) / total
    progressive = (
        sum((Fraction(total - s + 1, total) * d for s, d in enumerate(exact, start=1)), Fraction(0))
        / total
    )
    return average / total, progressive, average


def verify_prop1(traces: Iterable[InstanceTrace], config: ADConfig) -> list[Prop1Check]:
    """Exact per-trace check that ``AD / T <= progressive AD <= AD``.

    The check runs in rational arithmetic on the per-step dissimilarities, so
    a reported violation is a real one, never floating-point noise.  For the
    block view, each valid block is checked separately.
    """
    out = []
    for trace in traces:
        if config.view == "block":
            views = [f"block:{b}" for b in trace.valid_blocks()]
        else:
            views = [config.view]
        for concrete in views:
            ds = _view_dissimilarities(trace, config, concrete)
            lower, progressive, average = _prop1_for_dissimilarities(ds)
            out.append(
                Prop1Check(
                    instance_id=trace.instance_id,
                    view=concrete,
                    lower=float(lower),
                    progressive=float(progressive),
                    average=float(average),
                    holds=lower <= progressive <= average,
                )
            )
    return out
