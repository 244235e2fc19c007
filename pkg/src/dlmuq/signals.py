"""Scalar uncertainty signals computed from a single denoising trace.

Every signal is a pure function of the trace: larger means more uncertain.
Scores whose preconditions are unmet (no mask samples, single-token output,
no valid blocks) come back with ``well_defined=False`` instead of raising,
so batch scoring never aborts on a benign gap in the data.
"""

from __future__ import annotations

from dataclasses import dataclass

from .trace import InstanceTrace


class SignalDataError(Exception):
    """The trace carries data that contradicts a signal's contract."""


@dataclass(frozen=True)
class SignalValue:
    name: str
    value: float
    well_defined: bool = True


@dataclass(frozen=True)
class UncertaintyReport:
    instance_id: str
    signals: dict[str, SignalValue]

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "signals": {
                name: {"value": sv.value, "well_defined": sv.well_defined}
                for name, sv in self.signals.items()
            },
        }


def _undefined(name: str) -> SignalValue:
    return SignalValue(name, float("nan"), well_defined=False)


def mcnll(trace: InstanceTrace) -> SignalValue:
    """Masked negative log-likelihood estimate from the trace's mask samples.

    Each sample of ``l`` masked positions contributes ``-(|y|/l) * sum_logprob``;
    the signal is the mean over samples.  Undefined without samples or for
    single-token outputs, where masking the output is not meaningful.
    """
    n_out = trace.output_length()
    if not trace.mc_samples or n_out <= 1:
        return _undefined("mcnll")
    total = 0.0
    for m in trace.mc_samples:
        if m.l < 1 or m.l > n_out:
            raise SignalDataError(
                f"mc sample {m.sample_index} of {trace.instance_id!r} has l={m.l}, "
                f"output length {n_out}"
            )
        total += (n_out / m.l) * m.sum_logprob
    return SignalValue("mcnll", -total / len(trace.mc_samples))


def mcnll_norm(trace: InstanceTrace) -> SignalValue:
    base = mcnll(trace)
    if not base.well_defined:
        return _undefined("mcnll_norm")
    return SignalValue("mcnll_norm", base.value / trace.output_length())


def traj_nll(trace: InstanceTrace) -> SignalValue:
    """Mean negative log-probability of the predicted token over all steps.

    Valid blocks are averaged over their own actual step counts, so blocks
    that stopped early are not over- or under-weighted.
    """
    valid = set(trace.valid_blocks())
    total_steps = 0
    acc = 0.0
    for rec in trace.steps:
        if rec.block not in valid:
            continue
        total_steps += 1
        acc += sum(p.argmax_logprob for p in rec.positions) / len(rec.positions)
    if total_steps == 0:
        return _undefined("traj_nll")
    return SignalValue("traj_nll", -acc / total_steps)


def traj_entropy(trace: InstanceTrace) -> SignalValue:
    """Mean full-vocabulary predictive entropy over all steps of valid blocks."""
    valid = set(trace.valid_blocks())
    total_steps = 0
    acc = 0.0
    for rec in trace.steps:
        if rec.block not in valid:
            continue
        total_steps += 1
        acc += sum(p.entropy for p in rec.positions) / len(rec.positions)
    if total_steps == 0:
        return _undefined("traj_entropy")
    return SignalValue("traj_entropy", acc / total_steps)


def commit_nll(trace: InstanceTrace) -> SignalValue:
    """Mean negative log-probability at each token's commitment step."""
    vocab = trace.header_ref.vocab
    n_out = trace.output_length()
    if n_out == 0:
        return _undefined("commit_nll")
    commit_lp: dict[tuple[int, int], float] = {}
    for rec in trace.steps:
        for p in rec.positions:
            if p.committed_now:
                commit_lp[(rec.block, p.position)] = p.argmax_logprob
    acc = 0.0
    for b, toks in enumerate(trace.final_tokens):
        for k, t in enumerate(toks):
            if vocab.is_special(t):
                continue
            if (b, k) not in commit_lp:
                raise SignalDataError(
                    f"{trace.instance_id!r}: no commit event for position (b={b}, k={k})"
                )
            acc += commit_lp[(b, k)]
    return SignalValue("commit_nll", -acc / n_out)


def nfe(trace: InstanceTrace) -> SignalValue:
    """Total number of denoiser forward passes used for this generation."""
    return SignalValue("nfe", float(trace.nfe))


def remask(trace: InstanceTrace, mode: str = "events") -> SignalValue:
    """Average per-step masking activity.

    ``events`` counts re-masking events per step (the default); the
    ``masked_state`` alternative counts positions still in a masked state.
    """
    if trace.nfe < 1:
        return _undefined("remask")
    if mode == "events":
        count = sum(1 for rec in trace.steps for p in rec.positions if p.remasked_now)
    elif mode == "masked_state":
        count = sum(1 for rec in trace.steps for p in rec.positions if p.was_masked)
    else:
        raise ValueError(f"remask mode must be 'events' or 'masked_state', got {mode!r}")
    return SignalValue("remask", count / trace.nfe)


def flip_count(trace: InstanceTrace) -> SignalValue:
    """Average number of changes of the most probable token between steps."""
    n_out = trace.output_length()
    if n_out == 0:
        return _undefined("flip_count")
    flips = 0
    for b in range(trace.num_blocks):
        recs = trace.block_steps(b)
        for prev, cur in zip(recs, recs[1:]):
            for p_prev, p_cur in zip(prev.positions, cur.positions):
                if p_prev.argmax_token != p_cur.argmax_token:
                    flips += 1
    return SignalValue("flip_count", flips / n_out)


SIGNAL_CATALOG: dict[str, object] = {
    "mcnll": mcnll,
    "mcnll_norm": mcnll_norm,
    "traj_nll": traj_nll,
    "traj_entropy": traj_entropy,
    "commit_nll": commit_nll,
    "nfe": nfe,
    "remask": remask,
    "flip_count": flip_count,
}


def score_all(trace: InstanceTrace, selection: set[str] | None = None) -> UncertaintyReport:
    """Evaluate the selected signals (default: the whole catalog) on one trace."""
    names = sorted(SIGNAL_CATALOG) if selection is None else sorted(selection)
    unknown = [n for n in names if n not in SIGNAL_CATALOG]
    if unknown:
        raise KeyError(f"unknown signal name(s) {unknown}; catalog: {sorted(SIGNAL_CATALOG)}")
    return UncertaintyReport(
        instance_id=trace.instance_id,
        signals={name: SIGNAL_CATALOG[name](trace) for name in names},
    )
