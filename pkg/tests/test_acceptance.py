"""Acceptance suite: one test per criterion, each printing a pass line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
summary lines.
"""

from __future__ import annotations

import io
import time

import numpy as np
import pytest

from dlmuq import signals as sig
from dlmuq.cocoa import d_cocoa_global, d_cocoa_local
from dlmuq.dissimilarity import ADConfig, SimilarityProvider, average_dissimilarity, progressive_dissimilarity
from dlmuq.evaluation import EvalRecord, prr, roc_auc
from dlmuq.oracle import (
    ToyDiffusion,
    dirichlet_table,
    draw_mc_samples,
    generate_trace,
    verify_prop1,
    verify_theorem1,
)
from dlmuq.trace import read_traces, validate, write_traces

from . import naive

EXACT = SimilarityProvider("exact_match")
LCS = SimilarityProvider("token_lcs")


def announce(name: str, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: PASS ({detail})")


def random_models(count, rng, vocab_choices=(2, 3, 4), length_choices=(2, 3, 4), step_choices=(1, 2, 3, 4, 6)):
    models = []
    for _ in range(count):
        vocab_size = int(rng.choice(vocab_choices))
        length = int(rng.choice(length_choices))
        models.append(
            ToyDiffusion(
                vocab_size,
                length,
                dirichlet_table(vocab_size, length, 1.0, rng),
                steps=int(rng.choice(step_choices)),
                seed=int(rng.integers(1 << 30)),
                unmask_policy=str(rng.choice(["random_order", "confidence_order"])),
            )
        )
    return models


def test_theorem1_randomized_sweep():
    """20 random configurations, 10^4 samples each, 3-SE one-sided slack."""
    start = time.perf_counter()
    rng = np.random.default_rng(20250810)
    seeds = []
    for i in range(20):
        vocab_size = int(rng.choice([2, 3, 4]))
        length = int(rng.choice([2, 3]))
        steps = int(rng.choice([2, 4, 8]))
        seed = int(rng.integers(1 << 30))
        seeds.append((vocab_size, length, steps, seed))
        model = ToyDiffusion(
            vocab_size, length, dirichlet_table(vocab_size, length, 1.0, rng), steps=steps, seed=seed
        )
        report = verify_theorem1(model, samples=10_000)
        assert report.mean_u_ad <= report.loss_value + 3 * report.mean_u_ad_se, (
            f"config {i} (V={vocab_size}, L={length}, T={steps}, seed={seed}): "
            f"{report.mean_u_ad} > {report.loss_value} + 3se"
        )
        for t, (p, se, bound) in enumerate(
            zip(report.per_step_probs, report.per_step_prob_ses, report.per_step_bounds), start=1
        ):
            assert p <= bound + 3 * se, f"config {i} step {t}: {p} > {bound} + 3*{se}"
        assert report.inequality_holds
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0, f"sweep took {elapsed:.1f}s"
    announce(
        "theorem-bound-sweep",
        f"20 configs x 10^4 samples in {elapsed:.1f}s; seeds logged: {seeds[:3]}...",
    )


def test_theorem1_exact_enumeration_case():
    """Uniform V=2, L=2, T=2: both sides enumerated, no sampling."""
    start = time.perf_counter()
    model = ToyDiffusion(2, 2, np.full(4, 0.25), steps=2, seed=0)
    report = verify_theorem1(model, mode="exact")
    brute_u, brute_loss = naive.brute_theorem_sides(model)
    assert abs(report.mean_u_ad - brute_u) < 1e-10
    assert abs(report.loss_value - brute_loss) < 1e-10
    assert report.mean_u_ad < report.loss_value  # strict
    assert report.inequality_holds
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"exact case took {elapsed:.3f}s"
    announce(
        "theorem-bound-exact-case",
        f"E[u]={report.mean_u_ad:.6f} < loss={report.loss_value:.6f}, "
        f"brute-force agreement < 1e-10, {elapsed * 1000:.0f}ms",
    )


def test_prop1_progressive_bounds_over_1000_traces():
    """AD/T <= progressive <= AD, exact rational arithmetic, two providers."""
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    traces = []
    for model in random_models(8, rng, step_choices=(2, 3, 4)):
        traces.extend(
            generate_trace(model, 125, decode="ancestral", blocks=1 + (model.seed % 2))
        )
    assert len(traces) == 1000
    checked = 0
    for provider in (EXACT, LCS):
        config = ADConfig("full", provider)
        checks = verify_prop1(traces, config)
        assert all(c.holds for c in checks)
        checked += len(checks)
        # The float signal path satisfies the same bounds.
        for trace in traces[::25]:
            avg = average_dissimilarity(trace, config).value
            prog = progressive_dissimilarity(trace, config).value
            total = sum(trace.steps_per_block)
            assert avg / total <= prog <= avg
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"prop1 sweep took {elapsed:.1f}s"
    announce(
        "progressive-bounds",
        f"{checked} exact checks over 1000 traces x 2 providers, 0 violations, {elapsed:.1f}s",
    )


def test_prr_calibration():
    """Oracle ordering scores 1; independent uncertainty averages to 0;
    brute-force agreement on all small fixtures."""
    rng = np.random.default_rng(424242)
    qualities = rng.permutation(500) / 500.0
    records = [EvalRecord(f"r{i:04d}", float(q), -float(q)) for i, q in enumerate(qualities)]
    oracle_prr = prr(records).prr
    assert abs(oracle_prr - 1.0) < 1e-9

    base = [EvalRecord(f"r{i:03d}", float(rng.random()), 0.0) for i in range(200)]
    uncs = rng.normal(size=len(base))
    values = []
    for seed in range(1000):
        perm = np.random.default_rng(seed).permutation(len(base))
        shuffled = [
            EvalRecord(r.instance_id, r.quality, float(uncs[j])) for r, j in zip(base, perm)
        ]
        values.append(prr(shuffled).prr)
    mean_prr = float(np.mean(values))
    assert abs(mean_prr) < 0.02

    max_prr_err = 0.0
    for n in range(10, 101, 10):
        fixture = [
            EvalRecord(
                f"f{i:03d}",
                float(np.random.default_rng(n * 100 + i).choice([0.0, 0.3, 0.7, 1.0])),
                float(np.round(np.random.default_rng(n * 200 + i).normal(), 1)),
            )
            for i in range(n)
        ]
        max_prr_err = max(max_prr_err, abs(prr(fixture).prr - naive.naive_prr(fixture)))
        labeled = [EvalRecord(r.instance_id, float(r.quality >= 0.5), r.uncertainty) for r in fixture]
        if len({r.quality for r in labeled}) == 2:
            assert roc_auc(labeled, 0.5) == naive.naive_roc_auc(labeled, 0.5)
    assert max_prr_err <= 1e-12
    announce(
        "prr-calibration",
        f"oracle prr err {abs(oracle_prr - 1.0):.2e}; independent mean {mean_prr:+.4f}; "
        f"brute-force prr err {max_prr_err:.2e}, roc-auc exact",
    )


def test_mcnll_estimator_against_enumeration():
    """V=5, L=4: 4096-sample estimate within 2% of the exhaustive value and
    batch variance shrinking like 1/N."""
    rng = np.random.default_rng(7)
    model = ToyDiffusion(5, 4, dirichlet_table(5, 4, 1.0, rng), steps=4, seed=13)
    trace = generate_trace(model, 1, decode="ancestral")[0]
    y = list(trace.final_tokens[0])

    exhaustive = naive.mcnll_expectation(model, y)
    sample_rng = np.random.default_rng(31337)
    big = draw_mc_samples(model, [y], 4096, sample_rng)
    import dataclasses

    def mcnll_of(samples):
        return sig.mcnll(dataclasses.replace(trace, mc_samples=tuple(samples))).value

    estimate = mcnll_of(big)
    rel_err = abs(estimate - exhaustive) / exhaustive
    assert rel_err < 0.02, f"relative error {rel_err:.4f}"

    # Disjoint batches from one pool: variance across batch means ~ 1/N.
    pool = draw_mc_samples(model, [y], 16 * 32 + 256 * 32 + 4096 * 16, sample_rng)
    pool = list(pool)
    variances = {}
    cursor = 0
    for n_batch, k in ((16, 32), (256, 32), (4096, 16)):
        means = []
        for _ in range(k):
            means.append(mcnll_of(pool[cursor : cursor + n_batch]))
            cursor += n_batch
        variances[n_batch] = float(np.var(means, ddof=1))
    ratio_a = variances[16] / variances[256]
    ratio_b = variances[256] / variances[4096]
    for ratio in (ratio_a, ratio_b):
        assert 16 / 3 < ratio < 16 * 3, f"variance ratios {ratio_a:.1f}, {ratio_b:.1f}"
    announce(
        "mcnll-estimator",
        f"rel err {rel_err:.4f} at N=4096 (exhaustive {exhaustive:.4f}); "
        f"variance ratios {ratio_a:.1f}, {ratio_b:.1f} (ideal 16)",
    )


def test_signal_replay_equivalence_on_100_traces():
    rng = np.random.default_rng(1001)
    traces = []
    for model in random_models(10, rng):
        decode = "ancestral" if model.seed % 2 else "greedy"
        traces.extend(generate_trace(model, 10, decode=decode, n_mc=4, blocks=1 + (model.seed % 3 == 0)))
    assert len(traces) == 100
    replays = {
        "traj_nll": naive.replay_traj_nll,
        "traj_entropy": naive.replay_traj_entropy,
        "commit_nll": naive.replay_commit_nll,
        "remask": naive.replay_remask,
        "flip_count": naive.replay_flip_count,
    }
    worst = 0.0
    for trace in traces:
        for name, replay in replays.items():
            err = abs(sig.SIGNAL_CATALOG[name](trace).value - replay(trace))
            worst = max(worst, err)
            assert err <= 1e-12, f"{name} replay mismatch {err}"
        assert sig.nfe(trace).value == trace.nfe
    announce("signal-replay", f"6 signals x 100 traces, max |err| = {worst:.2e} <= 1e-12")


def _scenario_prr(seed: int):
    rng = np.random.default_rng(seed)
    # Sharpen a random table so a clear mode exists but off-mode outputs stay common.
    table = dirichlet_table(3, 4, 0.3, rng)
    table = table**1.5
    table = table / table.sum()
    model = ToyDiffusion(3, 4, table, steps=4, seed=seed)
    traces = generate_trace(model, 240, decode="ancestral", n_mc=16)
    mode = model.mode_sequence()
    provider = LCS

    def records_for(score_fn):
        out = []
        for trace in traces:
            value = score_fn(trace)
            quality = 1.0 if trace.final_tokens[0] == mode else 0.0
            out.append(EvalRecord(trace.instance_id, quality, value.value))
        return out

    scores = {
        "d_cocoa_global": lambda t: d_cocoa_global(t, provider),
        "mcnll_norm": sig.mcnll_norm,
        "nfe": sig.nfe,
        "ad_full": lambda t: average_dissimilarity(t, ADConfig("full", provider)),
        "d_cocoa_local": lambda t: d_cocoa_local(t, provider),
        "commit_nll": sig.commit_nll,
        "ad_block": lambda t: average_dissimilarity(t, ADConfig("block", provider)),
    }
    return {name: prr(records_for(fn)).prr for name, fn in scores.items()}


def test_d_cocoa_directional_sanity():
    """Combined scores beat their weakest factor and stay above zero when
    quality marks exact recovery of the distribution mode."""
    lines = []
    for seed in (101, 202, 303):
        prrs = _scenario_prr(seed)
        floors = []
        for combo, factors in (
            ("d_cocoa_global", ("mcnll_norm", "nfe", "ad_full")),
            ("d_cocoa_local", ("commit_nll", "ad_block")),
        ):
            floor = min(prrs[f] for f in factors)
            floors.append(floor)
            assert prrs[combo] > 0.0, f"seed {seed}: {combo} prr {prrs[combo]:.3f}"
            assert prrs[combo] >= floor, (
                f"seed {seed}: {combo} prr {prrs[combo]:.3f} below factor floor {floor:.3f}"
            )
        lines.append(
            f"seed {seed}: G={prrs['d_cocoa_global']:.2f} (floor {floors[0]:.2f}), "
            f"L={prrs['d_cocoa_local']:.2f} (floor {floors[1]:.2f})"
        )
    announce("d-cocoa-sanity", "; ".join(lines))


def test_roundtrip_and_validation():
    rng = np.random.default_rng(2025)
    traces = []
    for model in random_models(10, rng):
        traces.extend(generate_trace(model, 20, decode="ancestral", n_mc=6, blocks=1 + (model.seed % 2)))
    assert len(traces) == 200
    clean = sum(1 for t in traces if validate(t) == [])
    assert clean == len(traces)

    groups: dict[object, list] = {}
    for t in traces:
        groups.setdefault(t.header_ref, []).append(t)
    for group in groups.values():
        buf = io.BytesIO()
        write_traces(group, buf)
        buf.seek(0)
        recovered = list(read_traces(buf))
        assert recovered == group
        buf2 = io.BytesIO()
        write_traces(recovered, buf2)
        assert buf2.getvalue() == buf.getvalue()
    announce("roundtrip-validation", f"{clean}/{len(traces)} traces valid; write-read-write byte-stable")
