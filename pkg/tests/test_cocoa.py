from __future__ import annotations

import dataclasses
import math

import pytest

from dlmuq import signals as sig
from dlmuq.cocoa import CocoaConfig, d_cocoa, d_cocoa_global, d_cocoa_local, global_config, local_config
from dlmuq.dissimilarity import ADConfig, SimilarityProvider, average_dissimilarity
from dlmuq.oracle import generate_trace

from .conftest import build_trace

LCS = SimilarityProvider("token_lcs")


def test_zero_info_factor_absorbs(sim_traces):
    trace = build_trace(
        [
            {
                "final": [0, 1],
                "steps": [
                    [(2, -0.9, 0.7, True, False, False), (1, 0.0, 0.1, True, True, False)],
                    [(0, 0.0, 0.2, True, True, False), (1, 0.0, 0.0, False, False, False)],
                ],
            }
        ]
    )
    assert sig.commit_nll(trace).value == 0.0
    assert d_cocoa_local(trace, SimilarityProvider("exact_match")).value == 0.0


def test_product_identity(sim_traces):
    for trace in sim_traces[:8]:
        local = d_cocoa_local(trace, LCS)
        expected = sig.commit_nll(trace).value * average_dissimilarity(trace, ADConfig("block", LCS)).value
        assert local.value == expected  # bitwise: the product is the definition

        global_ = d_cocoa_global(trace, LCS)
        expected_g = (
            sig.mcnll_norm(trace).value
            * average_dissimilarity(trace, ADConfig("full", LCS)).value
            * sig.nfe(trace).value
        )
        assert global_.value == pytest.approx(expected_g, rel=1e-15)


def test_named_variants_equal_generic_configs(sim_traces):
    for trace in sim_traces[:8]:
        assert d_cocoa_local(trace, LCS) == d_cocoa(trace, local_config(LCS))
        assert d_cocoa_global(trace, LCS) == d_cocoa(trace, global_config(LCS))


def test_undefined_factor_propagates(sim_traces):
    bare = dataclasses.replace(sim_traces[0], mc_samples=())
    result = d_cocoa_global(bare, LCS)
    assert not result.well_defined
    assert math.isnan(result.value)


def test_monotone_in_info_factor(sim_traces):
    trace = sim_traces[0]
    base = d_cocoa_local(trace, LCS)

    # Deepen one commit's log-probability; dissimilarity is unchanged because
    # no argmax token moves, so the product must not decrease.
    def deepen(t):
        new_steps = []
        done = False
        for rec in t.steps:
            positions = []
            for p in rec.positions:
                if p.committed_now and not done:
                    p = dataclasses.replace(p, argmax_logprob=p.argmax_logprob - 2.0)
                    done = True
                positions.append(p)
            new_steps.append(dataclasses.replace(rec, positions=tuple(positions)))
        return dataclasses.replace(t, steps=tuple(new_steps))

    deeper = d_cocoa_local(deepen(trace), LCS)
    assert deeper.value >= base.value


def test_optional_nfe_factor(sim_traces):
    trace = sim_traces[0]
    with_nfe = d_cocoa(
        trace,
        CocoaConfig("traj_nll", ADConfig("full", LCS), include_nfe=True, variant_name="v1"),
    )
    without = d_cocoa(
        trace,
        CocoaConfig("traj_nll", ADConfig("full", LCS), include_nfe=False, variant_name="v2"),
    )
    assert with_nfe.value == pytest.approx(without.value * trace.nfe, rel=1e-15)


def test_weighted_consistency_config(mid_model):
    trace = generate_trace(mid_model, 1)[0]
    weighted = d_cocoa(
        trace,
        CocoaConfig("traj_entropy", ADConfig("full", LCS, weighted=True), variant_name="w"),
    )
    unweighted = d_cocoa(
        trace,
        CocoaConfig("traj_entropy", ADConfig("full", LCS, weighted=False), variant_name="u"),
    )
    assert weighted.value <= unweighted.value + 1e-12


def test_rejects_non_info_signal():
    with pytest.raises(ValueError, match="info_signal"):
        CocoaConfig("nfe", ADConfig("full", LCS))
