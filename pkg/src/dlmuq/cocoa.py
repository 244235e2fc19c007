"""Multiplicative combinations of an information-based signal with trajectory
dissimilarity, optionally scaled by the forward-pass count.

Every factor is nonnegative, so the product is nonnegative and monotone in
each factor.  A factor that is undefined makes the product undefined rather
than silently dropping out, since a missing factor would change the ranking
semantics of the combined score.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import signals as sig
from .dissimilarity import ADConfig, SimilarityProvider, trajectory_dissimilarity
from .signals import SignalValue
from .trace import InstanceTrace

INFO_SIGNALS = ("mcnll", "mcnll_norm", "traj_nll", "traj_entropy", "commit_nll")


@dataclass(frozen=True)
class CocoaConfig:
    info_signal: str
    consistency: ADConfig
    include_nfe: bool = False
    variant_name: str = "d_cocoa"

    def __post_init__(self):
        if self.info_signal not in INFO_SIGNALS:
            raise ValueError(
                f"info_signal must be one of {INFO_SIGNALS}, got {self.info_signal!r}"
            )


def d_cocoa(trace: InstanceTrace, config: CocoaConfig) -> SignalValue:
    """Product of the configured information score, the trajectory
    dissimilarity, and (optionally) the forward-pass count."""
    info = sig.SIGNAL_CATALOG[config.info_signal](trace)
    consistency = trajectory_dissimilarity(trace, config.consistency)
    if not info.well_defined or not consistency.well_defined:
        return SignalValue(config.variant_name, float("nan"), well_defined=False)
    value = info.value * consistency.value
    if config.include_nfe:
        value *= sig.nfe(trace).value
    return SignalValue(config.variant_name, value)


def local_config(provider: SimilarityProvider) -> CocoaConfig:
    """Commitment confidence times per-block trajectory dissimilarity."""
    return CocoaConfig(
        info_signal="commit_nll",
        consistency=ADConfig(view="block", provider=provider, weighted=False),
        include_nfe=False,
        variant_name="d_cocoa_local",
    )


def global_config(provider: SimilarityProvider) -> CocoaConfig:
    """Length-normalized masked NLL times full-trajectory dissimilarity,
    scaled by the forward-pass count as a generation-complexity penalty."""
    return CocoaConfig(
        info_signal="mcnll_norm",
        consistency=ADConfig(view="full", provider=provider, weighted=False),
        include_nfe=True,
        variant_name="d_cocoa_global",
    )


def d_cocoa_local(trace: InstanceTrace, provider: SimilarityProvider) -> SignalValue:
    return d_cocoa(trace, local_config(provider))


def d_cocoa_global(trace: InstanceTrace, provider: SimilarityProvider) -> SignalValue:
    return d_cocoa(trace, global_config(provider))
