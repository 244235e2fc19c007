"""Uncertainty quantification for masked diffusion language models from
recorded denoising trajectories."""

from .cocoa import CocoaConfig, d_cocoa, d_cocoa_global, d_cocoa_local
from .dissimilarity import (
    ADConfig,
    SimilarityProvider,
    average_dissimilarity,
    progressive_dissimilarity,
    similarity_batch,
)
from .evaluation import EvalRecord, PRRResult, join, prr, rejection_curve, roc_auc
from .oracle import (
    TheoremReport,
    ToyDiffusion,
    exact_posterior,
    generate_trace,
    masking_loss,
    verify_prop1,
    verify_theorem1,
)
from .signals import SignalValue, UncertaintyReport, score_all
from .trace import (
    InstanceTrace,
    MCMaskSample,
    PositionObs,
    StepRecord,
    TraceHeader,
    Violation,
    Vocab,
    intermediate_sequence,
    read_traces,
    validate,
    write_traces,
)

__all__ = [
    "ADConfig",
    "CocoaConfig",
    "EvalRecord",
    "InstanceTrace",
    "MCMaskSample",
    "PRRResult",
    "PositionObs",
    "SignalValue",
    "SimilarityProvider",
    "StepRecord",
    "TheoremReport",
    "ToyDiffusion",
    "TraceHeader",
    "UncertaintyReport",
    "Violation",
    "Vocab",
    "average_dissimilarity",
    "d_cocoa",
    "d_cocoa_global",
    "d_cocoa_local",
    "exact_posterior",
    "generate_trace",
    "intermediate_sequence",
    "join",
    "masking_loss",
    "progressive_dissimilarity",
    "prr",
    "read_traces",
    "rejection_curve",
    "roc_auc",
    "score_all",
    "similarity_batch",
    "validate",
    "verify_prop1",
    "verify_theorem1",
    "write_traces",
]

__version__ = "0.1.0"
