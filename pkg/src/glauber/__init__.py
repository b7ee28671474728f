"""Glauber dynamics engine and mixing diagnostics for local conditional scorers."""

from .core import (
    DistanceFn,
    ScorerContract,
    SeqState,
    Vocabulary,
    hamming_distance,
    normalized_hamming,
    random_state,
    tempered_conditional,
    tv_distance,
)
from .dynamics import (
    CouplingResult,
    GlauberKernel,
    Observer,
    RunResult,
    coupling_meeting_time,
    distance_observer,
    glauber_step,
    hitting_time,
    maximal_coupling_step,
    run_chain,
)
from .errors import (
    CapacityError,
    DomainError,
    InputError,
    ProtocolError,
    ScoringError,
    TransportError,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "CouplingResult",
    "DistanceFn",
    "DomainError",
    "GlauberKernel",
    "InputError",
    "Observer",
    "ProtocolError",
    "RunResult",
    "ScorerContract",
    "ScoringError",
    "SeqState",
    "TransportError",
    "Vocabulary",
    "coupling_meeting_time",
    "distance_observer",
    "glauber_step",
    "hamming_distance",
    "hitting_time",
    "maximal_coupling_step",
    "normalized_hamming",
    "random_state",
    "run_chain",
    "tempered_conditional",
    "tv_distance",
    "__version__",
]
