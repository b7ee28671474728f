from .potts import PottsGibbsScorer
from .tabular import TabularScorer
from .perturbed import PerturbedScorer
from .synthetic import FixedConditionalScorer, UniformScorer
from .remote import RemoteScorer

__all__ = [
    "PottsGibbsScorer",
    "TabularScorer",
    "PerturbedScorer",
    "FixedConditionalScorer",
    "UniformScorer",
    "RemoteScorer",
]
