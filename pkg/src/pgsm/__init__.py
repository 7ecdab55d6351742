"""Particle Gibbs split-merge sampling for conjugate mixture models."""
from .core import PGSMConfig, pgsm_step, run_smc, split_merge_move
from .likelihoods import BetaBernoulli, NormalInverseWishart, PyCloneGrid, make_model
from .partition import Clustering, DirichletProcess, FiniteDirichlet, PitmanYor
from .samplers import Chain, ChainConfig, KernelSchedule, run_chain
from .state import ClusterState

__version__ = "0.1.0"

__all__ = [
    "BetaBernoulli",
    "Chain",
    "ChainConfig",
    "ClusterState",
    "Clustering",
    "DirichletProcess",
    "FiniteDirichlet",
    "KernelSchedule",
    "NormalInverseWishart",
    "PGSMConfig",
    "PitmanYor",
    "PyCloneGrid",
    "make_model",
    "pgsm_step",
    "run_chain",
    "run_smc",
    "split_merge_move",
]
