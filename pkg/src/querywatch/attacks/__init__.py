from .blinding import (blind_batch_queries, blind_query, diversity_greedy, diversity_independent_set,
                       softlabel_extrapolate)
from .boundary import BoundaryParams, boundary_attack
from .nes import NesParams, estimate_score, nes_attack, nes_gradient
from .oracle import AttackTrace, FunctionOracle, ModelOracle, Oracle, OracleBanned
from .surrogate import HybridParams, fgsm, hybrid_surrogate_attack, pgd_margin

__all__ = [
    "AttackTrace", "BoundaryParams", "FunctionOracle", "HybridParams", "ModelOracle", "NesParams",
    "Oracle", "OracleBanned", "blind_batch_queries", "blind_query", "boundary_attack", "diversity_greedy",
    "diversity_independent_set", "estimate_score", "fgsm", "hybrid_surrogate_attack", "nes_attack",
    "nes_gradient", "pgd_margin", "softlabel_extrapolate",
]
