"""Structure attacks on graph neural networks."""
from .core import (FLOOR, AttackBudget, AttackError, AttackResult, CapacityError, StateMeter, apply_flips,
                   project_onto_budget, read_diff, sample_final, top_delta)
from .dice import DICEConfig, dice, dice_local
from .greedy import FGSMConfig, GRBCDConfig, budget_schedule, fgsm_dense, grbcd_global
from .local import prbcd_local_pprgo
from .prbcd import PRBCDConfig, pgd_dense, prbcd_global
from .spaces import DirectedOffDiagonal, IncomingRow, UpperTriangular

__all__ = [
    "FLOOR", "AttackBudget", "AttackError", "AttackResult", "CapacityError", "StateMeter", "apply_flips",
    "project_onto_budget", "read_diff", "sample_final", "top_delta", "DICEConfig", "dice", "dice_local",
    "FGSMConfig", "GRBCDConfig", "budget_schedule", "fgsm_dense", "grbcd_global", "prbcd_local_pprgo",
    "PRBCDConfig", "pgd_dense", "prbcd_global", "DirectedOffDiagonal", "IncomingRow", "UpperTriangular",
]
