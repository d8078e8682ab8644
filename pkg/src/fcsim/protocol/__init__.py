"""Sensor/router training protocols, PoE inference and the communication ledger."""
from fcsim.protocol.inference import OutageSet, compute_Zn, evaluate, infer, poe_combine
from fcsim.protocol.ledger import CommLedger, ledger_formulas
from fcsim.protocol.training import (
    build_system,
    run_three_stage,
    stage1_train,
    stage2_train,
    stage3_distributed,
    stage3_finetune,
    train_e2e,
)

__all__ = [
    "CommLedger", "OutageSet", "build_system", "compute_Zn", "evaluate", "infer", "ledger_formulas",
    "poe_combine", "run_three_stage", "stage1_train", "stage2_train", "stage3_distributed",
    "stage3_finetune", "train_e2e",
]
