from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, save_loss_trace
from .core import (
    CouplingBatch,
    DivergenceError,
    SolverBlowUp,
    SolverConfig,
    TrainConfig,
    flow_loss,
    flow_loss_and_grad,
    integrate,
    reflow,
    sample_forward,
    sample_reverse,
    straightness,
    train_flow,
    train_on_pairs,
)
from .mlp import Adam, Architecture, FlowError, FlowModel, velocity_eval

__all__ = [
    "Adam", "Architecture", "CheckpointError", "CouplingBatch", "DivergenceError", "FlowError",
    "FlowModel", "SolverBlowUp", "SolverConfig", "TrainConfig", "flow_loss", "flow_loss_and_grad",
    "integrate", "load_checkpoint", "reflow", "sample_forward", "sample_reverse", "save_checkpoint",
    "save_loss_trace", "straightness", "train_flow", "train_on_pairs", "velocity_eval",
]
