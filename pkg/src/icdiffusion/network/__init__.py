from .checkpoint import (
    Checkpoint,
    CheckpointVersionError,
    CorruptCheckpointError,
    load_model,
    model_state_tensors,
    read_checkpoint,
    save_model,
    write_checkpoint,
)
from .model import (
    BASE_PHASE,
    PROMPT_PHASE,
    ControlBranch,
    DiffusionModel,
    PhaseError,
    init_control_from_base,
    lock_encoder,
    locked_parameter_names,
)
from .text import TextEncoder, encode_text
from .unet import ModelConfig, timestep_embedding

__all__ = [
    "Checkpoint",
    "CheckpointVersionError",
    "CorruptCheckpointError",
    "load_model",
    "model_state_tensors",
    "read_checkpoint",
    "save_model",
    "write_checkpoint",
    "BASE_PHASE",
    "PROMPT_PHASE",
    "ControlBranch",
    "DiffusionModel",
    "PhaseError",
    "init_control_from_base",
    "lock_encoder",
    "locked_parameter_names",
    "TextEncoder",
    "encode_text",
    "ModelConfig",
    "timestep_embedding",
]
