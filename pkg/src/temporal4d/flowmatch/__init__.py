from .checkpoint import (
    CHECKPOINT_VERSION,
    CheckpointVersionError,
    load_checkpoint,
    read_loss_csv,
    save_checkpoint,
    write_loss_csv,
)
from .flow import (
    CLIP_HOP,
    CLIP_LEN,
    TrainResult,
    clip_starts,
    euler_sample,
    flow_target,
    fm_loss,
    fm_loss_batch,
    frame_noise,
    interpolate,
    smooth,
    train_demo,
)
from .model import ToyDiT, ToyDiTConfig, time_embedding
from .synth import Codec, MotionParams, decode_latents, state_to_meshes, synth_sequence

__all__ = [
    "CHECKPOINT_VERSION", "CLIP_HOP", "CLIP_LEN", "CheckpointVersionError", "Codec",
    "MotionParams", "ToyDiT", "ToyDiTConfig", "TrainResult", "clip_starts",
    "decode_latents", "euler_sample", "flow_target", "fm_loss", "fm_loss_batch", "frame_noise",
    "interpolate", "load_checkpoint", "read_loss_csv", "save_checkpoint", "smooth",
    "state_to_meshes", "synth_sequence", "time_embedding", "train_demo", "write_loss_csv",
]
