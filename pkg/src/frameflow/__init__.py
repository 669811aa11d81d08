"""Frame-wise flow matching for tiny video grids.

A desk-scale study of training a video velocity-field model with one timestep
per frame instead of one per clip: a tape-differentiated tensor engine, a
frame-conditioned transformer, the vectorized flow-matching objective, LoRA
adaptation, and an Euler sampler that clamps, partially re-noises, or
generates each frame independently.
"""

from .analysis import (AttentionProbe, DriftReport, attention_probe,
                       conditioning_fidelity, drift_report, dynamic_degree,
                       label_agreement, smoothness)
from .data import (DIRECTIONS, LABEL_NAMES, VideoSample, centroid,
                   centroid_track, gen_bouncing, read_dataset, read_fvt,
                   write_dataset, write_fvt, write_pgm)
from .errors import NumericError, ValidationError
from .flow import (TrainConfig, fafm_loss, interpolate, target_field, train,
                   training_draw)
from .model import (AttentionRecord, Checkpoint, ModelConfig, attach_lora,
                    forward, forward_scalar, forward_with_attention,
                    init_model, merge_lora, read_ckpt, scale_lora_alpha,
                    write_ckpt)
from .sampler import (SampleRequest, euler_sample, euler_sample_scalar,
                      mode_presets, parse_mode, prepare_initial,
                      request_from_sample)
from .tensor import Tensor, backward, derive_seed, no_grad, seeded_randn
from .timestep import (FramePlan, FrameRole, NoiseSchedule, compile_plan,
                       embed_timesteps, make_schedule, parse_role, ptss_sample,
                       tau_of_sigma)

__version__ = "0.1.0"

__all__ = [
    "AttentionProbe", "AttentionRecord", "Checkpoint", "DIRECTIONS",
    "DriftReport", "FramePlan", "FrameRole", "LABEL_NAMES", "ModelConfig",
    "NoiseSchedule", "NumericError", "SampleRequest", "Tensor", "TrainConfig",
    "ValidationError", "VideoSample", "attach_lora", "attention_probe",
    "backward", "centroid", "centroid_track", "compile_plan",
    "conditioning_fidelity", "derive_seed", "drift_report", "dynamic_degree",
    "embed_timesteps", "euler_sample", "euler_sample_scalar", "fafm_loss",
    "forward", "forward_scalar", "forward_with_attention", "gen_bouncing",
    "init_model", "interpolate", "label_agreement", "make_schedule",
    "merge_lora", "mode_presets", "no_grad", "parse_mode", "parse_role",
    "prepare_initial", "ptss_sample", "read_ckpt", "read_dataset", "read_fvt",
    "request_from_sample", "scale_lora_alpha", "seeded_randn", "smoothness",
    "target_field", "tau_of_sigma", "train", "training_draw", "write_ckpt",
    "write_dataset", "write_fvt", "write_pgm",
]
