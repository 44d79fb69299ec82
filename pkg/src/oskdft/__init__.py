"""One-step knowledge distillation and fine-tuning for speaker verification."""

from .config import RunConfig, load_config
from .distillation import LossWeights, joint_loss, kd_loss, kl_kd_loss
from .evaluation import ScoreSet, compute_eer
from .init import init_student_from_teacher, random_store
from .model import ModelConfig, ParameterStore, dual_path_forward
from .schedule import ScheduleParams, lr_adapter, lr_backbone, lr_classifier
from .speaker_head import SpeakerHeadConfig, aam_softmax_loss, extract_embedding
from .trainer import pretrain_teacher, run

__version__ = "0.1.0"

__all__ = [
    "LossWeights", "ModelConfig", "ParameterStore", "RunConfig", "ScheduleParams", "ScoreSet", "SpeakerHeadConfig",
    "aam_softmax_loss", "compute_eer", "dual_path_forward", "extract_embedding", "init_student_from_teacher",
    "joint_loss", "kd_loss", "kl_kd_loss", "load_config", "lr_adapter", "lr_backbone", "lr_classifier",
    "pretrain_teacher", "random_store", "run",
]
