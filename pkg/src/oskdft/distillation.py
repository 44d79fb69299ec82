"""Distillation objectives: feature MSE, posterior KL, and the joint loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import ModelConfig, Params, ssl_forward


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    kd_scale: float = 100.0
    sv_scale: float = 1.0

    def __post_init__(self):
        # zero is allowed so a loss can be switched off for paired-run checks
        for name in ("kd_scale", "sv_scale"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def teacher_forward(batch: torch.Tensor, teacher: Params, cfg: ModelConfig,
                    student_cfg: ModelConfig | None = None) -> torch.Tensor:
    """Final-layer teacher features, computed without recording gradients."""
    if student_cfg is not None and student_cfg.cnn_strides != cfg.cnn_strides:
        raise ValueError(
            f"teacher strides {cfg.cnn_strides} != student strides {student_cfg.cnn_strides}; "
            "frame rates must match for feature distillation")
    with torch.no_grad():
        return ssl_forward(batch, teacher, cfg, cfg.n_layers_teacher)


def kd_loss(student_kd: torch.Tensor, teacher_out: torch.Tensor, w: LossWeights = LossWeights()) -> torch.Tensor:
    if student_kd.shape != teacher_out.shape:
        raise ValueError(f"shape mismatch {tuple(student_kd.shape)} vs {tuple(teacher_out.shape)}")
    return w.kd_scale * F.mse_loss(student_kd, teacher_out.detach())


def kl_kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Batch mean of KL(softmax(teacher) || softmax(student)), temperature 1."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits differ in shape")
    if student_logits.dim() != 2 or student_logits.shape[1] < 2:
        raise ValueError("need (batch, n_classes) logits with n_classes >= 2")
    log_q = F.log_softmax(student_logits, dim=-1)
    log_p = F.log_softmax(teacher_logits.detach(), dim=-1)
    return F.kl_div(log_q, log_p, reduction="batchmean", log_target=True)


def joint_loss(kd: torch.Tensor, sv: torch.Tensor, w: LossWeights = LossWeights()) -> torch.Tensor:
    """``kd`` already carries its scale; only ``sv`` is weighted here."""
    for name, v in (("kd_loss", kd), ("sv_loss", sv)):
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise NonFiniteLossError(f"{name} is not finite: {float(v)}")
    return w.sv_scale * sv + kd
