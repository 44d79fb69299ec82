"""Speaker embedding head and additive angular margin softmax."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from .model import ModelConfig, Params, ssl_forward


@dataclass(frozen=True)
class SpeakerHeadConfig:
    head_kind: str = "linear"
    embed_dim: int = 192
    n_speakers: int = 2
    margin: float = 0.15
    scale: float = 20.0

    def __post_init__(self):
        if self.head_kind not in ("linear", "stats_pool"):
            raise ValueError(f"head_kind must be 'linear' or 'stats_pool', got {self.head_kind!r}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if self.n_speakers < 2:
            raise ValueError(f"need at least 2 speakers, got {self.n_speakers}")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass
class SpeakerEmbedding:
    vector: torch.Tensor
    normalized: bool = True


def temporal_stats(features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and population std over frames.

    The std is exactly zero for constant-in-time input and its gradient is
    kept finite there.
    """
    mean = features.mean(dim=1)
    var = ((features - mean.unsqueeze(1)) ** 2).mean(dim=1)
    pos = var > 0
    safe = torch.where(pos, var, torch.ones_like(var))
    std = torch.where(pos, safe.sqrt(), torch.zeros_like(var))
    return mean, std


def pool(features: torch.Tensor, params: Params, cfg: SpeakerHeadConfig) -> torch.Tensor:
    if features.dim() != 3:
        raise ValueError(f"expected (batch, frames, d_model), got {tuple(features.shape)}")
    if features.shape[1] == 0:
        raise ValueError("cannot pool zero frames")
    mean, std = temporal_stats(features)
    stats = mean if cfg.head_kind == "linear" else torch.cat([mean, std], dim=-1)
    return F.linear(stats, params["head.proj.weight"], params["head.proj.bias"])


def cosine_logits(embeddings: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    norms = embeddings.norm(dim=-1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm embedding")
    return F.normalize(embeddings, dim=-1) @ F.normalize(class_weights, dim=-1).T


def aam_logits(embeddings: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor,
               cfg: SpeakerHeadConfig) -> torch.Tensor:
    """Scaled cosines with the angular margin added to each target class."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = class_weights.shape[0]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    cos = cosine_logits(embeddings, class_weights)
    m = cfg.margin
    if m == 0:
        return cfg.scale * cos
    sin2 = 1.0 - cos * cos
    pos = sin2 > 0
    # sqrt has an infinite slope at 0; route exact |cos| == 1 around it
    sin = torch.where(pos, torch.where(pos, sin2, torch.ones_like(sin2)).sqrt(), torch.zeros_like(sin2))
    phi = cos * math.cos(m) - sin * math.sin(m)
    # past theta + m > pi cos(theta + m) stops decreasing; fall back to a linear penalty
    phi = torch.where(cos > math.cos(math.pi - m), phi, cos - math.sin(math.pi - m) * m)
    onehot = F.one_hot(labels, n_classes).to(cos.dtype)
    return cfg.scale * (onehot * phi + (1.0 - onehot) * cos)


def aam_softmax_loss(embeddings: torch.Tensor, labels, class_weights: torch.Tensor,
                     cfg: SpeakerHeadConfig) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return F.cross_entropy(aam_logits(embeddings, labels, class_weights, cfg), labels)


def speaker_logits(embeddings: torch.Tensor, params: Params, cfg: SpeakerHeadConfig) -> torch.Tensor:
    """Margin-free scaled cosine logits, used for accuracy and posterior matching."""
    return cfg.scale * cosine_logits(embeddings, params["head.class_weights"])


def extract_embedding(utterance: torch.Tensor, params: Params, model_cfg: ModelConfig,
                      head: SpeakerHeadConfig, n_layers: int | None = None,
                      with_adapters: bool = True) -> SpeakerEmbedding:
    """Adapter-path embedding of one utterance, L2-normalised."""
    if n_layers is None:
        n_layers = model_cfg.n_layers_student
    x = torch.as_tensor(utterance, dtype=params["head.proj.weight"].dtype)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    with torch.no_grad():
        feats = ssl_forward(x, params, model_cfg, n_layers, with_adapters=with_adapters)
        emb = pool(feats, params, head)[0]
    return SpeakerEmbedding(F.normalize(emb, dim=0), True)


def batch_embeddings(waves: torch.Tensor, params: Mapping[str, torch.Tensor], model_cfg: ModelConfig,
                     head: SpeakerHeadConfig, n_layers: int, with_adapters: bool) -> torch.Tensor:
    """Normalised embeddings for a batch of equal-length waveforms."""
    with torch.no_grad():
        feats = ssl_forward(waves, params, model_cfg, n_layers, with_adapters=with_adapters)
        return F.normalize(pool(feats, params, head), dim=-1)
