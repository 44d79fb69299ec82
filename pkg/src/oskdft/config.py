"""Flat ``key = value`` experiment configuration.

Every key is listed in :data:`KEYS` with its default and a one-line
description; unknown keys are rejected. ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .distillation import LossWeights
from .model import ModelConfig
from .schedule import ScheduleParams
from .speaker_head import SpeakerHeadConfig

MODES = ("os_kdft", "kdft_sequential", "kd_then_freeze", "tuned_teacher_kl", "ft_only", "teacher_pretrain")


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # run
    mode: str = "os_kdft"
    epochs: int = 40
    kd_ft_ratio: tuple[int, int] = (50, 50)
    seed: int = 0
    seeds: tuple[int, ...] = (0,)
    augment: bool = False
    dtype: str = "float32"
    ckpt_every: int = 1
    eval_every: int = 0
    # os_kdft variants (ablation arms)
    use_adapters: bool = True
    split_paths: bool = True
    per_module_lr: bool = True
    adapter_init: str = "zero"
    # schedule
    eta_min: float = 1e-7
    eta_max: float = 1e-3
    beta: float = 0.93
    theta: float = 10.0
    warmup: int = 10
    # losses
    kd_scale: float = 100.0
    sv_scale: float = 1.0
    # model
    d_model: int = 32
    n_layers_teacher: int = 4
    n_layers_student: int = 1
    n_heads: int = 4
    ffn_mult: int = 2
    adapter_rank: int = 8
    cnn_strides: tuple[int, ...] = (5, 4, 4)
    # head
    head_kind: str = "linear"
    embed_dim: int = 64
    margin: float = 0.15
    scale: float = 20.0
    # data
    sample_rate: int = 4000
    n_train_speakers: int = 24
    n_eval_speakers: int = 20
    train_utts: int = 8
    eval_utts: int = 6
    train_seconds: tuple[float, float] = (3.0, 5.0)
    eval_seconds: tuple[float, float] = (4.0, 6.0)
    n_trials: int = 600
    data_seed: int = 1234
    batch_size: int = 16
    crop_seconds: float = 2.0
    eval_segment_seconds: float = 3.0
    eval_segments: int = 5
    # SpecAugment on SV-path features
    specaug_time_masks: int = 2
    specaug_time_width: int = 5
    specaug_chan_masks: int = 2
    specaug_chan_width: int = 4
    specaug_teacher: bool = False
    # teacher pretraining and tuning
    pretrain_speakers: int = 150
    pretrain_utts: int = 4
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    mask_prob: float = 0.08
    mask_span: int = 5
    teacher_ft_epochs: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigFileError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.epochs < 0:
            raise ConfigFileError("epochs must be >= 0")
        a, b = self.kd_ft_ratio
        if a < 0 or b < 0 or a + b == 0:
            raise ConfigFileError(f"invalid kd_ft_ratio {a}:{b}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigFileError("dtype must be float32 or float64")
        if self.adapter_init not in ("zero", "random"):
            raise ConfigFileError("adapter_init must be 'zero' or 'random'")
        # construct the typed sub-configs now so errors surface at load time
        self.model, self.head(2), self.loss
        if self.epochs:
            self.schedule(self.epochs)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.d_model, self.n_layers_teacher, self.n_layers_student, self.n_heads,
                           self.ffn_mult, self.adapter_rank, self.cnn_strides, 1)

    def head(self, n_speakers: int) -> SpeakerHeadConfig:
        return SpeakerHeadConfig(self.head_kind, self.embed_dim, n_speakers, self.margin, self.scale)

    def schedule(self, tau_tot: int) -> ScheduleParams:
        return ScheduleParams(self.eta_min, self.eta_max, tau_tot, self.beta, self.theta, self.warmup)

    @property
    def loss(self) -> LossWeights:
        return LossWeights(self.kd_scale, self.sv_scale)

    @property
    def phase_epochs(self) -> tuple[int, int]:
        """(first-phase, second-phase) epochs for the sequential modes."""
        a, b = self.kd_ft_ratio
        first = round(self.epochs * a / (a + b))
        return first, self.epochs - first

    @property
    def arm(self) -> str:
        """Ablation-arm label for os_kdft variants."""
        if self.mode != "os_kdft":
            return self.mode
        if not self.use_adapters:
            return "KDFT"
        if not self.split_paths:
            return "KDFT (AS param)"
        return "OS-KDFT (AS, LR)" if self.per_module_lr else "OS-KDFT (AS)"

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)


DOCS = {
    "mode": "training mode: " + ", ".join(MODES),
    "epochs": "student training epochs",
    "kd_ft_ratio": "KD:FT epoch split for sequential modes, e.g. 50:50",
    "seed": "seed for initialisation and batch order",
    "seeds": "seed set used by multi-seed comparisons",
    "augment": "additive-noise stub on waveforms and SpecAugment on SV-path features",
    "dtype": "training precision (float32 or float64)",
    "ckpt_every": "write ckpt/epoch_<k> every k epochs (0 = only the last)",
    "eval_every": "evaluate EER every k epochs (0 = only at the end)",
    "use_adapters": "insert bottleneck adapters in the student",
    "split_paths": "separate KD (plain) and SV (adapter) paths",
    "per_module_lr": "per-group schedules; false gives every group the classifier schedule",
    "adapter_init": "up-projection init: zero or random",
    "eta_min": "minimum learning rate",
    "eta_max": "maximum learning rate",
    "beta": "backbone decay factor after warmup",
    "theta": "adapter learning-rate multiplier",
    "warmup": "backbone warmup epochs",
    "kd_scale": "multiplier on the feature MSE",
    "sv_scale": "multiplier on the speaker loss",
    "d_model": "feature width",
    "n_layers_teacher": "teacher encoder layers",
    "n_layers_student": "student encoder layers",
    "n_heads": "attention heads",
    "ffn_mult": "feed-forward width multiplier",
    "adapter_rank": "adapter bottleneck width",
    "cnn_strides": "comma-separated front-end strides",
    "head_kind": "speaker head: linear or stats_pool",
    "embed_dim": "speaker embedding width",
    "margin": "additive angular margin",
    "scale": "cosine logit scale",
    "sample_rate": "virtual sample rate of the corpus",
    "n_train_speakers": "training speakers",
    "n_eval_speakers": "held-out evaluation speakers",
    "train_utts": "utterances per training speaker",
    "eval_utts": "utterances per evaluation speaker",
    "train_seconds": "min,max training utterance length",
    "eval_seconds": "min,max evaluation utterance length",
    "n_trials": "evaluation trials (balanced)",
    "data_seed": "seed of the synthetic corpus and trial list",
    "batch_size": "mini-batch size",
    "crop_seconds": "training crop length",
    "eval_segment_seconds": "evaluation window length",
    "eval_segments": "evaluation windows per utterance",
    "specaug_time_masks": "SpecAugment time stripes",
    "specaug_time_width": "SpecAugment time stripe width (frames)",
    "specaug_chan_masks": "SpecAugment channel stripes",
    "specaug_chan_width": "SpecAugment channel stripe width",
    "specaug_teacher": "also mask teacher targets (default: SV path only)",
    "pretrain_speakers": "speakers in the unlabeled pretraining corpus (0 = reuse the training corpus)",
    "pretrain_utts": "utterances per pretraining speaker",
    "pretrain_epochs": "teacher masked-reconstruction epochs",
    "pretrain_lr": "teacher pretraining peak learning rate",
    "mask_prob": "probability a frame starts a masked span",
    "mask_span": "masked span length in frames",
    "teacher_ft_epochs": "SV-tuning epochs of the teacher in tuned_teacher_kl (0 = epochs)",
}

KEYS = {f.name: f for f in fields(RunConfig)}
assert set(DOCS) == set(KEYS)


def _parse_value(name: str, raw: str):
    default = getattr(RunConfig, name)
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigFileError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if name == "kd_ft_ratio":
        parts = raw.replace(",", ":").split(":")
        if len(parts) != 2:
            raise ConfigFileError(f"{name}: expected a:b, got {raw!r}")
        return tuple(int(p) for p in parts)
    if isinstance(default, tuple):
        conv = float if isinstance(default[0], float) else int
        return tuple(conv(p) for p in raw.split(",") if p.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<string>", base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigFileError(f"{source}:{lineno}: {exc}") from None
    return replace(base or RunConfig(), **values)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), str(path), base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in KEYS:
        v = getattr(cfg, name)
        text = f"{v[0]}:{v[1]}" if name == "kd_ft_ratio" else _fmt(v)
        lines.append(f"{name} = {text}  # {DOCS[name]}")
    return "\n".join(lines) + "\n"
