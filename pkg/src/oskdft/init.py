"""Parameter initialisation and teacher-to-student weight transfer."""

from __future__ import annotations

import fnmatch
import zlib

import numpy as np
import torch

from .model import ConfigError, DimensionError, ModelConfig, ParameterStore, param_shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("cnn.") and name.endswith(".weight"):
        return shape[1] * shape[2]
    if name.startswith("head."):
        return shape[1]
    return shape[0]


def _draw(name: str, shape: tuple[int, ...], seed: int, adapter_init: str) -> torch.Tensor:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return torch.ones(shape, dtype=torch.float64)
    if leaf == "beta" or (len(shape) == 1 and name != "pretrain.mask_emb"):
        return torch.zeros(shape, dtype=torch.float64)
    if leaf == "w_up" and adapter_init == "zero":
        return torch.zeros(shape, dtype=torch.float64)
    # one stream per (seed, entry) so draws do not depend on iteration order
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    fan_in = shape[0] if len(shape) == 1 else _fan_in(name, shape)
    bound = np.sqrt(3.0 / fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape))


def random_store(cfg: ModelConfig, kind: str, seed: int, head=None, adapters: bool = True,
                 pretrain_targets: int = 0, adapter_init: str = "zero",
                 dtype: torch.dtype = torch.float64) -> ParameterStore:
    shapes = param_shapes(cfg, kind, head, adapters, pretrain_targets)
    entries = {n: _draw(n, s, seed, adapter_init).to(dtype) for n, s in shapes.items()}
    return ParameterStore(entries, cfg, seed, kind, head)


def init_random(pattern: str, store: ParameterStore, seed: int, adapter_init: str = "zero") -> ParameterStore:
    """Resample every entry matching the glob ``pattern``; others are copied unchanged."""
    matched = [n for n in store.entries if fnmatch.fnmatchcase(n, pattern)]
    if not matched:
        raise KeyError(f"pattern {pattern!r} matches no parameter")
    out = store.copy()
    for n in matched:
        old = store.entries[n]
        out.entries[n] = _draw(n, tuple(old.shape), seed, adapter_init).to(old.dtype)
    out.seed = seed
    return out


def _check_compatible(teacher_cfg: ModelConfig, cfg: ModelConfig) -> None:
    for field in ("d_model", "n_heads", "ffn_mult", "cnn_strides", "sample_dim"):
        a, b = getattr(teacher_cfg, field), getattr(cfg, field)
        if a != b:
            raise ConfigError(f"teacher {field}={a} does not match student {field}={b}")


def init_student_from_teacher(teacher: ParameterStore, cfg: ModelConfig, seed: int, head=None,
                              adapters: bool = True, adapter_init: str = "zero",
                              copy_head: bool = False) -> ParameterStore:
    """Student whose CNN and encoder layers 0..L_s-1 are copies of the teacher's.

    Layers are taken in order of closeness to the CNN (student layer i is
    teacher layer i). Adapters and the head are drawn fresh from ``seed``
    unless ``copy_head`` is set and the teacher carries a matching head.
    """
    _check_compatible(teacher.config, cfg)
    if teacher.n_layers < cfg.n_layers_student:
        raise ConfigError(
            f"teacher has {teacher.n_layers} encoder layers, student needs {cfg.n_layers_student}")
    student = random_store(cfg, "student", seed, head, adapters, adapter_init=adapter_init,
                           dtype=next(iter(teacher.entries.values())).dtype)
    for name, shape in param_shapes(cfg, "student", head, adapters).items():
        shared = name.startswith(("cnn.", "encoder.")) or (copy_head and name.startswith("head."))
        if not shared:
            continue
        if name not in teacher.entries:
            if name.startswith("head."):
                continue
            raise ConfigError(f"teacher lacks entry {name}")
        src = teacher.entries[name]
        if tuple(src.shape) != shape:
            raise DimensionError(f"{name}: teacher shape {tuple(src.shape)} != student shape {shape}")
        student.entries[name] = src.detach().clone()
    student.meta["init"] = f"teacher layers 0..{cfg.n_layers_student - 1}"
    return student
