"""Teacher and dual-path student networks.

Both networks are written as pure functions over a :class:`ParameterStore`
(a flat ``name -> tensor`` mapping), so teacher-to-student copying,
checkpointing and gradient checks all operate on the same object.

Topology, shared by teacher and student::

    waveform -> strided conv stack (cnn.*) -> encoder.0 .. encoder.{L-1}

Every encoder layer is pre-norm::

    a = x + MHA(LN1(x))
    y = a + FFN(LN2(a))                          (plain / KD path)
    y' = a + FFN(LN2(a)) + ReLU(a W_down) W_up   (adapter / SV path)

The student carries one bias-free bottleneck adapter per encoder layer.
"""

from __future__ import annotations

import fnmatch
import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import torch
import torch.nn.functional as F

Params = Mapping[str, torch.Tensor]

LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_layers_teacher: int = 4
    n_layers_student: int = 1
    n_heads: int = 4
    ffn_mult: int = 2
    adapter_rank: int = 8
    cnn_strides: tuple[int, ...] = (5, 4, 4)
    sample_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "cnn_strides", tuple(int(s) for s in self.cnn_strides))
        for name in ("d_model", "n_layers_teacher", "n_layers_student", "n_heads",
                     "ffn_mult", "adapter_rank", "sample_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive int, got {getattr(self, name)}")
        if not self.cnn_strides or any(s < 1 for s in self.cnn_strides):
            raise ConfigError(f"cnn_strides must be positive ints, got {self.cnn_strides}")
        if self.n_layers_student > self.n_layers_teacher:
            raise ConfigError("student cannot be deeper than the teacher")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.adapter_rank >= self.d_model:
            raise ConfigError(f"adapter_rank={self.adapter_rank} must be < d_model={self.d_model}")

    @property
    def total_stride(self) -> int:
        return math.prod(self.cnn_strides)

    @property
    def d_ffn(self) -> int:
        return self.ffn_mult * self.d_model


# ---------------------------------------------------------------------------
# parameter layout

def cnn_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = cfg.sample_dim
    for k, s in enumerate(cfg.cnn_strides):
        shapes[f"cnn.{k}.weight"] = (cfg.d_model, c_in, s)
        shapes[f"cnn.{k}.bias"] = (cfg.d_model,)
        shapes[f"cnn.{k}.ln.gamma"] = (cfg.d_model,)
        shapes[f"cnn.{k}.ln.beta"] = (cfg.d_model,)
        c_in = cfg.d_model
    return shapes


def encoder_layer_shapes(cfg: ModelConfig, i: int) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.d_ffn
    p = f"encoder.{i}."
    return {
        p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
        p + "attn.wq": (d, d), p + "attn.bq": (d,),
        p + "attn.wk": (d, d), p + "attn.bk": (d,),
        p + "attn.wv": (d, d), p + "attn.bv": (d,),
        p + "attn.wo": (d, d), p + "attn.bo": (d,),
        p + "ln2.gamma": (d,), p + "ln2.beta": (d,),
        p + "ffn.w1": (d, h), p + "ffn.b1": (h,),
        p + "ffn.w2": (h, d), p + "ffn.b2": (d,),
    }


def adapter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(cfg.n_layers_student):
        shapes[f"adapter.{i}.w_down"] = (cfg.d_model, cfg.adapter_rank)
        shapes[f"adapter.{i}.w_up"] = (cfg.adapter_rank, cfg.d_model)
    return shapes


def pretrain_shapes(cfg: ModelConfig, n_targets: int) -> dict[str, tuple[int, ...]]:
    return {
        "pretrain.mask_emb": (cfg.d_model,),
        "pretrain.proj.weight": (cfg.d_model, n_targets),
        "pretrain.proj.bias": (n_targets,),
    }


def head_shapes(d_model: int, head) -> dict[str, tuple[int, ...]]:
    d_in = d_model * (2 if head.head_kind == "stats_pool" else 1)
    return {
        "head.proj.weight": (head.embed_dim, d_in),
        "head.proj.bias": (head.embed_dim,),
        "head.class_weights": (head.n_speakers, head.embed_dim),
    }


def param_shapes(cfg: ModelConfig, kind: str, head=None, adapters: bool = True,
                 pretrain_targets: int = 0) -> dict[str, tuple[int, ...]]:
    """Full name->shape layout for one network.

    ``kind`` is ``"teacher"`` or ``"student"``. Adapters exist only on
    students; the masked-reconstruction head only on teachers.
    """
    if kind not in ("teacher", "student"):
        raise ConfigError(f"unknown network kind {kind!r}")
    n_layers = cfg.n_layers_teacher if kind == "teacher" else cfg.n_layers_student
    shapes = cnn_shapes(cfg)
    for i in range(n_layers):
        shapes.update(encoder_layer_shapes(cfg, i))
    if kind == "student" and adapters:
        shapes.update(adapter_shapes(cfg))
    if kind == "teacher" and pretrain_targets:
        shapes.update(pretrain_shapes(cfg, pretrain_targets))
    if head is not None:
        shapes.update(head_shapes(cfg.d_model, head))
    return shapes


def adapter_param_count(cfg: ModelConfig) -> int:
    return cfg.n_layers_student * 2 * cfg.d_model * cfg.adapter_rank


def backbone_param_count(cfg: ModelConfig, kind: str = "student") -> int:
    """CNN + encoder parameters, the part the teacher and student share."""
    return sum(math.prod(s) for s in param_shapes(cfg, kind, adapters=False).values())


# ---------------------------------------------------------------------------
# parameter store

@dataclass
class ParameterStore:
    """Named parameter tensors for one network plus the seed that drew them."""

    entries: dict[str, torch.Tensor]
    config: ModelConfig
    seed: int = 0
    kind: str = "student"
    head: object = None  # SpeakerHeadConfig, kept untyped to avoid an import cycle
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self, pattern: str = "*") -> list[str]:
        return [n for n in self.entries if fnmatch.fnmatchcase(n, pattern)]

    @property
    def has_adapters(self) -> bool:
        return any(n.startswith("adapter.") for n in self.entries)

    @property
    def n_layers(self) -> int:
        return len({n.split(".")[1] for n in self.entries if n.startswith("encoder.")})

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        n_targets = self.entries["pretrain.proj.bias"].shape[0] if "pretrain.proj.bias" in self else 0
        return param_shapes(self.config, self.kind, self.head, self.has_adapters, n_targets)

    def validate(self) -> None:
        expected = self.expected_shapes()
        for name, shape in expected.items():
            if name not in self.entries:
                raise ConfigError(f"missing parameter entry {name}")
            if tuple(self.entries[name].shape) != shape:
                raise DimensionError(
                    f"{name}: shape {tuple(self.entries[name].shape)} != expected {shape}")
        orphans = sorted(set(self.entries) - set(expected))
        if orphans:
            raise ConfigError(f"orphan parameter entry {orphans[0]}")

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.detach().clone() for k, v in self.entries.items()},
                              self.config, self.seed, self.kind, self.head, dict(self.meta))

    def to(self, dtype: torch.dtype) -> "ParameterStore":
        return ParameterStore({k: v.detach().to(dtype).clone() for k, v in self.entries.items()},
                              self.config, self.seed, self.kind, self.head, dict(self.meta))

    def digest(self, pattern: str = "*") -> str:
        """sha256 over names, dtypes, shapes and raw bytes of matching entries."""
        h = hashlib.sha256()
        for name in sorted(self.names(pattern)):
            t = self.entries[name].detach().contiguous().cpu()
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def num_params(self, pattern: str = "*") -> int:
        return sum(self.entries[n].numel() for n in self.names(pattern))


class AdapterWeights(NamedTuple):
    w_down: torch.Tensor
    w_up: torch.Tensor


def adapters_of(params: Params, n_layers: int) -> list[AdapterWeights]:
    return [AdapterWeights(params[f"adapter.{i}.w_down"], params[f"adapter.{i}.w_up"])
            for i in range(n_layers)]


def layer_params(params: Params, i: int) -> dict[str, torch.Tensor]:
    prefix = f"encoder.{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# forward passes

def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, LN_EPS)


def cnn_forward(waveform: torch.Tensor, params: Params, cfg: ModelConfig) -> torch.Tensor:
    """(batch, samples[, sample_dim]) -> (batch, samples // total_stride, d_model)."""
    if waveform.dim() == 2:
        if cfg.sample_dim != 1:
            raise DimensionError(f"2-D input needs sample_dim=1, config has {cfg.sample_dim}")
        x = waveform.unsqueeze(-1)
    elif waveform.dim() == 3:
        if waveform.shape[-1] != cfg.sample_dim:
            raise DimensionError(f"input channels {waveform.shape[-1]} != sample_dim {cfg.sample_dim}")
        x = waveform
    else:
        raise DimensionError(f"expected (batch, samples[, channels]), got shape {tuple(waveform.shape)}")
    n = x.shape[1]
    if n < cfg.total_stride:
        raise ValueError(f"input too short: {n} samples < total stride {cfg.total_stride}")
    # kernel == stride, so each conv is a matmul over non-overlapping patches
    x = x[:, : (n // cfg.total_stride) * cfg.total_stride]
    for k, s in enumerate(cfg.cnn_strides):
        b, n, c = x.shape
        w = params[f"cnn.{k}.weight"]
        patches = x.reshape(b, n // s, s, c).transpose(2, 3).reshape(b, n // s, c * s)
        x = patches @ w.reshape(w.shape[0], -1).T + params[f"cnn.{k}.bias"]
        x = F.gelu(layer_norm(x, params[f"cnn.{k}.ln.gamma"], params[f"cnn.{k}.ln.beta"]))
    return x


def _check_layer(x: torch.Tensor, lp: Mapping[str, torch.Tensor]) -> None:
    if x.dim() != 3:
        raise DimensionError(f"expected (batch, frames, d_model), got {tuple(x.shape)}")
    d = x.shape[-1]
    if lp["attn.wq"].shape != (d, d) or lp["ffn.w1"].shape[0] != d:
        raise DimensionError(f"layer parameters do not match feature width {d}")


def attention_block(x: torch.Tensor, lp: Mapping[str, torch.Tensor], n_heads: int) -> torch.Tensor:
    """x + MHA(LN1(x)); the hidden features that feed the FFN and the adapter."""
    b, t, d = x.shape
    dh = d // n_heads
    h = layer_norm(x, lp["ln1.gamma"], lp["ln1.beta"])

    def split(z):
        return z.reshape(b, t, n_heads, dh).transpose(1, 2)

    q = split(h @ lp["attn.wq"] + lp["attn.bq"])
    k = split(h @ lp["attn.wk"] + lp["attn.bk"])
    v = split(h @ lp["attn.wv"] + lp["attn.bv"])
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    ctx = (att @ v).transpose(1, 2).reshape(b, t, d)
    return x + ctx @ lp["attn.wo"] + lp["attn.bo"]


def feed_forward(a: torch.Tensor, lp: Mapping[str, torch.Tensor]) -> torch.Tensor:
    h = layer_norm(a, lp["ln2.gamma"], lp["ln2.beta"])
    return F.gelu(h @ lp["ffn.w1"] + lp["ffn.b1"]) @ lp["ffn.w2"] + lp["ffn.b2"]


def adapter_forward(a: torch.Tensor, adapter: AdapterWeights) -> torch.Tensor:
    return torch.relu(a @ adapter.w_down) @ adapter.w_up


def encoder_layer_plain(x: torch.Tensor, lp: Mapping[str, torch.Tensor], n_heads: int) -> torch.Tensor:
    _check_layer(x, lp)
    a = attention_block(x, lp, n_heads)
    return a + feed_forward(a, lp)


def encoder_layer_adapter(x: torch.Tensor, lp: Mapping[str, torch.Tensor],
                          adapter: AdapterWeights, n_heads: int) -> torch.Tensor:
    _check_layer(x, lp)
    d = x.shape[-1]
    r = adapter.w_down.shape[-1]
    if adapter.w_down.shape != (d, r) or adapter.w_up.shape != (r, d):
        raise DimensionError(
            f"adapter shapes {tuple(adapter.w_down.shape)}, {tuple(adapter.w_up.shape)} "
            f"inconsistent with d_model={d}")
    a = attention_block(x, lp, n_heads)
    return a + feed_forward(a, lp) + adapter_forward(a, adapter)


def encoder_forward(x: torch.Tensor, params: Params, cfg: ModelConfig, n_layers: int,
                    adapters: list[AdapterWeights] | None = None) -> torch.Tensor:
    for i in range(n_layers):
        lp = layer_params(params, i)
        if adapters is None:
            x = encoder_layer_plain(x, lp, cfg.n_heads)
        else:
            x = encoder_layer_adapter(x, lp, adapters[i], cfg.n_heads)
    return x


class DualPathOutput(NamedTuple):
    kd_features: torch.Tensor
    sv_features: torch.Tensor


def dual_path_forward(batch: torch.Tensor, params: Params, cfg: ModelConfig,
                      adapters: list[AdapterWeights] | None = None) -> DualPathOutput:
    """One CNN pass, then the student encoder stack twice: without and with adapters."""
    n = cfg.n_layers_student
    if adapters is None:
        adapters = adapters_of(params, n)
    if len(adapters) != n:
        raise DimensionError(f"{len(adapters)} adapters for {n} student layers")
    z = cnn_forward(batch, params, cfg)
    kd = encoder_forward(z, params, cfg, n)
    sv = encoder_forward(z, params, cfg, n, adapters)
    return DualPathOutput(kd, sv)


def ssl_forward(batch: torch.Tensor, params: Params, cfg: ModelConfig, n_layers: int,
                with_adapters: bool = False) -> torch.Tensor:
    """Single-path forward through CNN and ``n_layers`` encoders."""
    z = cnn_forward(batch, params, cfg)
    adapters = adapters_of(params, n_layers) if with_adapters else None
    return encoder_forward(z, params, cfg, n_layers, adapters)
