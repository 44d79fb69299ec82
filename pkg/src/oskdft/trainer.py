"""Training orchestration for every mode.

A run is a list of phases. Each phase trains one network (the teacher or
the student) for a number of epochs with one step kind:

========================  ===============================================
mode                      phases
========================  ===============================================
``os_kdft``               joint KD + SV steps every epoch
``kdft_sequential``       KD-only epochs, then SV-only epochs
``kd_then_freeze``        KD-only epochs, then head-only epochs
``tuned_teacher_kl``      teacher SV tuning, then student KL distillation
``ft_only``               SV-only epochs on a randomly initialised student
``teacher_pretrain``      masked-frame reconstruction on the teacher
========================  ===============================================

Epochs are numbered globally across phases. Randomness for epoch ``k`` is
drawn from a generator seeded by ``(seed, k)``, so a checkpoint of the
parameters and optimizer moments is enough to resume bit-exactly.
"""

from __future__ import annotations

import csv
import functools
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .data import Corpus, TrialSet, iterate_batches, make_trials, spec_augment, synth_corpus
from .distillation import NonFiniteLossError, joint_loss, kd_loss, kl_kd_loss, teacher_forward
from .evaluation import compute_eer, format_eer_report, score_trials, write_scores
from .init import init_student_from_teacher, random_store
from .model import (ModelConfig, ParameterStore, adapter_param_count, adapters_of, cnn_forward,
                    dual_path_forward, encoder_forward, ssl_forward)
from .schedule import ScheduleParams, lr_classifier, lr_triple
from .speaker_head import (SpeakerHeadConfig, aam_softmax_loss, extract_embedding, pool,
                           speaker_logits)

log = logging.getLogger(__name__)

GROUPS = ("classifier", "backbone", "adapter")
METRIC_FIELDS = ["epoch", "phase", "lr_classifier", "lr_backbone", "lr_adapter", "kd_loss", "sv_loss",
                 "joint_loss", "train_acc", "gnorm_classifier", "gnorm_backbone", "gnorm_adapter",
                 "kd_gnorm_adapter", "eer"]


class MissingArtifactError(FileNotFoundError):
    pass


def group_of(name: str) -> str:
    if name.startswith("head."):
        return "classifier"
    if name.startswith("adapter."):
        return "adapter"
    return "backbone"


def _dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


# ---------------------------------------------------------------------------
# data

@dataclass
class Dataset:
    train: Corpus
    eval: Corpus
    trials: TrialSet

    @functools.cached_property
    def speaker_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.train.speakers)}

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_index)


@functools.lru_cache(maxsize=4)
def _synth_dataset(key: tuple) -> Dataset:
    (n_tr, n_ev, u_tr, u_ev, s_tr, s_ev, n_trials, seed, rate) = key
    train = synth_corpus(n_tr, u_tr, seed, rate, *s_tr)
    ev = synth_corpus(n_ev, u_ev, seed, rate, *s_ev, first_speaker=n_tr)
    trials = make_trials(ev, n_trials, np.random.default_rng([seed, 7]))
    return Dataset(train, ev, trials)


@functools.lru_cache(maxsize=2)
def _synth_pretrain(key: tuple) -> Corpus:
    n, utts, first, s_tr, seed, rate = key
    return synth_corpus(n, utts, seed, rate, *s_tr, first_speaker=first)


def build_pretrain_corpus(cfg: RunConfig) -> Corpus:
    """Unlabeled corpus for the teacher; its speakers follow the train and eval ranges."""
    if cfg.pretrain_speakers == 0:
        return build_dataset(cfg).train
    return _synth_pretrain((cfg.pretrain_speakers, cfg.pretrain_utts, cfg.n_train_speakers + cfg.n_eval_speakers,
                            tuple(cfg.train_seconds), cfg.data_seed, cfg.sample_rate))


def build_dataset(cfg: RunConfig) -> Dataset:
    """Synthetic train/eval split with disjoint speakers and a balanced trial list."""
    return _synth_dataset((cfg.n_train_speakers, cfg.n_eval_speakers, cfg.train_utts, cfg.eval_utts,
                           tuple(cfg.train_seconds), tuple(cfg.eval_seconds), cfg.n_trials,
                           cfg.data_seed, cfg.sample_rate))


# ---------------------------------------------------------------------------
# optimisation state

class Learner:
    """Trainable copy of a parameter store with a grouped Adam optimizer."""

    def __init__(self, store: ParameterStore, trainable: tuple[str, ...] = GROUPS):
        self.store = store
        for name, t in store.entries.items():
            store.entries[name] = t.detach().clone().requires_grad_(group_of(name) in trainable)
        self.trainable = {n: t for n, t in store.entries.items() if t.requires_grad}
        pgs = []
        for g in GROUPS:
            ps = [t for n, t in self.trainable.items() if group_of(n) == g]
            if ps:
                pgs.append({"params": ps, "lr": 0.0, "name": g})
        # Adam without weight decay
        self.optimizer = torch.optim.Adam(pgs, lr=0.0, weight_decay=0.0)

    @property
    def params(self) -> dict[str, torch.Tensor]:
        return self.store.entries

    def set_lrs(self, lrs: dict[str, float]) -> None:
        for pg in self.optimizer.param_groups:
            pg["lr"] = lrs[pg["name"]]

    def step(self, loss: torch.Tensor) -> dict[str, float]:
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        norms = {g: 0.0 for g in GROUPS}
        for n, t in self.trainable.items():
            if t.grad is not None:
                norms[group_of(n)] += float(t.grad.double().pow(2).sum())
        self.optimizer.step()
        return {g: math.sqrt(v) for g, v in norms.items()}

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for n, t in self.trainable.items():
            st = self.optimizer.state.get(t)
            if not st:
                continue
            out[f"adam.{n}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(())
            out[f"adam.{n}.exp_avg"] = st["exp_avg"]
            out[f"adam.{n}.exp_avg_sq"] = st["exp_avg_sq"]
        return out

    def load_state_tensors(self, extra: dict[str, torch.Tensor]) -> None:
        for n, t in self.trainable.items():
            key = f"adam.{n}.step"
            if key in extra:
                self.optimizer.state[t] = {
                    "step": extra[key].clone(),
                    "exp_avg": extra[f"adam.{n}.exp_avg"].clone(),
                    "exp_avg_sq": extra[f"adam.{n}.exp_avg_sq"].clone(),
                }

    def frozen_store(self) -> ParameterStore:
        out = self.store.copy()
        for n, t in out.entries.items():
            out.entries[n] = t.detach()
        return out


class StepMetrics(NamedTuple):
    kd_loss: float
    sv_loss: float
    joint_loss: float
    train_acc: float
    gnorms: dict
    kd_gnorm_adapter: float


# ---------------------------------------------------------------------------
# steps

@dataclass
class StepSpec:
    """What one step computes and through which path."""
    kind: str                       # joint | kd | ft | head | kl | teacher_sv
    use_adapters: bool = True
    split_paths: bool = True
    augment: bool = False
    specaug: tuple[int, int, int, int] = (2, 5, 2, 4)
    specaug_teacher: bool = False

    @property
    def needs_kd(self) -> bool:
        return self.kind in ("joint", "kd")

    @property
    def needs_sv(self) -> bool:
        return self.kind in ("joint", "ft", "head", "teacher_sv")


def _check_finite(name: str, value: torch.Tensor, epoch: int | None = None) -> None:
    if not bool(torch.isfinite(value)):
        where = f" at epoch {epoch}" if epoch is not None else ""
        raise NonFiniteLossError(f"{name} became non-finite{where}")


def compute_losses(spec: StepSpec, waves: torch.Tensor, labels: torch.Tensor, learner: Learner,
                   model_cfg: ModelConfig, head: SpeakerHeadConfig | None, loss_w,
                   teacher: ParameterStore | None, rng: np.random.Generator):
    """(kd, sv, total, acc) for one batch; disabled components are exact zeros."""
    p = learner.params
    zero = torch.zeros((), dtype=waves.dtype)
    n_layers = learner.store.n_layers
    kd_feats = sv_feats = None
    if spec.kind == "teacher_sv":
        sv_feats = ssl_forward(waves, p, model_cfg, n_layers)
    elif spec.kind == "head":
        with torch.no_grad():
            sv_feats = ssl_forward(waves, p, model_cfg, n_layers, with_adapters=spec.use_adapters)
    elif spec.kind == "kl":
        sv_feats = ssl_forward(waves, p, model_cfg, n_layers)
    else:
        want_kd, want_sv = spec.needs_kd, spec.needs_sv
        if spec.use_adapters and spec.split_paths and want_kd and want_sv:
            kd_feats, sv_feats = dual_path_forward(waves, p, model_cfg)
        else:
            z = cnn_forward(waves, p, model_cfg)
            if want_kd:
                kd_adapters = adapters_of(p, n_layers) if spec.use_adapters and not spec.split_paths else None
                kd_feats = encoder_forward(z, p, model_cfg, n_layers, kd_adapters)
            if want_sv:
                if not spec.split_paths and kd_feats is not None:
                    sv_feats = kd_feats
                else:
                    sv_adapters = adapters_of(p, n_layers) if spec.use_adapters else None
                    sv_feats = encoder_forward(z, p, model_cfg, n_layers, sv_adapters)

    kd = zero
    if kd_feats is not None:
        target = teacher_forward(waves, teacher.entries, teacher.config, model_cfg)
        if spec.augment and spec.specaug_teacher:
            mask_src = spec_augment(torch.ones_like(kd_feats), *spec.specaug, rng)
            kd_feats, target = kd_feats * mask_src, target * mask_src
        kd = kd_loss(kd_feats, target, loss_w)

    sv, acc = zero, float("nan")
    if spec.kind == "kl":
        emb = pool(sv_feats, p, head)
        s_logits = speaker_logits(emb, p, head)
        with torch.no_grad():
            t_feats = ssl_forward(waves, teacher.entries, teacher.config, teacher.config.n_layers_teacher)
            t_logits = speaker_logits(pool(t_feats, teacher.entries, head), teacher.entries, head)
        sv = kl_kd_loss(s_logits, t_logits)
        acc = float((s_logits.argmax(-1) == labels).double().mean())
    elif sv_feats is not None:
        if spec.augment:
            sv_feats = spec_augment(sv_feats, *spec.specaug, rng)
        emb = pool(sv_feats, p, head)
        sv = aam_softmax_loss(emb, labels, p["head.class_weights"], head)
        with torch.no_grad():
            acc = float((speaker_logits(emb, p, head).argmax(-1) == labels).double().mean())
    _check_finite("kd_loss", kd)
    _check_finite("sv_loss", sv)
    return kd, sv, joint_loss(kd, sv, loss_w), acc


def train_step(spec: StepSpec, batch, learner: Learner, model_cfg: ModelConfig,
               head: SpeakerHeadConfig | None, teacher: ParameterStore | None,
               lrs: dict[str, float], loss_w, rng: np.random.Generator) -> StepMetrics:
    dtype = next(iter(learner.params.values())).dtype
    waves = torch.as_tensor(batch.waves, dtype=dtype)
    labels = torch.as_tensor(batch.labels, dtype=torch.long)
    learner.set_lrs(lrs)
    kd, sv, total, acc = compute_losses(spec, waves, labels, learner, model_cfg, head, loss_w, teacher, rng)
    kd_gnorm_adapter = 0.0
    adapter_params = [t for n, t in learner.trainable.items() if group_of(n) == "adapter"]
    if kd.requires_grad and adapter_params:
        grads = torch.autograd.grad(kd, adapter_params, retain_graph=True, allow_unused=True)
        kd_gnorm_adapter = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads if g is not None))
    gnorms = learner.step(total)
    return StepMetrics(float(kd.detach()), float(sv.detach()), float(total.detach()), acc, gnorms, kd_gnorm_adapter)


def train_step_oskdft(batch, learner: Learner, model_cfg: ModelConfig, head: SpeakerHeadConfig,
                      teacher: ParameterStore, lrs: dict[str, float], loss_w,
                      rng: np.random.Generator | None = None, augment: bool = False) -> StepMetrics:
    """One joint step: dual-path forward, KD on the plain path, AAM on the adapter path,
    a single backward through the summed loss and per-group learning rates."""
    spec = StepSpec("joint", augment=augment)
    return train_step(spec, batch, learner, model_cfg, head, teacher, lrs, loss_w,
                      rng if rng is not None else np.random.default_rng(0))


# ---------------------------------------------------------------------------
# teacher pretraining (masked-frame reconstruction)

def frame_targets(waves: torch.Tensor, frame: int) -> torch.Tensor:
    """Standardised log-power spectrum of each non-overlapping ``frame``-sample window."""
    b, n = waves.shape
    fr = waves[:, : (n // frame) * frame].reshape(b, n // frame, frame).double()
    win = torch.hann_window(frame, periodic=False, dtype=torch.float64)
    spec = torch.fft.rfft(fr * win, dim=-1).abs().pow(2)
    logs = torch.log(spec + 1e-6)
    mu = logs.mean(dim=(0, 1), keepdim=True)
    sd = logs.std(dim=(0, 1), keepdim=True) + 1e-6
    return ((logs - mu) / sd).to(waves.dtype)


def span_mask(b: int, t: int, prob: float, span: int, rng: np.random.Generator) -> torch.Tensor:
    starts = rng.random((b, t)) < prob
    mask = np.zeros((b, t), dtype=bool)
    for i, j in zip(*np.nonzero(starts)):
        mask[i, j:j + span] = True
    for i in range(b):
        if not mask[i].any():
            j = int(rng.integers(0, max(1, t - span + 1)))
            mask[i, j:j + span] = True
    return torch.from_numpy(mask)


def masked_reconstruction_loss(params, cfg: ModelConfig, waves: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    z = cnn_forward(waves, params, cfg)
    z = torch.where(mask.unsqueeze(-1), params["pretrain.mask_emb"].expand_as(z), z)
    h = encoder_forward(z, params, cfg, cfg.n_layers_teacher)
    pred = h @ params["pretrain.proj.weight"] + params["pretrain.proj.bias"]
    target = frame_targets(waves, cfg.total_stride)
    return ((pred - target) ** 2)[mask].mean()


def heldout_reconstruction_loss(store: ParameterStore, corpus: Corpus, crop_seconds: float = 2.0,
                                seed: int = 99) -> float:
    """Masked-reconstruction loss on a fixed set of crops, for before/after comparisons."""
    rng = np.random.default_rng(seed)
    n = int(round(crop_seconds * corpus.sample_rate))
    waves = np.stack([u.samples[:n] for u in corpus.utterances if u.n_samples >= n])
    dtype = next(iter(store.entries.values())).dtype
    x = torch.as_tensor(waves, dtype=dtype)
    t = x.shape[1] // store.config.total_stride
    mask = span_mask(len(x), t, 0.08, 5, rng)
    with torch.no_grad():
        return float(masked_reconstruction_loss(store.entries, store.config, x, mask))


def new_teacher(cfg: RunConfig, seed: int) -> ParameterStore:
    mc = cfg.model
    return random_store(mc, "teacher", seed, pretrain_targets=mc.total_stride // 2 + 1, dtype=_dtype(cfg))


def _pretrain_epoch(learner: Learner, corpus: Corpus, cfg: RunConfig, rng, lr: float, epoch: int):
    mc = learner.store.config
    learner.set_lrs({g: lr for g in GROUPS})
    index = {s: i for i, s in enumerate(corpus.speakers)}
    losses = []
    dtype = next(iter(learner.params.values())).dtype
    for batch in iterate_batches(corpus, cfg.batch_size, cfg.crop_seconds, rng, index, cfg.augment):
        x = torch.as_tensor(batch.waves, dtype=dtype)
        mask = span_mask(len(x), x.shape[1] // mc.total_stride, cfg.mask_prob, cfg.mask_span, rng)
        loss = masked_reconstruction_loss(learner.params, mc, x, mask)
        _check_finite("reconstruction loss", loss, epoch)
        learner.step(loss)
        losses.append(float(loss.detach()))
    return float(np.mean(losses)) if losses else float("nan")


def pretrain_teacher(corpus: Corpus, cfg: RunConfig, seed: int, epochs: int | None = None) -> ParameterStore:
    """Randomly initialised teacher trained by masked-frame reconstruction."""
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    store = new_teacher(cfg, seed)
    if epochs == 0:
        return store
    learner = Learner(store)
    sched = ScheduleParams(cfg.eta_min, cfg.pretrain_lr, epochs, cfg.beta, cfg.theta, cfg.warmup)
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, 1, epoch])
        loss = _pretrain_epoch(learner, corpus, cfg, rng, lr_classifier(epoch - 1, sched), epoch)
        log.info("pretrain epoch %d loss %.5f", epoch, loss)
    return learner.frozen_store()


# ---------------------------------------------------------------------------
# run orchestration

@dataclass
class Phase:
    name: str
    epochs: int
    kind: str


def plan_phases(cfg: RunConfig) -> list[Phase]:
    e1, e2 = cfg.phase_epochs
    plans = {
        "os_kdft": [Phase("joint", cfg.epochs, "joint")],
        "kdft_sequential": [Phase("kd", e1, "kd"), Phase("ft", e2, "ft")],
        "kd_then_freeze": [Phase("kd", e1, "kd"), Phase("head", e2, "head")],
        "tuned_teacher_kl": [Phase("teacher_ft", cfg.teacher_ft_epochs or cfg.epochs, "teacher_sv"),
                             Phase("kl", cfg.epochs, "kl")],
        "ft_only": [Phase("ft", cfg.epochs, "ft")],
        "teacher_pretrain": [Phase("pretrain", cfg.pretrain_epochs, "pretrain")],
    }
    return [p for p in plans[cfg.mode] if p.epochs > 0]


def phase_lrs(cfg: RunConfig, phase: Phase, tau: int) -> dict[str, float]:
    """Learning rate per group for 1-based epoch ``tau`` within ``phase``."""
    if phase.kind == "pretrain":
        p = ScheduleParams(cfg.eta_min, cfg.pretrain_lr, phase.epochs, cfg.beta, cfg.theta, cfg.warmup)
        lr = lr_classifier(tau - 1, p)
        return {g: lr for g in GROUPS}
    p = cfg.schedule(phase.epochs)
    c, s, a = lr_triple(tau, p)
    if phase.kind in ("kd",):
        # no randomly initialised module is being trained: plain cosine decay
        return {"classifier": 0.0, "backbone": c, "adapter": c}
    if phase.kind == "head":
        return {"classifier": c, "backbone": 0.0, "adapter": 0.0}
    if not cfg.per_module_lr:
        return {g: c for g in GROUPS}
    return {"classifier": c, "backbone": s, "adapter": a}


def step_spec(cfg: RunConfig, phase: Phase) -> StepSpec:
    adapters = cfg.use_adapters and cfg.mode not in ("tuned_teacher_kl",)
    return StepSpec(phase.kind, use_adapters=adapters, split_paths=cfg.split_paths and adapters,
                    augment=cfg.augment,
                    specaug=(cfg.specaug_time_masks, cfg.specaug_time_width,
                             cfg.specaug_chan_masks, cfg.specaug_chan_width),
                    specaug_teacher=cfg.specaug_teacher)


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


class RunContext:
    """Everything a run needs besides its config."""

    def __init__(self, cfg: RunConfig, run_dir: str | Path | None = None, teacher: ParameterStore | None = None,
                 dataset: Dataset | None = None, teacher_path: str | Path | None = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.dataset = dataset or build_dataset(cfg)
        self.teacher = teacher
        self.teacher_path = Path(teacher_path) if teacher_path is not None else None

    @functools.cached_property
    def pretrain_corpus(self) -> Corpus:
        return build_pretrain_corpus(self.cfg)

    def require_teacher(self) -> ParameterStore:
        if self.teacher is None:
            if self.teacher_path is None or not self.teacher_path.exists():
                name = self.teacher_path or "teacher.ckpt"
                raise MissingArtifactError(
                    f"mode {self.cfg.mode} needs a pretrained teacher checkpoint: {name} not found")
            self.teacher = load_checkpoint(self.teacher_path).to(_dtype(self.cfg))
        return self.teacher


def _init_network(ctx: RunContext, phase: Phase, prev: Learner | None, tuned_teacher: ParameterStore | None):
    cfg, mc = ctx.cfg, ctx.cfg.model
    head = cfg.head(ctx.dataset.n_speakers)
    seed = cfg.seed
    if phase.kind == "pretrain":
        return Learner(new_teacher(cfg, seed))
    if phase.kind == "teacher_sv":
        base = ctx.require_teacher()
        store = random_store(base.config, "teacher", seed, head, dtype=_dtype(cfg))
        for n in store.entries:
            if n in base.entries:
                store.entries[n] = base.entries[n].detach().clone()
        return Learner(store)
    if phase.kind == "kl":
        student = init_student_from_teacher(tuned_teacher, mc, seed, head, adapters=False, copy_head=True)
        return Learner(student)
    if prev is not None:
        trainable = ("classifier",) if phase.kind == "head" else GROUPS
        return Learner(prev.frozen_store(), trainable)
    adapters = cfg.use_adapters
    if cfg.mode == "ft_only":
        store = random_store(mc, "student", seed, head, adapters, adapter_init=cfg.adapter_init,
                             dtype=_dtype(cfg))
    else:
        store = init_student_from_teacher(ctx.require_teacher(), mc, seed, head, adapters,
                                          adapter_init=cfg.adapter_init)
    return Learner(store.to(_dtype(cfg)))


def evaluate_store(store: ParameterStore, cfg: RunConfig, dataset: Dataset, with_adapters: bool):
    head = store.head
    n_layers = store.n_layers

    def embed(samples):
        return extract_embedding(torch.as_tensor(samples), store.entries, store.config, head, n_layers,
                                 with_adapters)

    rows, scores = score_trials(dataset.trials, dataset.eval, embed, cfg.eval_segment_seconds,
                                cfg.eval_segments)
    return compute_eer(scores), rows


def _ckpt_path(run_dir: Path, epoch: int) -> Path:
    return run_dir / "ckpt" / f"epoch_{epoch}"


def _latest_ckpt(run_dir: Path) -> int:
    found = [int(p.name.split("_")[1]) for p in (run_dir / "ckpt").glob("epoch_*") if p.name[6:].isdigit()]
    return max(found, default=0)


def run(cfg: RunConfig, ctx: RunContext | None = None, resume: bool = False,
        stop_after: int | None = None) -> RunRecord:
    """Execute every phase of ``cfg.mode``; write the run directory if one is set.

    ``stop_after`` ends the run early after that global epoch (used to
    simulate an interrupted job).
    """
    ctx = ctx or RunContext(cfg)
    run_dir = ctx.run_dir
    phases = plan_phases(cfg)
    needs_teacher = cfg.mode in ("os_kdft", "kdft_sequential", "kd_then_freeze", "tuned_teacher_kl")
    if needs_teacher:
        ctx.require_teacher()
    teacher_digest = ctx.teacher.digest() if ctx.teacher is not None else None
    record = RunRecord()
    start_epoch = 0
    state_extra = None
    if run_dir is not None:
        if resume:
            start_epoch = _latest_ckpt(run_dir)
            if start_epoch:
                ck = read_checkpoint(_ckpt_path(run_dir, start_epoch))
                state_extra = ck.extra
                resumed_store = ck.store.to(_dtype(cfg))
                with open(run_dir / "metrics.csv") as fh:
                    rows = list(csv.DictReader(fh))
                record.rows = rows[:start_epoch]
        elif run_dir.exists() and any(run_dir.iterdir()):
            raise FileExistsError(f"run directory {run_dir} is not empty; pass --resume to continue it")
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "ckpt").mkdir(exist_ok=True)
        (run_dir / "config.txt").write_text(dump_config(cfg))
        _write_schedule(run_dir / "schedule.csv", cfg, phases)
        (run_dir / "metrics.csv").write_text(record.metrics_csv())

    t0 = time.perf_counter()
    head = cfg.head(ctx.dataset.n_speakers)
    learner: Learner | None = None
    tuned_teacher: ParameterStore | None = None
    global_epoch = 0
    stopped = False
    for pi, phase in enumerate(phases):
        phase_start = global_epoch
        global_epoch += phase.epochs
        if global_epoch <= start_epoch:
            continue  # phase fully done before the resume point
        spec = step_spec(cfg, phase)
        if phase.kind == "kl" and tuned_teacher is None:
            tuned_teacher = _load_tuned_teacher(ctx, run_dir)
        if start_epoch > phase_start:
            learner = Learner(resumed_store, ("classifier",) if phase.kind == "head" else GROUPS)
            learner.load_state_tensors(state_extra)
        elif start_epoch and start_epoch == phase_start:
            # resuming exactly at a phase boundary: the checkpoint is the previous phase's result
            learner = _init_network(ctx, phase, Learner(resumed_store), tuned_teacher)
        else:
            learner = _init_network(ctx, phase, learner, tuned_teacher)
        first = max(1, start_epoch - phase_start + 1)
        for tau in range(first, phase.epochs + 1):
            epoch = phase_start + tau
            rng = np.random.default_rng([cfg.seed, 1, epoch])
            lrs = phase_lrs(cfg, phase, tau)
            if phase.kind == "pretrain":
                loss = _pretrain_epoch(learner, ctx.pretrain_corpus, cfg, rng, lrs["backbone"], epoch)
                stats = dict(kd_loss=loss, sv_loss=0.0, joint_loss=loss, train_acc=float("nan"),
                             gnorm_classifier=0.0, gnorm_backbone=float("nan"), gnorm_adapter=0.0,
                             kd_gnorm_adapter=0.0)
            else:
                stats = _train_epoch(spec, learner, cfg, head, ctx, tuned_teacher, lrs, rng, epoch)
            row = {"epoch": epoch, "phase": phase.name, "lr_classifier": lrs["classifier"],
                   "lr_backbone": lrs["backbone"], "lr_adapter": lrs["adapter"], **stats, "eer": float("nan")}
            is_last = pi == len(phases) - 1 and tau == phase.epochs
            if cfg.eval_every and epoch % cfg.eval_every == 0 and not is_last and phase.kind not in ("pretrain", "teacher_sv"):
                row["eer"], _ = evaluate_store(learner.frozen_store(), cfg, ctx.dataset, spec.use_adapters)
            record.rows.append({k: _fmt(v) for k, v in row.items()})
            if run_dir is not None:
                with open(run_dir / "metrics.csv", "a") as fh:
                    csv.DictWriter(fh, METRIC_FIELDS, lineterminator="\n").writerow(record.rows[-1])
                if is_last or (cfg.ckpt_every and epoch % cfg.ckpt_every == 0):
                    save_checkpoint(_ckpt_path(run_dir, epoch), learner.frozen_store(),
                                    learner.state_tensors(), {"epoch": epoch, "phase": phase.name})
            if phase.kind == "teacher_sv" and tau == phase.epochs:
                tuned_teacher = learner.frozen_store()
                if run_dir is not None:
                    save_checkpoint(run_dir / "tuned_teacher.ckpt", tuned_teacher)
            if stop_after is not None and epoch >= stop_after:
                stopped = True
                break
        if stopped:
            break

    if ctx.teacher is not None and ctx.teacher.digest() != teacher_digest:
        raise RuntimeError("teacher parameters changed during the run")
    if stopped or learner is None:
        return record

    final = learner.frozen_store()
    record.final = {"mode": cfg.mode, "arm": cfg.arm, "seed": cfg.seed,
                    "backbone_params": final.num_params("cnn.*") + final.num_params("encoder.*"),
                    "adapter_params": final.num_params("adapter.*"),
                    "head_params": final.num_params("head.*")}
    record.final["ssl_params"] = record.final["backbone_params"] + (
        record.final["adapter_params"] if step_spec(cfg, phases[-1]).use_adapters else 0)
    if cfg.mode == "teacher_pretrain":
        if run_dir is not None:
            save_checkpoint(run_dir / "teacher.ckpt", final)
        record.final["heldout_recon_loss"] = heldout_reconstruction_loss(final, ctx.dataset.eval)
    else:
        eer, rows = evaluate_store(final, cfg, ctx.dataset, step_spec(cfg, phases[-1]).use_adapters)
        record.final["eer"] = eer
        if run_dir is not None:
            write_scores(run_dir / "scores.txt", rows)
    record.final["wall_clock_s"] = round(time.perf_counter() - t0, 3)
    if run_dir is not None:
        table, kv = format_eer_report(record.final)
        (run_dir / "eer.txt").write_text(kv)
        log.info("\n%s", table)
    return record


def _load_tuned_teacher(ctx: RunContext, run_dir: Path | None) -> ParameterStore:
    if run_dir is None or not (run_dir / "tuned_teacher.ckpt").exists():
        raise MissingArtifactError("tuned_teacher.ckpt is required to resume the KL phase")
    return load_checkpoint(run_dir / "tuned_teacher.ckpt").to(_dtype(ctx.cfg))


def _train_epoch(spec: StepSpec, learner: Learner, cfg: RunConfig, head, ctx: RunContext,
                 tuned_teacher, lrs, rng, epoch: int) -> dict:
    teacher = tuned_teacher if spec.kind == "kl" else ctx.teacher
    sums = {k: 0.0 for k in ("kd_loss", "sv_loss", "joint_loss", "train_acc", "gnorm_classifier",
                             "gnorm_backbone", "gnorm_adapter", "kd_gnorm_adapter")}
    n = 0
    model_cfg = learner.store.config
    for batch in iterate_batches(ctx.dataset.train, cfg.batch_size, cfg.crop_seconds, rng,
                                 ctx.dataset.speaker_index, cfg.augment):
        try:
            m = train_step(spec, batch, learner, model_cfg, head, teacher, lrs, cfg.loss, rng)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"epoch {epoch}: {exc}") from None
        sums["kd_loss"] += m.kd_loss
        sums["sv_loss"] += m.sv_loss
        sums["joint_loss"] += m.joint_loss
        sums["train_acc"] += m.train_acc if not math.isnan(m.train_acc) else 0.0
        for g in GROUPS:
            sums[f"gnorm_{g}"] += m.gnorms[g]
        sums["kd_gnorm_adapter"] = max(sums["kd_gnorm_adapter"], m.kd_gnorm_adapter)
        n += 1
    out = {k: v / max(n, 1) for k, v in sums.items()}
    out["kd_gnorm_adapter"] = sums["kd_gnorm_adapter"]  # max over the epoch, not mean
    if not spec.needs_sv and spec.kind != "kl":
        out["train_acc"] = float("nan")
    return out


def _write_schedule(path: Path, cfg: RunConfig, phases: list[Phase]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr_classifier", "lr_backbone", "lr_adapter"])
        epoch = 0
        for ph in phases:
            for tau in range(1, ph.epochs + 1):
                epoch += 1
                lrs = phase_lrs(cfg, ph, tau)
                w.writerow([epoch, repr(lrs["classifier"]), repr(lrs["backbone"]), repr(lrs["adapter"])])


def student_param_count(cfg: ModelConfig, head: SpeakerHeadConfig | None = None, adapters: bool = True) -> int:
    """Analytic parameter count of the student SSL part (CNN + encoders [+ adapters])."""
    from .model import backbone_param_count
    return backbone_param_count(cfg, "student") + (adapter_param_count(cfg) if adapters else 0)
