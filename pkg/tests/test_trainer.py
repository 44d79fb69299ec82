import math

import numpy as np
import pytest
import torch

from oskdft.checkpoint import load_checkpoint
from oskdft.config import RunConfig
from oskdft.distillation import LossWeights, NonFiniteLossError
from oskdft.data import iterate_batches
from oskdft.init import init_student_from_teacher
from oskdft import trainer
from oskdft.trainer import (GROUPS, Learner, MissingArtifactError, RunContext, StepSpec, build_dataset,
                            build_pretrain_corpus, compute_losses, group_of, heldout_reconstruction_loss,
                            phase_lrs, plan_phases, pretrain_teacher, run, train_step)

TINY_RUN = RunConfig(
    epochs=4, warmup=2, d_model=8, n_layers_teacher=2, n_layers_student=1, n_heads=2, ffn_mult=2,
    adapter_rank=2, embed_dim=4, n_train_speakers=3, n_eval_speakers=2, train_utts=4, eval_utts=3,
    train_seconds=(2.0, 2.5), eval_seconds=(3.0, 3.5), n_trials=10, batch_size=4, crop_seconds=1.0,
    pretrain_speakers=4, pretrain_utts=2, pretrain_epochs=2, specaug_time_width=2, specaug_chan_width=2,
    dtype="float64", eta_max=3e-3)


@pytest.fixture(scope="module")
def teacher():
    return pretrain_teacher(build_pretrain_corpus(TINY_RUN), TINY_RUN, seed=0)


@pytest.fixture(scope="module")
def dataset():
    return build_dataset(TINY_RUN)


def first_batch(cfg=TINY_RUN, seed=0):
    ds = build_dataset(cfg)
    rng = np.random.default_rng(seed)
    return next(iterate_batches(ds.train, cfg.batch_size, cfg.crop_seconds, rng, ds.speaker_index))


def fresh_learner(teacher, cfg=TINY_RUN, seed=1):
    head = cfg.head(cfg.n_train_speakers)
    student = init_student_from_teacher(teacher, cfg.model, seed, head, adapter_init="random")
    return Learner(student), head


LRS = {"classifier": 1e-3, "backbone": 1e-3, "adapter": 1e-3}


def test_group_of():
    assert group_of("head.proj.weight") == "classifier"
    assert group_of("adapter.0.w_up") == "adapter"
    assert group_of("encoder.0.attn.wq") == group_of("cnn.0.weight") == "backbone"


# -- single steps --------------------------------------------------------------

def test_zero_lr_step_leaves_parameters_unchanged(teacher):
    learner, head = fresh_learner(teacher)
    before = learner.frozen_store().digest()
    zero = {g: 0.0 for g in GROUPS}
    train_step(StepSpec("joint"), first_batch(), learner, TINY_RUN.model, head, teacher, zero,
               TINY_RUN.loss, np.random.default_rng(0))
    assert learner.frozen_store().digest() == before


def test_kd_scale_zero_matches_pure_fine_tuning(teacher):
    a, head = fresh_learner(teacher)
    b, _ = fresh_learner(teacher)
    batch = first_batch()
    train_step(StepSpec("joint"), batch, a, TINY_RUN.model, head, teacher, LRS, LossWeights(0.0, 1.0),
               np.random.default_rng(5))
    train_step(StepSpec("ft"), batch, b, TINY_RUN.model, head, None, LRS, LossWeights(0.0, 1.0),
               np.random.default_rng(5))
    sa, sb = a.frozen_store(), b.frozen_store()
    for n in sa.entries:
        assert torch.equal(sa.entries[n], sb.entries[n]), n


def test_one_step_descends_with_small_enough_lr(teacher):
    batch = first_batch()
    waves = torch.as_tensor(batch.waves, dtype=torch.float64)
    labels = torch.as_tensor(batch.labels)
    learner, head = fresh_learner(teacher)
    spec = StepSpec("joint")

    def joint_value(lrn):
        with torch.no_grad():
            return float(compute_losses(spec, waves, labels, lrn, TINY_RUN.model, head, TINY_RUN.loss, teacher,
                                        np.random.default_rng(0))[2])

    start = joint_value(learner)
    lr = 1e-3
    for _ in range(6):
        trial, _ = fresh_learner(teacher)
        train_step(spec, batch, trial, TINY_RUN.model, head, teacher, {g: lr for g in GROUPS}, TINY_RUN.loss,
                   np.random.default_rng(0))
        if joint_value(trial) < start:
            return
        lr /= 2
    pytest.fail("joint loss did not decrease after 5 halvings")


def test_kd_gradient_never_reaches_adapters(teacher):
    learner, head = fresh_learner(teacher)
    m = train_step(StepSpec("joint"), first_batch(), learner, TINY_RUN.model, head, teacher, LRS,
                   TINY_RUN.loss, np.random.default_rng(0))
    assert m.kd_gnorm_adapter == 0.0
    assert m.gnorms["adapter"] > 0 and m.gnorms["backbone"] > 0 and m.gnorms["classifier"] > 0


def test_kd_only_step_leaves_head_untouched(teacher):
    learner, head = fresh_learner(teacher)
    before = learner.frozen_store().digest("head.*")
    m = train_step(StepSpec("kd"), first_batch(), learner, TINY_RUN.model, head, teacher, LRS,
                   TINY_RUN.loss, np.random.default_rng(0))
    assert m.sv_loss == 0.0 and m.gnorms["classifier"] == 0.0
    assert learner.frozen_store().digest("head.*") == before


def test_non_finite_teacher_aborts_with_provenance(teacher, tmp_path):
    bad = teacher.copy()
    bad.entries["encoder.1.ffn.b2"] = torch.full_like(bad.entries["encoder.1.ffn.b2"], float("nan"))
    with pytest.raises(NonFiniteLossError, match=r"epoch 1.*kd_loss"):
        run(TINY_RUN, RunContext(TINY_RUN, teacher=bad))


# -- teacher pretraining --------------------------------------------------------

def test_pretraining_lowers_heldout_loss(teacher, dataset):
    init = trainer.new_teacher(TINY_RUN, 0)
    assert heldout_reconstruction_loss(teacher, dataset.eval) < heldout_reconstruction_loss(init, dataset.eval)


def test_pretraining_deterministic_and_zero_epochs(teacher):
    again = pretrain_teacher(build_pretrain_corpus(TINY_RUN), TINY_RUN, seed=0)
    assert again.digest() == teacher.digest()
    untouched = pretrain_teacher(build_pretrain_corpus(TINY_RUN), TINY_RUN, seed=0, epochs=0)
    assert untouched.digest() == trainer.new_teacher(TINY_RUN, 0).digest()


def test_pretraining_corpus_is_disjoint(dataset):
    pre = build_pretrain_corpus(TINY_RUN)
    assert not set(pre.speakers) & (set(dataset.train.speakers) | set(dataset.eval.speakers))
    assert build_pretrain_corpus(TINY_RUN.replace(pretrain_speakers=0)) is dataset.train


# -- phases and schedules ---------------------------------------------------------

def test_plan_phases():
    cfg = TINY_RUN.replace(epochs=8, mode="kdft_sequential", kd_ft_ratio=(75, 25))
    assert [(p.kind, p.epochs) for p in plan_phases(cfg)] == [("kd", 6), ("ft", 2)]
    assert [(p.kind, p.epochs) for p in plan_phases(cfg.replace(mode="os_kdft"))] == [("joint", 8)]
    assert [(p.kind, p.epochs) for p in plan_phases(cfg.replace(kd_ft_ratio=(100, 0)))] == [("kd", 8)]
    kl = cfg.replace(mode="tuned_teacher_kl", teacher_ft_epochs=3)
    assert [(p.kind, p.epochs) for p in plan_phases(kl)] == [("teacher_sv", 3), ("kl", 8)]


def test_phase_lrs_per_module_and_single():
    cfg = TINY_RUN.replace(epochs=10, warmup=4)
    joint = plan_phases(cfg)[0]
    lrs = phase_lrs(cfg, joint, 2)
    p = cfg.schedule(10)
    from oskdft.schedule import lr_adapter, lr_backbone, lr_classifier
    assert lrs == {"classifier": lr_classifier(2, p), "backbone": lr_backbone(2, p), "adapter": lr_adapter(2, p)}
    single = phase_lrs(cfg.replace(per_module_lr=False), joint, 2)
    assert single["classifier"] == single["backbone"] == single["adapter"] == lr_classifier(2, p)


# -- full runs ----------------------------------------------------------------

ARTIFACTS = ("config.txt", "schedule.csv", "metrics.csv", "scores.txt", "eer.txt")


def test_missing_teacher_names_the_artifact(tmp_path):
    with pytest.raises(MissingArtifactError, match="teacher.ckpt"):
        run(TINY_RUN, RunContext(TINY_RUN, tmp_path / "r", teacher_path=tmp_path / "teacher.ckpt"))


def test_run_writes_artifacts_and_keeps_teacher(teacher, tmp_path):
    before = teacher.digest()
    rec = run(TINY_RUN, RunContext(TINY_RUN, tmp_path / "r", teacher=teacher))
    assert teacher.digest() == before
    for name in ARTIFACTS:
        assert (tmp_path / "r" / name).exists(), name
    assert sorted(p.name for p in (tmp_path / "r" / "ckpt").iterdir()) == [f"epoch_{k}" for k in range(1, 5)]
    assert 0 <= rec.final["eer"] <= 1
    assert rec.final["adapter_params"] == TINY_RUN.model.n_layers_student * 2 * 8 * 2
    rows = rec.rows
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
    # adapters learn from the speaker loss only
    assert all(float(r["kd_gnorm_adapter"]) == 0.0 for r in rows)
    assert all(float(r["gnorm_adapter"]) > 0.0 for r in rows)
    with pytest.raises(FileExistsError):
        run(TINY_RUN, RunContext(TINY_RUN, tmp_path / "r", teacher=teacher))


def test_adapters_move_during_os_kdft(teacher, tmp_path):
    run(TINY_RUN, RunContext(TINY_RUN, tmp_path / "r", teacher=teacher))
    final = load_checkpoint(tmp_path / "r" / "ckpt" / "epoch_4")
    # the up-projection starts at zero and only the speaker loss can move it
    for n in final.names("adapter.*.w_up"):
        assert float(final.entries[n].abs().sum()) > 0, n


def test_same_seed_same_metrics(teacher, tmp_path):
    run(TINY_RUN, RunContext(TINY_RUN, tmp_path / "a", teacher=teacher))
    run(TINY_RUN, RunContext(TINY_RUN, tmp_path / "b", teacher=teacher))
    for name in ("metrics.csv", "scores.txt", "schedule.csv", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    fa = load_checkpoint(tmp_path / "a" / "ckpt" / "epoch_4")
    fb = load_checkpoint(tmp_path / "b" / "ckpt" / "epoch_4")
    assert fa.digest() == fb.digest()


@pytest.mark.parametrize("mode,stop", [("os_kdft", 1), ("os_kdft", 3), ("kdft_sequential", 2),
                                       ("kdft_sequential", 3), ("tuned_teacher_kl", 2), ("tuned_teacher_kl", 5)])
def test_resume_reproduces_uninterrupted_run(teacher, tmp_path, mode, stop):
    cfg = TINY_RUN.replace(mode=mode, teacher_ft_epochs=2)
    run(cfg, RunContext(cfg, tmp_path / "full", teacher=teacher))
    run(cfg, RunContext(cfg, tmp_path / "cut", teacher=teacher), stop_after=stop)
    assert not (tmp_path / "cut" / "eer.txt").exists()
    run(cfg, RunContext(cfg, tmp_path / "cut", teacher=teacher), resume=True)
    for name in ("metrics.csv", "scores.txt", "eer.txt"):
        a = (tmp_path / "full" / name).read_text()
        b = (tmp_path / "cut" / name).read_text()
        if name == "eer.txt":  # wall clock differs
            a, b = ([l for l in t.splitlines() if not l.startswith("wall_clock")] for t in (a, b))
        assert a == b, name


def test_sequential_phase_boundaries_are_exact(teacher):
    cfg = TINY_RUN.replace(mode="kdft_sequential")
    rows = run(cfg, RunContext(cfg, teacher=teacher)).rows
    kd_rows, ft_rows = rows[:2], rows[2:]
    assert [r["phase"] for r in rows] == ["kd", "kd", "ft", "ft"]
    for r in kd_rows:
        assert float(r["sv_loss"]) == 0.0 and float(r["gnorm_classifier"]) == 0.0
        assert float(r["lr_classifier"]) == 0.0
    for r in ft_rows:
        assert float(r["kd_loss"]) == 0.0 and float(r["kd_gnorm_adapter"]) == 0.0
        assert float(r["sv_loss"]) > 0.0


def test_ratio_100_0_equals_kd_then_freeze(teacher):
    seq = TINY_RUN.replace(mode="kdft_sequential", kd_ft_ratio=(100, 0))
    frz = TINY_RUN.replace(mode="kd_then_freeze", kd_ft_ratio=(100, 0))
    a = run(seq, RunContext(seq, teacher=teacher))
    b = run(frz, RunContext(frz, teacher=teacher))
    assert a.rows == b.rows
    assert a.final["eer"] == b.final["eer"]


def test_kd_then_freeze_trains_only_the_head(teacher, tmp_path):
    cfg = TINY_RUN.replace(mode="kd_then_freeze")
    run(cfg, RunContext(cfg, tmp_path / "r", teacher=teacher))
    after_kd = load_checkpoint(tmp_path / "r" / "ckpt" / "epoch_2")
    final = load_checkpoint(tmp_path / "r" / "ckpt" / "epoch_4")
    assert after_kd.digest("cnn.*") == final.digest("cnn.*")
    assert after_kd.digest("encoder.*") == final.digest("encoder.*")
    assert after_kd.digest("adapter.*") == final.digest("adapter.*")
    assert after_kd.digest("head.*") != final.digest("head.*")


def test_kdft_arm_has_no_adapters(teacher):
    cfg = TINY_RUN.replace(use_adapters=False)
    assert cfg.arm == "KDFT"
    rec = run(cfg, RunContext(cfg, teacher=teacher))
    assert rec.final["adapter_params"] == 0
    assert all(float(r["gnorm_adapter"]) == 0.0 for r in rec.rows)


def test_tuned_teacher_kl_writes_new_teacher(teacher, tmp_path):
    cfg = TINY_RUN.replace(mode="tuned_teacher_kl", teacher_ft_epochs=2)
    before = teacher.digest()
    rec = run(cfg, RunContext(cfg, tmp_path / "r", teacher=teacher))
    tuned = load_checkpoint(tmp_path / "r" / "tuned_teacher.ckpt")
    assert teacher.digest() == before
    assert tuned.digest("encoder.*") != teacher.digest("encoder.*")
    assert [r["phase"] for r in rec.rows] == ["teacher_ft"] * 2 + ["kl"] * 4
    assert rec.final["adapter_params"] == 0


def test_ft_only_needs_no_teacher():
    cfg = TINY_RUN.replace(mode="ft_only")
    rec = run(cfg, RunContext(cfg))
    assert all(float(r["kd_loss"]) == 0.0 for r in rec.rows)
    assert not math.isnan(rec.final["eer"])


def test_teacher_pretrain_mode_writes_checkpoint(tmp_path):
    cfg = TINY_RUN.replace(mode="teacher_pretrain")
    rec = run(cfg, RunContext(cfg, tmp_path / "t"))
    store = load_checkpoint(tmp_path / "t" / "teacher.ckpt")
    assert store.kind == "teacher"
    assert store.digest() == pretrain_teacher(build_pretrain_corpus(cfg), cfg, cfg.seed).digest()
    assert rec.final["heldout_recon_loss"] > 0
