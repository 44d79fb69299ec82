import pytest
import torch

from oskdft.init import init_random, init_student_from_teacher, random_store
from oskdft.model import ConfigError, DimensionError, ModelConfig

from conftest import TINY, TINY_HEAD


def sentinel_teacher(cfg=TINY):
    """Teacher whose every entry in layer i holds the constant i + 1 (CNN: -1)."""
    t = random_store(cfg, "teacher", seed=3)
    for n, v in t.entries.items():
        if n.startswith("encoder."):
            t.entries[n] = torch.full_like(v, float(int(n.split(".")[1]) + 1))
        elif n.startswith("cnn."):
            t.entries[n] = torch.full_like(v, -1.0)
    return t


def test_layers_copied_in_order_of_closeness_to_cnn():
    teacher = sentinel_teacher()
    student = init_student_from_teacher(teacher, TINY, seed=0, head=TINY_HEAD)
    for n, v in student.entries.items():
        if n.startswith("encoder."):
            i = int(n.split(".")[1])
            assert bool((v == i + 1).all()), n
            assert torch.equal(v, teacher.entries[n])
        elif n.startswith("cnn."):
            assert bool((v == -1).all()), n
    assert student.n_layers == 2
    assert not student.names("encoder.2.*") and not student.names("encoder.3.*")


def test_head_and_adapters_independent_of_teacher():
    a = init_student_from_teacher(sentinel_teacher(), TINY, 5, TINY_HEAD, adapter_init="random")
    b = init_student_from_teacher(random_store(TINY, "teacher", seed=99), TINY, 5, TINY_HEAD, adapter_init="random")
    assert a.digest("head.*") == b.digest("head.*")
    assert a.digest("adapter.*") == b.digest("adapter.*")
    assert a.digest("encoder.*") != b.digest("encoder.*")


def test_identity_copy_when_depths_match():
    cfg = ModelConfig(8, 2, 2, 2, 2, 2, (2, 2, 2))
    teacher = random_store(cfg, "teacher", seed=1)
    student = init_student_from_teacher(teacher, cfg, seed=0)
    for n in teacher.entries:
        assert torch.equal(student.entries[n], teacher.entries[n])


def test_deterministic(tiny_teacher):
    a = init_student_from_teacher(tiny_teacher, TINY, 4, TINY_HEAD, adapter_init="random")
    b = init_student_from_teacher(tiny_teacher, TINY, 4, TINY_HEAD, adapter_init="random")
    c = init_student_from_teacher(tiny_teacher, TINY, 5, TINY_HEAD, adapter_init="random")
    assert a.digest() == b.digest() != c.digest()


def test_no_aliasing(tiny_teacher):
    before = tiny_teacher.digest()
    student = init_student_from_teacher(tiny_teacher, TINY, 0, TINY_HEAD)
    for v in student.entries.values():
        v.add_(1.0)
    assert tiny_teacher.digest() == before


def test_zero_adapter_up_projection(tiny_teacher):
    student = init_student_from_teacher(tiny_teacher, TINY, 0, TINY_HEAD)
    for n in student.names("adapter.*.w_up"):
        assert bool((student.entries[n] == 0).all())
    assert any(float(student.entries[n].abs().sum()) > 0 for n in student.names("adapter.*.w_down"))


def test_topology_errors_name_the_problem(tiny_teacher):
    with pytest.raises(ConfigError, match="d_model"):
        init_student_from_teacher(tiny_teacher, ModelConfig(16, 4, 2, 2, 2, 2, (2, 2, 2)), 0)
    with pytest.raises(ConfigError, match="encoder layers"):
        shallow = random_store(ModelConfig(8, 1, 1, 2, 2, 2, (2, 2, 2)), "teacher", 0)
        init_student_from_teacher(shallow, TINY, 0)
    broken = tiny_teacher.copy()
    broken.entries["encoder.1.ffn.w1"] = torch.zeros(3, 3, dtype=torch.float64)
    with pytest.raises(DimensionError, match="encoder.1.ffn.w1"):
        init_student_from_teacher(broken, TINY, 0)


def test_init_random(tiny_student):
    with pytest.raises(KeyError, match="matches no parameter"):
        init_random("nothing.*", tiny_student, 0)
    z = init_random("adapter.*.w_up", tiny_student, 1, adapter_init="zero")
    assert all(bool((z.entries[n] == 0).all()) for n in z.names("adapter.*.w_up"))
    a = init_random("head.*", tiny_student, 7)
    b = init_random("head.*", tiny_student, 7)
    assert a.digest() == b.digest()
    assert a.digest("encoder.*") == tiny_student.digest("encoder.*")
    assert a.digest("head.*") != tiny_student.digest("head.*")
