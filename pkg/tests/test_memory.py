import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mematch.numcore as nc
from mematch.memory import (
    Memory,
    MemorySlot,
    WriteBranch,
    attention,
    build_memory,
    contextual_embed_support,
    project_key,
    read,
    write,
    write_step,
)
from oracles import read_loops


def mem_of(keys, values, capacity=None, dtype=np.float64):
    slots = tuple(MemorySlot(nc.Tensor(k, dtype=dtype), v) for k, v in zip(keys, values))
    return Memory(capacity or max(len(slots), 1), len(keys[0]), slots)


@pytest.fixture
def f64():
    with nc.default_dtype(np.float64):
        yield


# project_key


def test_project_key_zero_and_identity(f64):
    z = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(project_key(z, np.zeros((4, 3))).data, 0.0)
    np.testing.assert_array_equal(project_key(z, np.eye(3)).data, z)


def test_project_key_matches_naive_matvec(f64):
    rng = np.random.default_rng(0)
    T, z = rng.normal(size=(5, 7)), rng.normal(size=7)
    expected = [sum(T[r, c] * z[c] for c in range(7)) for r in range(5)]
    np.testing.assert_allclose(project_key(z, T).data, expected, atol=1e-6)
    Z = rng.normal(size=(3, 7))
    np.testing.assert_allclose(project_key(Z, T).data[1], T @ Z[1], atol=1e-12)


def test_project_key_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        project_key(np.zeros(3), np.zeros((4, 5)))


# write controller


def test_write_into_empty(f64):
    mem = write(Memory(2, 2), [1.0, 0.0], 0)
    assert mem.values == [0]
    np.testing.assert_array_equal(mem.slots[0].key.data, [1.0, 0.0])


def test_write_same_label_merges(f64):
    mem = write(mem_of([[1.0, 0.0]], [0], capacity=2), [0.0, 1.0], 0)
    assert len(mem) == 1
    np.testing.assert_allclose(mem.slots[0].key.data, [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-12)


def test_write_new_label_allocates(f64):
    mem = write(mem_of([[1.0, 0.0]], [0], capacity=2), [0.0, 1.0], 1)
    assert mem.values == [0, 1]
    np.testing.assert_array_equal(mem.slots[1].key.data, [0.0, 1.0])


def test_write_full_memory_falls_back_to_merge(f64):
    mem, branch = write_step(mem_of([[1.0, 0.0]], [0], capacity=1), [1.0, 0.2], 3)
    assert branch is WriteBranch.FALLBACK
    assert mem.values == [0]
    expected = np.array([1.0, 0.0]) + np.array([1.0, 0.2]) / np.hypot(1.0, 0.2)
    np.testing.assert_allclose(mem.slots[0].key.data, expected / np.linalg.norm(expected))


def test_write_normalizes_on_insertion(f64):
    mem = write(Memory(1, 2), [3.0, 4.0], 0)
    np.testing.assert_allclose(mem.slots[0].key.data, [0.6, 0.8])


def test_write_zero_key_is_degenerate():
    with pytest.raises(nc.DegenerateInputError):
        write(Memory(2, 2), [0.0, 0.0], 0)


def test_nearest_tie_goes_to_lowest_index(f64):
    mem = mem_of([[1.0, 0.0], [0.0, 1.0]], [0, 1], capacity=3)
    # equidistant from both keys -> slot 0 (label 0) wins -> merge
    mem2, branch = write_step(mem, [1.0, 1.0], 0)
    assert branch is WriteBranch.MERGE
    assert mem2.values == [0, 1]


def simulate_writes(keys, labels, capacity):
    """Plain-numpy replay of the write rule."""
    slots = []
    for k, y in zip(keys, labels):
        u = k / np.linalg.norm(k)
        if not slots:
            slots.append([u, y])
            continue
        i = int(np.argmax([s[0] @ u for s in slots]))
        if slots[i][1] == y or len(slots) >= capacity:
            m = slots[i][0] + u
            slots[i][0] = m / np.linalg.norm(m)
        else:
            slots.append([u, y])
    return slots


def test_build_memory_one_slot_per_class_for_distinct_labels(f64):
    rng = np.random.default_rng(4)
    C = 5
    keys = rng.normal(size=(C, 16))
    labels = list(rng.permutation(C))
    mem = build_memory(nc.Tensor(keys), labels, capacity=C)
    ref = simulate_writes(keys, labels, C)
    assert len(mem) == C == len(ref)
    assert sorted(mem.values) == list(range(C))
    for slot, (k, y) in zip(mem.slots, ref):
        assert slot.value == y
        np.testing.assert_allclose(slot.key.data, k, atol=1e-12)


def test_build_memory_single_sample(f64):
    mem = build_memory(nc.Tensor(np.ones((1, 4))), [2], capacity=1)
    assert len(mem) == 1 and mem.values == [2]


@pytest.mark.parametrize("seed", range(10))
def test_build_memory_matches_simulation_with_shots(seed, f64):
    rng = np.random.default_rng(seed)
    C, k = 3, 4
    keys = rng.normal(size=(C * k, 6))
    labels = [c for c in range(C) for _ in range(k)]
    order = rng.permutation(C * k)
    cap = int(rng.integers(1, C * k + 1))
    mem = build_memory(nc.Tensor(keys), labels, capacity=cap, order=order)
    ref = simulate_writes(keys[order], [labels[i] for i in order], cap)
    assert len(mem) == len(ref) <= min(C * k, cap)
    for slot, (key, y) in zip(mem.slots, ref):
        assert slot.value == y
        np.testing.assert_allclose(slot.key.data, key, atol=1e-10)


key_lists = st.integers(0, 2**32 - 1).flatmap(
    lambda seed: st.tuples(st.just(seed), st.integers(1, 12), st.integers(1, 6), st.integers(1, 4))
)


@settings(max_examples=300, deadline=None)
@given(params=key_lists)
def test_write_invariants(params):
    seed, length, capacity, n_labels = params
    rng = np.random.default_rng(seed)
    with nc.default_dtype(np.float64):
        mem = Memory(capacity, 5)
        for step in range(length):
            zk = rng.normal(size=5) * rng.uniform(0.1, 10)
            y = int(rng.integers(n_labels))
            before = mem
            unit = zk / np.linalg.norm(zk)
            mem, branch = write_step(mem, zk, y)
            assert len(mem) <= min(step + 1, capacity)
            for s in mem.slots:
                assert abs(np.linalg.norm(s.key.data) - 1.0) < 1e-5
            if before.slots:
                i = int(np.argmax([s.key.data @ unit for s in before.slots]))
                if before.slots[i].value == y:
                    assert branch is WriteBranch.MERGE
                elif before.is_full:
                    assert branch is WriteBranch.FALLBACK
                else:
                    assert branch is WriteBranch.ALLOCATE
                if branch is not WriteBranch.ALLOCATE:
                    # merged key lies in span{old key, unit input}
                    basis = np.stack([before.slots[i].key.data, unit], axis=1)
                    coef, *_ = np.linalg.lstsq(basis, mem.slots[i].key.data, rcond=None)
                    np.testing.assert_allclose(basis @ coef, mem.slots[i].key.data, atol=1e-9)
            else:
                assert branch is WriteBranch.ALLOCATE


# read controller


def test_read_single_slot_returns_key(f64):
    mem = mem_of([[0.6, 0.8]], [0])
    for q in ([1.0, 0.0], [-5.0, 3.0]):
        np.testing.assert_allclose(read(mem, q).data, [0.6, 0.8])


def test_read_two_orthonormal_keys(f64):
    mem = mem_of([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    np.testing.assert_allclose(read(mem, [1.0, 0.0]).data, [0.73106, 0.26894], atol=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_read_matches_loop_oracle(seed, f64):
    rng = np.random.default_rng(seed)
    S, D = int(rng.integers(1, 7)), 8
    keys = rng.normal(size=(S, D))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    mem = mem_of(list(keys), list(range(S)))
    q = rng.normal(size=D) * 2
    c_ref, a_ref = read_loops(keys, q)
    np.testing.assert_allclose(read(mem, q).data, c_ref, atol=1e-6)
    np.testing.assert_allclose(attention(mem, q).data, a_ref, atol=1e-6)
    Q = rng.normal(size=(3, D))
    batched = read(mem, Q).data
    for r in range(3):
        np.testing.assert_allclose(batched[r], read_loops(keys, Q[r])[0], atol=1e-6)


def test_read_empty_memory():
    with pytest.raises(ValueError, match="empty"):
        read(Memory(2, 2), [1.0, 0.0])


def test_attention_normalized_fuzz(f64):
    rng = np.random.default_rng(11)
    for _ in range(1000):
        S, D = int(rng.integers(1, 10)), int(rng.integers(1, 9))
        keys = rng.normal(size=(S, D))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        a = attention(mem_of(list(keys), [0] * S), rng.normal(size=D) * rng.uniform(0.01, 50)).data
        assert (a >= 0).all()
        assert abs(a.sum() - 1.0) < 1e-6


# contextual support embedding


def test_contextual_embed_shortcut_identity(f64):
    rng = np.random.default_rng(2)
    z = rng.normal(size=6)
    mem = mem_of([rng.normal(size=4)], [0])
    g = contextual_embed_support(z, mem, rng.normal(size=(4, 6)), np.zeros((6, 4)))
    np.testing.assert_array_equal(g.data, z)


def test_contextual_embed_single_slot(f64):
    rng = np.random.default_rng(3)
    key = np.array([0.0, 0.6, 0.8, 0.0])
    z = rng.normal(size=4)
    g = contextual_embed_support(z, mem_of([key], [0]), rng.normal(size=(4, 4)), np.eye(4))
    np.testing.assert_allclose(g.data, key + z, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_contextual_embed_gradcheck(seed, f64):
    rng = np.random.default_rng(seed)
    D_z, D_m = 5, 4
    z = nc.Tensor(rng.normal(size=(3, D_z)), requires_grad=True)
    t_z = nc.Tensor(rng.normal(size=(D_m, D_z)), requires_grad=True)
    t_c = nc.Tensor(rng.normal(size=(D_z, D_m)), requires_grad=True)
    raw_keys = nc.Tensor(rng.normal(size=(3, D_m)), requires_grad=True)
    proj = rng.normal(size=(3, D_z))

    def loss():
        mem = build_memory(raw_keys, [0, 1, 0], capacity=3)
        return nc.sum(contextual_embed_support(z, mem, t_z, t_c) * proj)

    for r in nc.check_gradients(loss, {"z": z, "T_z": t_z, "T_c": t_c, "keys": raw_keys}):
        assert r.ok(), r
