"""Embedded verification battery run by ``mematch verify``.

Three suites, all in double precision and seeded case by case so a failure
can be replayed from the printed seed:

- gradcheck: central finite differences against tape gradients for every
  differentiable op, the composite model pieces and a full tiny episode
  (20 seeds each).
- memory-fuzz: random write sequences (1000 cases) checking attention
  normalization, the capacity bound, unit-norm keys and the write-branch law.
- oracle: conv2d, maxpool, memory read and episode loss against loop-based
  reference implementations, to 1e-6.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import numcore as nc
from .ctxlearner import init_learner, predict_params
from .embednet import embed_query, init_backbone, init_factorized
from .memory import Memory, MemorySlot, WriteBranch, contextual_embed_support, read, write_step
from .rng import stream

GRAD_TOL = 1e-3
ORACLE_TOL = 1e-6
ATTN_TOL = 1e-6
GRAD_SEEDS = 20
FUZZ_CASES = 1000
ORACLE_SEEDS = 20


@dataclass
class Failure:
    case: str
    seed: int
    detail: str


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    failures: list[Failure] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures and self.cases >= MINIMUM_CASES.get(self.name, 0)


def _t(rng: np.random.Generator, *shape, scale: float = 1.0) -> nc.Tensor:
    return nc.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _projected(out: nc.Tensor, rng: np.random.Generator) -> nc.Tensor:
    """Scalar <out, R> with a fixed random R, so every output entry carries gradient."""
    return nc.sum(out * rng.normal(size=out.shape))


# gradcheck cases: seed -> (loss_fn, params)

def _binary(op):
    def build(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4)
        proj = rng.normal(size=(3, 4))
        return lambda: nc.sum(op(a, b) * proj), {"a": a, "b": b}
    return build


def _unary(op, shape=(3, 5), offset=0.0):
    def build(rng):
        x = nc.Tensor(rng.normal(size=shape) + offset, requires_grad=True)
        proj = rng.normal(size=shape)
        return lambda: nc.sum(op(x) * proj), {"x": x}
    return build


def _relu_case(rng):
    # keep entries away from the kink so differences stay on one side
    x = nc.Tensor(rng.choice([-1.0, 1.0], size=(4, 5)) * rng.uniform(0.1, 2.0, size=(4, 5)), requires_grad=True)
    proj = rng.normal(size=(4, 5))
    return lambda: nc.sum(nc.relu(x) * proj), {"x": x}


def _matmul_case(rng):
    a, b, v = _t(rng, 3, 4), _t(rng, 4, 5), _t(rng, 4)
    p1, p2 = rng.normal(size=(3, 5)), rng.normal(size=3)
    return lambda: nc.sum(nc.matmul(a, b) * p1) + nc.dot(nc.matmul(a, v), p2), {"a": a, "b": b, "v": v}


def _dot_case(rng):
    a, b = _t(rng, 6), _t(rng, 6)
    return lambda: nc.dot(a, b), {"a": a, "b": b}


def _reduce_case(rng):
    x = _t(rng, 3, 4, 2)
    p = rng.normal(size=(3, 2))
    return lambda: nc.sum(nc.sum(x, axis=1) * p) + nc.mean(x) * 3.0, {"x": x}


def _shape_case(rng):
    x = _t(rng, 2, 3, 4)
    p = rng.normal(size=(4, 6))
    return lambda: nc.sum(nc.reshape(nc.transpose(x, (2, 0, 1)), (4, 6)) * p), {"x": x}


def _getitem_case(rng):
    x = _t(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)  # repeats exercise scatter-add
    p, q = rng.normal(size=(7, 3)), rng.normal(size=(2, 3))
    return lambda: nc.sum(nc.getitem(x, idx) * p) + nc.sum(x[1:3] * q), {"x": x}


def _stack_case(rng):
    a, b = _t(rng, 3, 2), _t(rng, 3, 2)
    p, q = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 4))
    return lambda: nc.sum(nc.stack([a, b], axis=2) * p) + nc.sum(nc.concat([a, b], axis=1) * q), {"a": a, "b": b}


def _softmax_case(axis):
    def build(rng):
        x = _t(rng, 4, 5, scale=2.0)
        p = rng.normal(size=(4, 5))
        return lambda: nc.sum(nc.softmax(x, axis=axis) * p), {"x": x}
    return build


def _conv_case(rng):
    x, w, b = _t(rng, 2, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    p = rng.normal(size=(2, 3, 5, 5))
    return lambda: nc.sum(nc.conv2d(x, w, b) * p), {"x": x, "w": w, "b": b}


def _maxpool_case(rng):
    # distinct values with margins larger than the step keep argmax stable
    vals = rng.permutation(2 * 2 * 5 * 5).astype(np.float64) * 0.1
    x = nc.Tensor(vals.reshape(2, 2, 5, 5), requires_grad=True)
    p = rng.normal(size=(2, 2, 2, 2))
    return lambda: nc.sum(nc.maxpool2(x) * p), {"x": x}


def _bn_case(shape):
    def build(rng):
        C = shape[1]
        x, g, b = _t(rng, *shape), nc.Tensor(rng.uniform(0.5, 1.5, C), requires_grad=True), _t(rng, C)
        p = rng.normal(size=shape)
        stats = nc.RunningStats(C)
        return lambda: nc.sum(nc.batch_norm(x, g, b, stats, training=True) * p), {"x": x, "gamma": g, "beta": b}
    return build


def _lstm_case(rng):
    D, Din = 3, 4
    x, h, c = _t(rng, Din), _t(rng, D), _t(rng, D)
    wx, wh, b = _t(rng, 4 * D, Din), _t(rng, 4 * D, D), _t(rng, 4 * D)
    p, q = rng.normal(size=D), rng.normal(size=D)

    def loss():
        h2, c2 = nc.lstm_cell(x, h, c, wx, wh, b)
        return nc.dot(h2, p) + nc.dot(c2, q)

    return loss, {"x": x, "h": h, "c": c, "w_x": wx, "w_h": wh, "b": b}


def _factorized_case(rng):
    bb = init_backbone((1, 16, 16), 3, rng)
    fs = init_factorized(3, 3, rng)
    imgs = rng.random((3, 1, 16, 16))
    W = _t(rng, 3)
    p = rng.normal(size=(3, 3))
    params = {"W": W, "m_in": fs.m_in, "m_out": fs.m_out, "bias": fs.bias, "block3.weight": bb.blocks[2].weight}
    return lambda: nc.sum(embed_query(imgs, bb, fs, W, True) * p), params


def _memory_case(rng):
    raw, z = _t(rng, 3, 4), _t(rng, 2, 5)
    t_z, t_c = _t(rng, 4, 5), _t(rng, 5, 4)
    p = rng.normal(size=(2, 5))

    def loss():
        slots = tuple(MemorySlot(nc.l2_normalize(raw[i]), i) for i in range(3))
        return nc.sum(contextual_embed_support(z, Memory(3, 4, slots), t_z, t_c) * p)

    return loss, {"keys": raw, "z": z, "t_z": t_z, "t_c": t_c}


def _learner_case(rng):
    lp = init_learner(4, 3, 2, rng)
    lp.t_p.data[:] = rng.normal(size=lp.t_p.shape)
    raw = _t(rng, 3, 4)
    p = rng.normal(size=2)

    def loss():
        slots = tuple(MemorySlot(nc.l2_normalize(raw[i]), i) for i in range(3))
        return nc.dot(predict_params(Memory(3, 4, slots), lp), p)

    params = {"keys": raw, "t_p": lp.t_p}
    for d in ("forward", "backward"):
        for a in ("w_x", "w_h", "b"):
            params[f"{d}.{a}"] = getattr(getattr(lp, d), a)
    return loss, params


def _loss_case(rng):
    from .trainer.loss import episode_loss

    s = np.repeat(np.arange(3), 2)
    q = rng.integers(0, 3, size=4)
    logits = _t(rng, 4, 6, scale=2.0)
    return lambda: episode_loss(logits, s, q), {"logits": logits}


def tiny_episode(seed: int):
    """The tiny verification config: F=4, D_m=8, D_r=8, D_w=4, 2-way 1-shot, 2 queries."""
    from .episodes import glyph_dataset, sample_episode
    from .trainer import ModelConfig, init_model

    rng = stream(seed, "init")
    params = init_model(ModelConfig((1, 16, 16), filters=4, key_dim=8, hidden=8, width=4), rng, dtype=np.float64)
    ds = glyph_dataset(3, 4, stream(seed, "data"))
    ep = sample_episode(ds, 2, 1, 2, stream(seed, "episodes", 0))
    return params, ep


def _episode_case(rng, seed):
    from .trainer import episode_loss, forward_episode

    params, ep = tiny_episode(seed)

    def loss():
        out = forward_episode(params, ep, training=True)
        return episode_loss(out.logits, ep.support_labels, ep.query_labels)

    return loss, params.parameters(), 3


GRADCHECKS: dict[str, Callable] = {
    "add": _binary(nc.add),
    "sub": _binary(nc.sub),
    "mul": _binary(nc.mul),
    "matmul": _matmul_case,
    "dot": _dot_case,
    "sum/mean": _reduce_case,
    "reshape/transpose": _shape_case,
    "getitem": _getitem_case,
    "stack/concat": _stack_case,
    "relu": _relu_case,
    "tanh": _unary(nc.tanh),
    "sigmoid": _unary(nc.sigmoid, offset=0.5),
    "exp": _unary(nc.exp),
    "softmax": _softmax_case(-1),
    "softmax(axis=0)": _softmax_case(0),
    "log_softmax": _unary(lambda x: nc.log_softmax(x, axis=-1)),
    "l2_normalize": _unary(nc.l2_normalize, shape=(3, 4)),
    "conv2d": _conv_case,
    "maxpool2": _maxpool_case,
    "batch_norm(4d)": _bn_case((3, 2, 3, 3)),
    "batch_norm(2d)": _bn_case((5, 3)),
    "lstm_cell": _lstm_case,
    "factorized_conv": _factorized_case,
    "memory_read": _memory_case,
    "context_learner": _learner_case,
    "episode_loss": _loss_case,
}

ORACLE_NAMES = ("conv2d", "maxpool2", "read", "loss")
# documented floors for the case counts: every op and the full episode at 20 seeds,
# 1000 fuzz sequences, every oracle at 20 seeds
MINIMUM_CASES = {
    "gradcheck": GRAD_SEEDS * (len(GRADCHECKS) + 1),
    "memory-fuzz": FUZZ_CASES,
    "oracle": ORACLE_SEEDS * len(ORACLE_NAMES),
}


def run_gradchecks(seeds: int = GRAD_SEEDS, names: Iterable[str] | None = None, full_episode: bool = True) -> SuiteResult:
    res = SuiteResult("gradcheck")
    start = time.perf_counter()
    cases = dict(GRADCHECKS)
    if names is not None:
        cases = {k: v for k, v in cases.items() if k in set(names)}
    with nc.default_dtype(np.float64):
        for name, build in cases.items():
            for seed in range(seeds):
                rng = stream(seed, "eval", len(name))
                loss_fn, params = build(rng)
                _grad_case(res, name, seed, loss_fn, params, None)
        if full_episode:
            for seed in range(seeds):
                loss_fn, params, entries = _episode_case(None, seed)
                _grad_case(res, "full_episode", seed, loss_fn, params, entries, rng=stream(seed, "eval"))
    res.seconds = time.perf_counter() - start
    return res


def _grad_case(res, name, seed, loss_fn, params, entries, rng=None):
    res.cases += 1
    try:
        results = nc.check_gradients(loss_fn, params, rng=rng, max_entries=entries)
    except Exception as exc:  # a crash is a failure of this case, not of the battery
        res.failures.append(Failure(name, seed, f"raised {type(exc).__name__}: {exc}"))
        return
    bad = [r for r in results if not r.ok(GRAD_TOL)]
    if bad:
        worst = max(bad, key=lambda r: r.max_rel_error)
        res.failures.append(Failure(name, seed, f"{worst.name}: rel. err {worst.max_rel_error:.3g} >= {GRAD_TOL}"))


# memory fuzz

def _fuzz_case(seed: int) -> str | None:
    """Random write sequence; returns a description of the first violated invariant."""
    rng = stream(seed, "eval", 1 << 20)
    dim = int(rng.integers(2, 9))
    capacity = int(rng.integers(1, 7))
    n_labels = int(rng.integers(1, 6))
    mem = Memory(capacity, dim)
    for step in range(int(rng.integers(1, 16))):
        key = rng.normal(size=dim)
        if rng.random() < 0.2 and mem.slots:  # near-duplicates of stored keys
            key = mem.slots[int(rng.integers(len(mem.slots)))].key.data + 1e-3 * key
        label = int(rng.integers(n_labels))
        unit = key / np.linalg.norm(key)
        if mem.slots:
            sims = np.array([float(np.dot(s.key.data, unit)) for s in mem.slots])
            nearest = int(np.flatnonzero(sims == sims.max())[0])
            if mem.slots[nearest].value == label:
                expect = WriteBranch.MERGE
            elif len(mem.slots) < capacity:
                expect = WriteBranch.ALLOCATE
            else:
                expect = WriteBranch.FALLBACK
        else:
            nearest, expect = 0, WriteBranch.ALLOCATE
        before = mem
        mem, branch = write_step(mem, nc.Tensor(key), label)
        if branch is not expect:
            return f"step {step}: branch {branch.name} but the law gives {expect.name}"
        if len(mem.slots) > capacity:
            return f"step {step}: {len(mem.slots)} slots exceed capacity {capacity}"
        if expect is WriteBranch.ALLOCATE:
            if len(mem.slots) != len(before.slots) + 1 or mem.slots[-1].value != label:
                return f"step {step}: allocation did not append a slot labelled {label}"
        else:
            merged = before.slots[nearest].key.data + unit
            merged = merged / np.linalg.norm(merged)
            if len(mem.slots) != len(before.slots) or not np.allclose(mem.slots[nearest].key.data, merged, atol=1e-9):
                return f"step {step}: slot {nearest} is not the normalized sum of old key and new key"
            if mem.slots[nearest].value != before.slots[nearest].value:
                return f"step {step}: merge changed the slot label"
        for i, s in enumerate(mem.slots):
            if abs(np.linalg.norm(s.key.data) - 1.0) > ATTN_TOL:
                return f"step {step}: slot {i} key norm {np.linalg.norm(s.key.data):.9f}"
        q = rng.normal(size=dim) * rng.uniform(0.1, 10.0)
        from .memory import attention

        total = float(attention(mem, nc.Tensor(q)).data.sum())
        if abs(total - 1.0) > ATTN_TOL:
            return f"step {step}: attention sums to {total!r}"
    return None


def run_memory_fuzz(cases: int = FUZZ_CASES) -> SuiteResult:
    res = SuiteResult("memory-fuzz")
    start = time.perf_counter()
    with nc.default_dtype(np.float64):
        for seed in range(cases):
            res.cases += 1
            problem = _fuzz_case(seed)
            if problem:
                res.failures.append(Failure("write/read invariants", seed, problem))
    res.seconds = time.perf_counter() - start
    return res


# loop references

def conv2d_reference(x, w, b, pad):
    cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for r in range(Ho):
            for s in range(Wo):
                acc = b[o]
                for c in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            rr, ss = r + i - pad, s + j - pad
                            if 0 <= rr < H and 0 <= ss < W:
                                acc += x[c, rr, ss] * w[o, c, i, j]
                out[o, r, s] = acc
    return out


def maxpool_reference(x):
    C, H, W = x.shape
    out = np.zeros((C, H // 2, W // 2))
    for c in range(C):
        for r in range(H // 2):
            for s in range(W // 2):
                out[c, r, s] = max(x[c, 2 * r + i, 2 * s + j] for i in range(2) for j in range(2))
    return out


def read_reference(keys, query):
    scores = [sum(float(a) * float(b) for a, b in zip(query, k)) for k in keys]
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    total = sum(e)
    out = [0.0] * len(query)
    for ei, k in zip(e, keys):
        for d in range(len(out)):
            out[d] += ei / total * float(k[d])
    return np.array(out)


def loss_reference(logits, support_labels, query_labels):
    total = 0.0
    for j, yq in enumerate(query_labels):
        row = [float(v) for v in logits[j]]
        top = max(row)
        log_denom = top + math.log(sum(math.exp(v - top) for v in row))
        for n, ys in enumerate(support_labels):
            if ys == yq:
                total -= row[n] - log_denom
    return total


def _oracle_conv(rng):
    cin, cout, k = (int(v) for v in rng.integers(1, 4, size=3))
    k = 2 * k - 1  # 1, 3, 5
    H, W = (int(v) for v in rng.integers(k, k + 5, size=2))
    x, w, b = rng.normal(size=(cin, H, W)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)
    pad = int(rng.integers(0, k // 2 + 1))
    return nc.conv2d(x, w, b, padding=pad).data, conv2d_reference(x, w, b, pad)


def _oracle_maxpool(rng):
    H, W = (int(v) for v in rng.integers(2, 10, size=2))
    x = rng.normal(size=(int(rng.integers(1, 4)), H, W))
    return nc.maxpool2(x).data, maxpool_reference(x)


def _oracle_read(rng):
    dim, n = int(rng.integers(2, 9)), int(rng.integers(1, 7))
    keys = rng.normal(size=(n, dim))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    mem = Memory(n, dim, tuple(MemorySlot(nc.Tensor(k), i) for i, k in enumerate(keys)))
    q = rng.normal(size=dim) * rng.uniform(0.5, 5.0)
    return read(mem, nc.Tensor(q)).data, read_reference(keys, q)


def _oracle_loss(rng):
    from .trainer.loss import episode_loss

    ways, shots, queries = int(rng.integers(2, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
    s = np.repeat(np.arange(ways), shots)
    q = np.repeat(np.arange(ways), queries)
    logits = rng.normal(0.0, 3.0, size=(len(q), len(s)))
    return np.array(episode_loss(logits, s, q).data), np.array(loss_reference(logits, s, q))


ORACLES = {"conv2d": _oracle_conv, "maxpool2": _oracle_maxpool, "read": _oracle_read, "loss": _oracle_loss}


def run_oracles(seeds: int = ORACLE_SEEDS) -> SuiteResult:
    res = SuiteResult("oracle")
    start = time.perf_counter()
    with nc.default_dtype(np.float64):
        for name, build in ORACLES.items():
            for seed in range(seeds):
                res.cases += 1
                got, want = build(stream(seed, "eval", 2 << 20, len(name)))
                if got.shape != want.shape:
                    res.failures.append(Failure(name, seed, f"shape {got.shape} != reference {want.shape}"))
                    continue
                err = float(np.max(np.abs(got - want))) if got.size else 0.0
                if not err <= ORACLE_TOL * max(1.0, float(np.max(np.abs(want)))):
                    res.failures.append(Failure(name, seed, f"max abs deviation {err:.3g}"))
    res.seconds = time.perf_counter() - start
    return res


def run_all(echo: Callable[[str], None] = print) -> list[SuiteResult]:
    """Run the three suites and print one summary line per suite plus each failure."""
    results = [run_gradchecks(), run_memory_fuzz(), run_oracles()]
    for r in results:
        floor = MINIMUM_CASES.get(r.name, 0)
        status = "ok" if r.ok else "FAILED"
        echo(f"{r.name:<12} {status:<6} cases={r.cases} (minimum {floor}) failures={len(r.failures)} time={r.seconds:.1f}s")
        for f in r.failures:
            echo(f"  FAIL {r.name}/{f.case} seed={f.seed}: {f.detail}")
    return results
