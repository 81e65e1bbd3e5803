import csv
import math
import zlib

import numpy as np
import pytest

import mematch.numcore as nc
from mematch.episodes import SamplingStrategy, glyph_dataset, sample_episode
from mematch.rng import stream
from mematch.trainer import (
    Adam,
    CheckpointError,
    ModelConfig,
    NumericalAbort,
    TrainSettings,
    confidence95,
    decode_checkpoint,
    encode_checkpoint,
    episode_logits,
    episode_loss,
    evaluate,
    forward_episode,
    init_model,
    load_checkpoint,
    predict_label,
    predict_labels,
    save_checkpoint,
    train,
    train_step,
    warm_up_batchnorm,
)
from mematch.trainer import engine
from oracles import episode_logits_oracle, episode_loss_loops

TINY = ModelConfig((1, 16, 16), filters=4, key_dim=8, hidden=8, width=4)


@pytest.fixture(scope="module")
def ds():
    return glyph_dataset(10, 20, np.random.default_rng(0))


@pytest.fixture
def f64():
    with nc.default_dtype(np.float64):
        yield


def fresh(seed=0, config=TINY, dtype=None):
    return init_model(config, stream(seed, "init"), dtype=dtype)


# logits


def test_logits_shape_eval_protocol(ds):
    params = fresh()
    ep = sample_episode(ds, 5, 1, 15, np.random.default_rng(0))
    assert episode_logits(params, ep).shape == (75, 5)


def test_logits_match_unbatched_oracle(ds, f64):
    params = fresh(3, dtype=np.float64)
    warm_up_batchnorm(params, ds, SamplingStrategy.uniform(5, 2), 3, seed=0)
    for p in params.parameters().values():  # move biases and betas off zero
        if p.ndim == 1 and "learner" not in (p.name or ""):
            p.data += np.random.default_rng(1).normal(0, 0.1, size=p.shape)
    for i in range(3):
        ep = sample_episode(ds, 3, 2, 2, stream(4, "eval", i))
        got = episode_logits(params, ep, training=False).data
        np.testing.assert_allclose(got, episode_logits_oracle(params, ep), rtol=1e-5, atol=1e-5)


def test_self_similarity_when_query_path_equals_support_path(ds, f64, monkeypatch):
    """Copy the support images as queries, T_c = 0 and a factorized block that
    reproduces block 4: f and g coincide, so the logits are the Gram matrix of g."""
    params = fresh(1, dtype=np.float64)
    blk, fs = params.backbone.blocks[3], params.factorized
    F = TINY.filters
    blk.weight.data[:] = 0.0
    centre = np.random.default_rng(2).normal(size=(F, F))
    blk.weight.data[:, :, 1, 1] = centre
    fs.m_in.data[:, :, 0, 0] = np.eye(F)
    fs.m_out.data[:, :, 0, 0] = centre
    fs.bias.data[:] = blk.bias.data
    fs.gamma.data[:], fs.beta.data[:] = blk.gamma.data, blk.beta.data
    params.t_c.data[:] = 0.0
    monkeypatch.setattr("mematch.trainer.model.predict_params", lambda mem, lp: nc.Tensor(np.ones(F)))  # W frozen
    ep = sample_episode(ds, 4, 1, 1, np.random.default_rng(3))
    ep.query_images = ep.support_images.copy()
    ep.query_labels = ep.support_labels.copy()
    out = forward_episode(params, ep, training=True)
    np.testing.assert_allclose(out.query_embeddings.data, out.support_embeddings.data, atol=1e-12)
    L = out.logits.data
    np.testing.assert_allclose(L, L.T, atol=1e-12)
    assert np.linalg.eigvalsh(L).min() > -1e-9


def test_shape_universality(ds):
    params = fresh()
    shapes = {k: p.shape for k, p in params.parameters().items()}
    for C in range(2, 6):
        for k in range(1, 6):
            ep = sample_episode(ds, C, k, 2, stream(0, "episodes", C, k))
            out = forward_episode(params, ep, training=True)
            assert out.logits.shape == (2 * C, C * k)
            assert out.predicted.shape == (TINY.predicted_width,)
    assert {k: p.shape for k, p in params.parameters().items()} == shapes


# loss


def test_loss_single_support_is_zero():
    assert float(episode_loss(np.array([[3.7]]), [0], [0]).data) == 0.0


def test_loss_uniform_two_way():
    loss = episode_loss(np.zeros((4, 2)), [0, 1], [0, 1, 1, 0])
    assert float(loss.data) == pytest.approx(4 * math.log(2), abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_loss_matches_double_loop(seed, f64):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 3, size=(3, 4))
    s = [0, 1, 0, 2]
    q = rng.integers(0, 3, size=3)
    assert float(episode_loss(logits, s, q).data) == pytest.approx(episode_loss_loops(logits, s, q), abs=1e-6)


def test_loss_counts_every_matching_support_sample(f64):
    logits = np.array([[1.0, 2.0, 0.5]])
    lit = float(episode_loss(logits, [0, 0, 1], [0]).data)
    avg = float(episode_loss(logits, [0, 0, 1], [0], average_matches=True).data)
    assert lit == pytest.approx(2 * avg)


def test_loss_nonnegative(f64):
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = rng.integers(0, 3, size=6)
        q = rng.choice(s, size=4)
        assert float(episode_loss(rng.normal(0, 5, size=(4, 6)), s, q).data) >= 0.0


def test_loss_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        episode_loss(np.zeros((2, 3)), [0, 1], [0, 1])


# prediction


def test_predict_examples():
    assert predict_label([0.1, 0.9, 0.2], [0, 1, 0]) == 1
    assert predict_label([0.5, 0.5, 0.5], [2, 0, 1]) == 2


def test_predict_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 10))
        row = rng.integers(-3, 4, size=n).astype(float)  # integer values force ties
        labels = rng.integers(0, 4, size=n)
        best = 0
        for i in range(n):
            if row[i] > row[best]:
                best = i
        assert predict_label(row, labels) == labels[best]


def test_predict_per_class_flag():
    row, labels = [1.0, 1.0, 1.5], [0, 0, 1]
    assert predict_label(row, labels) == 1
    assert predict_label(row, labels, per_class=True) == 0
    assert predict_labels(np.array([row, row]), labels).tolist() == [1, 1]


# optimisation


def test_lr_schedule():
    opt = Adam()
    assert opt.lr_at(0) == 1e-3
    assert opt.lr_at(19999) == 1e-3
    assert opt.lr_at(20000) == pytest.approx(5e-4)
    assert opt.lr_at(40000) == pytest.approx(2.5e-4)


def test_zero_gradient_step_leaves_params_unchanged():
    params = fresh()
    before = {k: p.data.copy() for k, p in params.parameters().items()}
    params.zero_grad()
    for p in params.parameters().values():
        p.grad = np.zeros_like(p.data)
    opt = Adam()
    opt.update(params.parameters())
    for k, p in params.parameters().items():
        np.testing.assert_array_equal(p.data, before[k])
    assert opt.step == 1


def test_overfit_one_episode(ds):
    # small enough that Adam's momentum never overshoots on a fixed episode
    params = fresh(2)
    opt = Adam(base_lr=1e-4)
    ep = sample_episode(ds, 5, 1, 3, np.random.default_rng(5))
    losses = [train_step(params, opt, [ep]) for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert losses[-1] < 0.8 * losses[0]


def test_every_parameter_receives_gradient(ds):
    params = fresh(4)
    ep = sample_episode(ds, 5, 2, 3, np.random.default_rng(6))
    train_step(params, Adam(), [ep])
    for name, p in params.parameters().items():
        assert p.grad is not None and np.abs(p.grad).max() > 0, name


def test_nan_loss_aborts(ds):
    params = fresh()
    params.t_c.data[0, 0] = np.nan
    ep = sample_episode(ds, 2, 1, 1, np.random.default_rng(0))
    with pytest.raises(NumericalAbort, match="non-finite loss"):
        train_step(params, Adam(), [ep])


@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradcheck(seed, f64):
    from mematch.verify import tiny_episode

    params, ep = tiny_episode(seed)
    assert (ep.ways, ep.shots, len(ep.query_labels)) == (2, 1, 4)

    def loss():
        out = forward_episode(params, ep, training=True)
        return episode_loss(out.logits, ep.support_labels, ep.query_labels)

    for r in nc.check_gradients(loss, params.parameters(), rng=np.random.default_rng(seed), max_entries=3):
        assert r.ok(), r


# evaluation


def _stub_accuracy(monkeypatch):
    """Per-episode accuracy drawn from the episode's own stream: a deterministic stand-in model."""
    calls = []

    def fake(params, ep, per_class=False):
        calls.append(len(ep.query_labels))
        rng = np.random.default_rng(zlib.crc32(ep.support_images.tobytes()))
        return float(rng.binomial(len(ep.query_labels), 0.6)) / len(ep.query_labels)

    monkeypatch.setattr(engine, "episode_accuracy", fake)
    return calls


def test_evaluate_defaults(ds, monkeypatch):
    calls = _stub_accuracy(monkeypatch)
    rep = evaluate(None, ds, 5, 1)
    assert rep.episodes == 500 and len(calls) == 500
    assert set(calls) == {5 * 15}
    assert rep.ci95 == pytest.approx(1.96 * np.std(rep.accuracies, ddof=1) / math.sqrt(500))


def test_ci_halves_with_four_times_the_episodes(ds, monkeypatch):
    _stub_accuracy(monkeypatch)
    small = evaluate(None, ds, 5, 1, n_episodes=500)
    large = evaluate(None, ds, 5, 1, n_episodes=2000)
    assert small.ci95 / large.ci95 == pytest.approx(2.0, rel=0.1)


def test_confidence95_formula():
    accs = [0.2, 0.4, 0.6, 0.8]
    assert confidence95(accs) == pytest.approx(1.96 * np.std(accs, ddof=1) / 2)
    assert confidence95([0.5]) == 0.0


def test_untrained_model_is_at_chance(ds):
    params = fresh(5)
    warm_up_batchnorm(params, ds, SamplingStrategy.uniform(5, 1), 5, seed=0)
    rep = evaluate(params, ds, 5, 1, n_episodes=500)
    assert abs(rep.mean_accuracy - 0.2) <= 0.05
    assert rep.percent().count("±") == 1


def test_evaluate_deterministic_and_thread_independent(ds):
    params = fresh(6)
    warm_up_batchnorm(params, ds, SamplingStrategy.uniform(5, 1), 2, seed=0)
    a = evaluate(params, ds, 5, 1, n_episodes=20, seed=3)
    b = evaluate(params, ds, 5, 1, n_episodes=20, seed=3, threads=3)
    assert a.accuracies == b.accuracies
    assert (a.mean_accuracy, a.ci95) == (b.mean_accuracy, b.ci95)


def test_evaluate_needs_running_stats(ds):
    with pytest.raises(nc.UninitializedStatsError):
        evaluate(fresh(), ds, 5, 1, n_episodes=1)


# checkpoints


def _trained(ds, steps=3):
    params, opt = fresh(7), Adam()
    for s in range(steps):
        train_step(params, opt, [sample_episode(ds, 3, 1, 2, stream(0, "episodes", s))])
    return params, opt


def test_checkpoint_round_trip_is_byte_identical(ds, tmp_path):
    params, opt = _trained(ds)
    p1 = save_checkpoint(params, opt, opt.step, tmp_path / "a.ckpt", {"note": "x"})
    ck = load_checkpoint(p1)
    p2 = save_checkpoint(ck.params, ck.opt, ck.step, tmp_path / "b.ckpt", {"note": "x"})
    assert p1.read_bytes() == p2.read_bytes()
    assert ck.step == 3 and ck.meta["note"] == "x"
    for k, p in params.parameters().items():
        assert p.data.tobytes() == ck.params.parameters()[k].data.tobytes()
        assert opt.m[k].tobytes() == ck.opt.m[k].tobytes()
    for k, s in params.buffers().items():
        assert s.var.tobytes() == ck.params.buffers()[k].var.tobytes()


def test_truncated_checkpoint_rejected(ds):
    params, opt = _trained(ds, 1)
    blob = encode_checkpoint(params, opt, 1)
    for cut in (5, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointError, match="truncated|checksum"):
            decode_checkpoint(blob[:cut])


def test_corrupt_and_foreign_checkpoints(ds):
    import struct

    params, opt = _trained(ds, 1)
    blob = bytearray(encode_checkpoint(params, opt, 1))
    flipped = bytes(blob[:100]) + bytes([blob[100] ^ 1]) + bytes(blob[101:])
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(flipped)
    body = bytes(blob[:-4])
    bad_version = body[:8] + struct.pack("<I", 99) + body[12:]
    with pytest.raises(CheckpointError, match="version 99"):
        decode_checkpoint(bad_version + struct.pack("<I", zlib.crc32(bad_version)))
    bad_magic = b"NOTMINE\0" + body[8:]
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(bad_magic + struct.pack("<I", zlib.crc32(bad_magic)))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="does not exist"):
        load_checkpoint(tmp_path / "nope.ckpt")


# training loop


def _settings(steps, **kw):
    return TrainSettings(steps=steps, strategy=SamplingStrategy.uniform(3, 1, 2), seed=11, batch=2,
                         checkpoint_every=4, **kw)


def test_resume_reproduces_trajectory(ds, tmp_path):
    full = train(fresh(8), Adam(), ds, _settings(8))

    ck = tmp_path / "m.ckpt"
    first = train(fresh(8), Adam(), ds, _settings(4), checkpoint_path=ck)
    state = load_checkpoint(ck)
    assert state.step == 4 and state.meta["rng"]["next_index"] == 4
    rest = train(state.params, state.opt, ds, _settings(8))
    assert first + rest == full


def test_metrics_csv(ds, tmp_path):
    path = tmp_path / "metrics.csv"
    losses = train(fresh(9), Adam(), ds, _settings(5, val_every=5, val_episodes=3), metrics_path=path,
                   val_ds=ds, checkpoint_path=tmp_path / "m.ckpt")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["step", "loss", "lr", "val_acc"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]
    assert [float(r[1]) for r in rows[1:]] == pytest.approx(losses, abs=1e-6)
    assert rows[-1][3] != "" and rows[1][3] == ""
    assert (tmp_path / "m.ckpt.best").exists()


def test_training_is_deterministic(ds, tmp_path):
    a = train(fresh(10), Adam(), ds, _settings(3), metrics_path=tmp_path / "a.csv")
    b = train(fresh(10), Adam(), ds, _settings(3), metrics_path=tmp_path / "b.csv")
    assert a == b
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
