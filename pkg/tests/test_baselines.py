from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from latent_twins import baselines as bl
from latent_twins.datasets import NormStats
from latent_twins.swe import SweConfig

from conftest import central_fd, rel_err


def _param_fd(loss_fn, arr, eps=1e-6):
    """FD gradient of ``loss_fn()`` w.r.t. an array that is perturbed in place."""
    def f(x):
        saved = arr.copy()
        arr[...] = x
        val = loss_fn()
        arr[...] = saved
        return val
    return central_fd(f, arr.copy(), eps)


# ---------------------------------------------------------------------------
# LSTM

@pytest.mark.parametrize("n_x,h,expected", [(2, 10, 542), (3, 12, 807)])
def test_lstm_param_counts(n_x, h, expected):
    assert bl.lstm_param_count(n_x, h) == expected
    assert bl.lstm_init(n_x, h).n_params() == expected


def test_lstm_forget_bias_starts_near_one():
    m = bl.lstm_init(2, 10, seed=3)
    k = 1 / np.sqrt(10)
    assert np.all(np.abs(m.b[10:20] - 1.0) <= k)
    assert np.all(np.abs(m.b[:10]) <= k)


def test_lstm_backward_matches_fd():
    m = bl.lstm_init(2, 4, seed=1, window=5)
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(3, 5, 2))
    ys = rng.normal(size=(3, 2))

    def loss():
        y, _ = bl.lstm_forward(m, xs)
        return float(np.mean((y - ys) ** 2))

    y, cache = bl.lstm_forward(m, xs)
    dy = 2 * (y - ys) / y.size
    grads = bl.lstm_backward(m, cache, dy)
    for p, g in zip(m.params(), grads):
        assert rel_err(g, _param_fd(loss, p)) < 1e-6


@given(k=st.integers(11, 40), w=st.integers(1, 10))
def test_make_windows_alignment(k, w):
    s = np.arange(2 * k, dtype=float).reshape(k, 2)
    xs, ys = bl.make_windows(s, w)
    assert xs.shape == (k - w, w, 2) and ys.shape == (k - w, 2)
    np.testing.assert_array_equal(xs[:, -1] + 2, ys)
    np.testing.assert_array_equal(xs[0], s[:w])


def test_make_windows_rejects_short_sequence():
    with pytest.raises(ValueError):
        bl.make_windows(np.zeros((5, 2)), 5)


def test_lstm_rollout_shape_times_and_errors():
    m = bl.lstm_init(2, 4, seed=0, window=3)
    seed = np.ones((3, 2))
    truth = np.zeros((6, 2))
    traj, err = bl.lstm_rollout(m, seed, 6, t0=1.0, dt=0.5, truth=truth)
    assert traj.states.shape == (6, 2)
    np.testing.assert_allclose(traj.times, 1.0 + (3 + np.arange(6)) * 0.5)
    np.testing.assert_allclose(err, np.linalg.norm(traj.states, axis=1))
    with pytest.raises(ValueError):
        bl.lstm_rollout(m, np.ones((4, 2)), 2)


def test_lstm_learns_linear_recurrence():
    t = np.arange(300) * 0.1
    states = np.column_stack([np.cos(t), -np.sin(t)])
    m, hist = bl.lstm_train(states, bl.LstmConfig(hidden=8, epochs=40, lr=1e-2, seed=0))
    assert hist[-1]["train_mse"] < 0.1 * hist[0]["train_mse"]
    assert np.isfinite(hist[-1]["val_mse"])
    pred = bl.lstm_predict(m, states[100:110])
    assert np.linalg.norm(pred - states[110]) < 0.1


def test_lstm_training_is_deterministic():
    states = np.random.default_rng(2).normal(size=(60, 2)).cumsum(axis=0)
    cfg = bl.LstmConfig(hidden=4, epochs=3, seed=5)
    a, _ = bl.lstm_train(states, cfg)
    b, _ = bl.lstm_train(states, cfg)
    for p, q in zip(a.params(), b.params()):
        np.testing.assert_array_equal(p, q)


# ---------------------------------------------------------------------------
# DeepONet

def _small_don(seed=0, n=8):
    norm = NormStats(np.zeros(3 * n * n), np.ones(3 * n * n))
    return bl.deeponet_init(3 * n * n, (n, n), norm, seed, branch_hidden=(6,), trunk_hidden=(5,), p=4)


def test_deeponet_default_shapes():
    n = 32
    norm = NormStats(np.zeros(3 * n * n), np.ones(3 * n * n))
    m = bl.deeponet_init(3 * n * n, (n, n), norm)
    assert [m.branch.n_in] + [l.n_out for l in m.branch.layers] == [3072, 512, 512, 256, 128]
    assert [m.trunk.n_in] + [l.n_out for l in m.trunk.layers] == [3, 64, 128, 128]
    assert m.heads.shape == (3, 128)
    out = bl.deeponet_evaluate(m, np.zeros(3 * n * n), np.array([[0.0, 0.0, 100.0], [1e5, -2e5, 3e4]]))
    assert out.shape == (2, 3) and np.all(np.isfinite(out))


def test_deeponet_rejects_mismatched_widths():
    m = _small_don()
    with pytest.raises(ValueError):
        bl.DeepOnetModel(m.branch, m.trunk, np.zeros((3, 5)), m.norm)


def test_deeponet_loss_gradient_matches_fd():
    m = _small_don(seed=2)
    rng = np.random.default_rng(1)
    x0s = rng.normal(size=(2, 192))
    qs = rng.uniform(-1, 1, size=(7, 3))
    target = rng.normal(size=(2, 7, 3))
    _, grads = bl.deeponet_loss(m, x0s, qs, target)
    params = m.branch.params() + m.trunk.params() + [m.heads]
    assert len(grads) == len(params)

    def loss():
        return bl.deeponet_loss(m, x0s, qs, target)[0]

    for p, g in zip(params, grads):
        assert rel_err(g, _param_fd(loss, p)) < 1e-5


def test_deeponet_evaluate_warns_outside_domain():
    m = _small_don()
    with pytest.warns(RuntimeWarning):
        bl.deeponet_evaluate(m, np.zeros(192), np.array([[0.0, 0.0, 2 * m.t_max]]))


def _toy_trajectories(n_traj=8, n=8, k=6):
    """Synthetic field sequences: eta decays at a fixed rate from a random amplitude."""
    cfg = SweConfig(nx=n, ny=n, dt=50.0, steps=k - 1)
    times = np.arange(k) * cfg.dt
    xx, yy = np.meshgrid(cfg.xc, cfg.yc)
    shape = np.exp(-(xx ** 2 + yy ** 2) / (2 * 2e5 ** 2))
    rng = np.random.default_rng(0)
    out = []
    for _ in range(n_traj):
        a = rng.uniform(0.5, 1.5)
        fields = np.zeros((k, 3, n, n))
        fields[:, 0] = a * np.exp(-times / times[-1])[:, None, None] * shape
        fields[:, 1] = 0.1 * a * shape
        out.append(SimpleNamespace(fields=fields, times=times, cfg=cfg))
    flat = np.concatenate([t.fields.reshape(k, -1) for t in out])
    norm = NormStats(flat.mean(axis=0), np.where(flat.std(axis=0) > 0, flat.std(axis=0), 1.0))
    return out, norm


def test_deeponet_training_reduces_loss_and_field_shape():
    trajs, norm = _toy_trajectories()
    cfg = bl.DeepOnetConfig(epochs=50, batch_size=4, n_query=200, lr=1e-3, seed=0)
    model = bl.deeponet_init(192, (8, 8), norm, 0, branch_hidden=(32,), trunk_hidden=(16,), p=16,
                             t_max=float(trajs[0].times[-1]))
    model, hist, (tr, te) = bl.deeponet_train(trajs, norm, cfg, model=model)
    assert hist[-1]["train_mse"] < 0.5 * hist[0]["train_mse"]
    assert len(tr) + len(te) == len(trajs)
    cfg_sw = trajs[0].cfg
    f = bl.deeponet_field(model, trajs[0].fields[0].reshape(-1), cfg_sw.xc, cfg_sw.yc, 100.0)
    assert f.shape == (3, 8, 8)


def test_deeponet_train_rejects_empty():
    with pytest.raises(ValueError):
        bl.deeponet_train([], NormStats(np.zeros(1), np.ones(1)), bl.DeepOnetConfig())


# ---------------------------------------------------------------------------
# checkpoints

def test_lstm_checkpoint_roundtrip(tmp_path):
    m = bl.lstm_init(3, 5, seed=4, window=7)
    m.norm = NormStats(np.arange(3.0), np.ones(3) * 2)
    p = tmp_path / "m.ltbl"
    bl.save_baseline(p, m)
    r = bl.load_baseline(p)
    assert isinstance(r, bl.LstmModel) and r.window == 7
    for a, b in zip(m.params(), r.params()):
        np.testing.assert_array_equal(a, b)
    w = np.random.default_rng(0).normal(size=(7, 3))
    np.testing.assert_array_equal(bl.lstm_predict(m, w), bl.lstm_predict(r, w))


def test_deeponet_checkpoint_roundtrip(tmp_path):
    m = _small_don(seed=6)
    p = tmp_path / "d.ltbl"
    bl.save_baseline(p, m)
    r = bl.load_baseline(p)
    assert isinstance(r, bl.DeepOnetModel) and r.grid == (8, 8)
    q = np.array([[1e4, 2e4, 500.0]])
    x0 = np.random.default_rng(0).normal(size=192)
    np.testing.assert_array_equal(bl.deeponet_evaluate(m, x0, q), bl.deeponet_evaluate(r, x0, q))


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.ltbl"
    p.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        bl.load_baseline(p)
    bl.save_baseline(p, bl.lstm_init(2, 3))
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(ValueError):
        bl.load_baseline(p)
