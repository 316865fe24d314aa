import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from latent_twins import twin as tw
from latent_twins.datasets import NormStats, normalize, sample_pairs_ode
from latent_twins.numkit import RngStream
from latent_twins.odelab import get_system, integrate, linear_system
from latent_twins.structured import StructuredMap

from conftest import central_fd, rel_err

HARM = get_system("harmonic")
REF = integrate(HARM, HARM.x0, *HARM.t_span)


@pytest.fixture(scope="module")
def small_ds():
    return sample_pairs_ode(HARM, 512, seed=0, reference=REF)


def _mlp_arch(**kw):
    return tw.TwinArch("mlp", n_z=3, encoder_hidden=(8,), encoder_activation="tanh", map_widths=(8,),
                       map_activation="tanh", **kw)


def test_ode_arch_shapes_and_param_count(small_ds):
    m = tw.build_twin(2, tw.ode_arch(), small_ds.norm)
    assert m.mode == "identity-ae" and m.n_z == 2
    assert [l.n_out for l in m.latent.layers] == [16, 8, 4, 2]
    assert [l.activation for l in m.latent.layers] == ["softmax"] * 3 + ["identity"]
    # (4*16+16) + (16*8+8) + (8*4+4) + (4*2+2) with biases on every layer
    assert m.n_params() == 262
    m3 = tw.build_twin(3, tw.ode_arch(), NormStats.identity(3))
    assert m3.n_params() == 283


def test_swe_arch_is_single_affine_map():
    m = tw.build_twin(48, tw.swe_arch((32, 16), 8), NormStats.identity(48))
    assert len(m.latent.layers) == 1 and m.latent.layers[0].activation == "identity"
    assert (m.encoder.n_in, m.encoder.n_out) == (48, 8)
    assert [l.activation for l in m.encoder.layers] == ["relu", "relu", "identity"]


def test_model_validation():
    net = tw.build_twin(2, tw.ode_arch(), NormStats.identity(2)).latent
    with pytest.raises(ValueError):
        tw.TwinModel(2, 2, "mlp", net, NormStats.identity(2))
    with pytest.raises(ValueError):
        tw.TwinModel(3, 3, "identity-ae", net, NormStats.identity(3))
    with pytest.raises(ValueError):
        tw.TwinArch("koopman")


def test_residual_identity_at_initialisation():
    m = tw.build_twin(2, tw.ode_arch(residual=True), NormStats.identity(2))
    x = np.array([[0.3, -1.2], [2.0, 0.5]])
    assert np.array_equal(tw.twin_evaluate(m, x, [1.0, 2.0], [1.0, 2.0]), x)


def test_identity_ae_reduces_to_latent_map(small_ds):
    m = tw.build_twin(2, tw.ode_arch(), small_ds.norm, seed=3)
    nds = normalize(small_ds)
    t1, x1, t2, _ = nds.subset("test")
    direct = m.norm.norm_x(tw.twin_evaluate(m, m.norm.denorm_x(x1), m.norm.denorm_t(t1), m.norm.denorm_t(t2)))
    assert rel_err(direct, m.latent_step(x1, t1, t2)) < 1e-12


def test_joint_loss_gradient_matches_fd(small_ds):
    m = tw.build_twin(2, _mlp_arch(), small_ds.norm, seed=1)
    nds = normalize(small_ds)
    t1, x1, t2, x2 = (a[:16] for a in nds.subset("train"))
    cfg = tw.TrainConfig(w_rec=0.7, w_pred=1.3)
    _, _, _, grads = tw._batch_loss(m, x1, t1, t2, x2, cfg)
    params = [p for net in m.networks for p in net.params()]
    for p, g in zip(params, grads):
        def f(v, p=p):
            old = p.copy()
            p[...] = v
            out = tw._batch_loss(m, x1, t1, t2, x2, cfg, grad=False)[0]
            p[...] = old
            return out
        assert rel_err(g, central_fd(f, p.copy())) < 1e-5


def test_identity_mode_reconstruction_is_zero_every_epoch(small_ds):
    _, hist = tw.train_twin(small_ds, tw.ode_arch(), tw.TrainConfig(epochs=3, batch_size=64))
    assert all(h["test_rec_mse"] == 0.0 for h in hist)


def test_batch_count_audit(small_ds):
    n_train = len(small_ds.train_idx)
    _, hist = tw.train_twin(small_ds, tw.ode_arch(), tw.TrainConfig(epochs=4, batch_size=100))
    assert sum(h["batches"] for h in hist) == 4 * int(np.ceil(n_train / 100))


def test_plain_autoencoder_when_prediction_weight_is_zero(small_ds):
    _, hist = tw.train_twin(small_ds, _mlp_arch(), tw.TrainConfig(epochs=30, batch_size=64, lr=1e-2, w_pred=0.0))
    assert hist[-1]["test_rec_mse"] < hist[0]["test_rec_mse"]


def test_training_is_deterministic_and_loss_decreases(small_ds):
    cfg = tw.TrainConfig(epochs=15, batch_size=64, lr=1e-2)
    m1, h1 = tw.train_twin(small_ds, tw.ode_arch(), cfg)
    m2, h2 = tw.train_twin(small_ds, tw.ode_arch(), cfg)
    assert [h["train_loss"] for h in h1] == [h["train_loss"] for h in h2]
    assert h1[-1]["train_loss"] < h1[0]["train_loss"]
    assert all(np.isfinite(h["train_loss"]) for h in h1)


def test_restart_screening_keeps_lowest_training_loss(small_ds):
    cfg = tw.TrainConfig(epochs=6, batch_size=128, restarts=3, screen_epochs=3)
    _, hist = tw.train_twin(small_ds, tw.ode_arch(), cfg)
    assert len(hist) == 6
    screened = []
    for k in range(3):
        _, h = tw.train_twin(small_ds, tw.ode_arch(), tw.TrainConfig(epochs=3, batch_size=128, seed=k))
        screened.append(h[-1]["train_loss"])
    assert hist[2]["train_loss"] == min(screened)


def test_config_validation():
    with pytest.raises(ValueError):
        tw.TrainConfig(w_rec=0.0, w_pred=0.0)
    with pytest.raises(ValueError):
        tw.TrainConfig(w_rec=-1.0)
    with pytest.raises(ValueError):
        tw.train_twin(None, tw.TwinArch("structured"), tw.TrainConfig())


def test_linear_system_twin_learns_known_flow():
    # for x' = a x the exact flow in normalized coordinates is affine in x1 for fixed times;
    # a residual identity-AE twin must drive the prediction MSE well below its initial value
    sys_ = linear_system(np.array([[-0.5]]), (1.0,), (0.0, 2.0))
    ds = sample_pairs_ode(sys_, 1024, seed=0)
    arch = tw.TwinArch("identity-ae", map_widths=(16,), map_activation="tanh", residual=True)
    _, hist = tw.train_twin(ds, arch, tw.TrainConfig(epochs=60, batch_size=64, lr=1e-2))
    assert hist[-1]["test_pred_mse"] < 1e-2 * hist[0]["test_pred_mse"]


@given(st.floats(0, 10), st.floats(0, 10))
def test_backward_queries_are_accepted(t1, t2):
    m = _TRAINED
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = tw.twin_evaluate(m, np.array([0.2, 0.4]), t1, t2)
    assert out.shape == (2,) and np.all(np.isfinite(out))


_TRAINED = tw.build_twin(2, tw.ode_arch(), sample_pairs_ode(HARM, 256, reference=REF).norm)
_TRAINED.t_range = (0.0, 10.0)


def test_outside_interval_warns_and_bad_input():
    with pytest.warns(RuntimeWarning):
        tw.twin_evaluate(_TRAINED, np.zeros(2), 0.0, 12.0)
    with pytest.raises(ValueError):
        tw.twin_evaluate(_TRAINED, np.zeros(3), 0.0, 1.0)
    with pytest.raises(ValueError):
        tw.twin_evaluate(_TRAINED, np.array([np.nan, 0.0]), 0.0, 1.0)


def test_rollout_basics():
    tr = tw.twin_rollout(_TRAINED, np.array([1.0, 0.0]), 0.0, 0.5, 0)
    assert len(tr.times) == 1 and np.array_equal(tr.states[0], [1.0, 0.0])
    tr = tw.twin_rollout(_TRAINED, np.array([1.0, 0.0]), 0.0, 0.5, 4)
    assert np.allclose(tr.times, [0, 0.5, 1.0, 1.5, 2.0])
    step1 = tw.twin_evaluate(_TRAINED, tr.states[1], 0.5, 1.0)
    assert np.array_equal(step1, tr.states[2])
    with pytest.raises(ValueError):
        tw.twin_rollout(_TRAINED, np.zeros(2), 0.0, 0.0, 3)


def test_horizon_profile_anchor_and_slope():
    prof = tw.horizon_error_profile(_TRAINED, REF, 0.0, 0.05, 20)
    assert prof.gap[0] == 0.0 and len(prof.t2) == 21
    # the rollout starts from the true state; direct evaluation at zero gap goes through the map
    assert prof.rollout_err[0] == 0.0
    x0 = REF.at(0.0)
    assert prof.direct_err[0] == np.linalg.norm(tw.twin_evaluate(_TRAINED, x0, 0.0, 0.0) - x0)
    # with a residual (identity-at-start) map the zero-gap error is the autoencoder error, 0 here
    res = tw.build_twin(2, tw.ode_arch(residual=True), _TRAINED.norm)
    assert tw.horizon_error_profile(res, REF, 0.0, 0.05, 3).direct_err[0] == 0.0
    g = np.linspace(0, 1, 11)
    assert abs(tw.log_error_slope(g, np.exp(3 * g)) - 3.0) < 1e-12


def test_error_budget_bound_holds_for_untrained_model(small_ds):
    m = tw.build_twin(2, _mlp_arch(), small_ds.norm, seed=2)
    rep = tw.diagnose_error_budget(m, small_ds, lipschitz_flow=0.1)
    assert rep.eps_ae > 0 and rep.eps_map > 0 and rep.lipschitz_decoder > 0
    assert rep.holds and rep.max_error <= rep.bound
    ident = tw.build_twin(2, tw.ode_arch(), small_ds.norm)
    rep2 = tw.diagnose_error_budget(ident, small_ds)
    assert rep2.eps_ae == 0.0 and rep2.lipschitz_decoder == 1.0
    assert abs(rep2.bound - rep2.eps_map) < 1e-15


def test_flow_lipschitz_of_linear_flow():
    a = 0.3
    prop = lambda x, t1, t2: np.exp(a * (t2 - t1)) * x
    rng = RngStream(0)
    xs = rng.gaussian(0, 1, (20, 2))
    t1 = rng.uniform(0, 1, 20)
    t2 = t1 + rng.uniform(0.1, 1, 20)
    assert abs(tw.estimate_flow_lipschitz(prop, xs, t1, t2) - a) < 1e-6


def test_checkpoint_roundtrip_bitwise(tmp_path, small_ds):
    for arch in (tw.ode_arch(), _mlp_arch(residual=True)):
        m = tw.build_twin(2, arch, small_ds.norm, seed=4)
        m.t_range = (0.0, 10.0)
        tw.save_twin(tmp_path / "m.lttw", m)
        back = tw.load_twin(tmp_path / "m.lttw")
        x = REF.at(np.linspace(0, 10, 7))
        t2 = np.linspace(10, 0, 7)
        assert np.array_equal(tw.twin_evaluate(back, x, np.zeros(7), t2), tw.twin_evaluate(m, x, np.zeros(7), t2))
        assert back.mode == m.mode and back.residual == m.residual and back.t_range == m.t_range
    s = tw.TwinModel(2, 2, "structured", StructuredMap.full_state(2, np.array([[0, 1.0], [-4, 0]])), NormStats.identity(2))
    tw.save_twin(tmp_path / "s.lttw", s)
    assert np.array_equal(tw.load_twin(tmp_path / "s.lttw").latent.generator, s.latent.generator)
    assert (tmp_path / "s.lttw").read_bytes()[:4] == b"LTTW"


def test_metrics_csv(tmp_path, small_ds):
    _, hist = tw.train_twin(small_ds, tw.ode_arch(), tw.TrainConfig(epochs=2, batch_size=128))
    tw.write_metrics_csv(tmp_path / "m.csv", hist)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_rec_mse,test_pred_mse,lr" and len(lines) == 3
