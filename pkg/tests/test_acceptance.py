"""End-to-end acceptance checks.

Each test records one PASS/FAIL line (repeated in the terminal summary) before
asserting, so a full run lists every criterion even when some fail.  Training
runs are shared through module fixtures; the full file takes roughly an hour on
one core, most of it the shallow-water twin.
"""

import time

import numpy as np
import pytest

from latent_twins import assimilate as da
from latent_twins import autodiff as ad
from latent_twins import baselines as bl
from latent_twins import cli
from latent_twins import experiments as ex
from latent_twins import numkit as nk
from latent_twins import structured as sm
from latent_twins import swe
from latent_twins import twin as tw
from latent_twins.datasets import NormStats, normalize, sample_pairs_ode
from latent_twins.numkit import RngStream
from latent_twins.odelab import get_system

from conftest import central_fd, rel_err

pytestmark = pytest.mark.slow

SEED = 0


def _param_fd(loss, p):
    def f(v):
        old = p.copy()
        p[...] = v
        out = loss()
        p[...] = old
        return out
    return central_fd(f, p.copy())


# ---------------------------------------------------------------------------
# shared runs

@pytest.fixture(scope="module")
def structured_run():
    return ex.run_structured_harmonic(SEED)


@pytest.fixture(scope="module")
def ode_runs():
    out = {}
    for name in ("harmonic", "sir", "lotka-volterra", "lorenz63"):
        out[name] = ex.run_ode_twin(name, SEED)
    return out


@pytest.fixture(scope="module")
def swe_run():
    t0 = time.perf_counter()
    setup = ex.swe_setup(grid=32, n_traj=ex.SWE_TRAJECTORIES, n_pairs=ex.SWE_PAIRS, seed=SEED)
    res = ex.run_swe_twin(setup, ex.SWE_EPOCHS, SEED)
    return setup, res, time.perf_counter() - t0


def _assimilate(model, traj, factor):
    inf = ex.swe_inference(model, traj, factor, seed=SEED)
    var = ex.swe_fourdvar(model.norm, traj, inf.obs, max_iters=100)
    return inf, var


@pytest.fixture(scope="module")
def swe_assimilation(swe_run):
    """Inference and 4D-Var on a pool trajectory at snapshots no training pair contains,
    plus the same on the fully held-out trajectory (reported, not asserted)."""
    setup, res, _ = swe_run
    factor = setup.cfg.nx // 8
    pool = _assimilate(res.model, setup.trajectories[ex.evaluation_trajectory(setup)], factor)
    held = _assimilate(res.model, setup.trajectories[setup.test_ids[0]], factor)
    return pool, held


# ---------------------------------------------------------------------------
# ODE criteria

def test_c01_structured_harmonic(structured_run, criterion):
    r = structured_run
    ok = r.w_error <= 1e-3 and r.max_traj_error <= 1e-3 and r.seconds < 120
    assert criterion(1, ok, f"|W-M|_F={r.w_error:.2e} max traj err={r.max_traj_error:.2e} time={r.seconds:.0f}s")


def test_c02_ode_twin_mse(ode_runs, criterion):
    bands = {"harmonic": (5e-5, 5e-3), "sir": (0.0, 1e-6), "lotka-volterra": (0.7, 70.0), "lorenz63": (5.0, 540.0)}
    total = sum(r.seconds for r in ode_runs.values())
    parts, ok = [], total < 1800
    for name, (lo, hi) in bands.items():
        d = ode_runs[name].direct_mse
        ok &= lo <= d <= hi
        parts.append(f"{name}={d:.3g}")
    assert criterion(2, ok, " ".join(parts) + f" time={total:.0f}s")


def test_c03_direct_vs_recursive(ode_runs, criterion):
    h, s = ode_runs["harmonic"], ode_runs["sir"]
    ok = h.rollout_mse >= h.direct_mse and s.rollout_mse >= s.direct_mse
    assert criterion(3, ok, f"harmonic rec {h.rollout_mse:.4g} vs dir {h.direct_mse:.4g}; "
                            f"sir rec {s.rollout_mse:.4g} vs dir {s.direct_mse:.4g}")


def test_c04_horizon_uniformity(ode_runs, criterion):
    twin_slope = ode_runs["harmonic"].profile.slope("direct")
    lstm = ex.run_lstm("harmonic", SEED)
    ok = lstm.slope > 0 and twin_slope <= lstm.slope
    assert criterion(4, ok, f"twin slope={twin_slope:.4f} lstm slope={lstm.slope:.4f}")


def test_c05_error_budget(criterion):
    run = ex.budget_twin(SEED)
    b = ex.error_budget(run.model, run.ds, "harmonic", seed=SEED)
    assert criterion(5, b.holds, f"max err={b.max_error:.3g} bound={b.bound:.3g} "
                                 f"(eps_ae={b.eps_ae:.2g} eps_map={b.eps_map:.2g} L_G={b.lipschitz_flow:.2g})")


def test_c06_perturbation_bound(structured_run, criterion):
    ref = structured_run.truth
    chk = ex.perturbation_check(structured_run.smap.generator, ex.HARMONIC_M, ref[::50])
    worst = float(np.max(chk.measured / chk.bounds))
    assert criterion(6, chk.holds, f"max measured/bound ratio={worst:.3g} over H={chk.horizons.tolist()}")


def test_c07_pod_equivalence(criterion):
    chk = ex.pod_equivalence(SEED)
    assert criterion(7, chk.max_diff < 1e-8, f"max |exp map - Galerkin ROM|={chk.max_diff:.2e}")


# ---------------------------------------------------------------------------
# numerical hygiene

def _hygiene() -> dict[str, float]:
    rng = np.random.default_rng(SEED)
    errs: dict[str, float] = {}

    # dense networks, every activation
    for act in ("identity", "relu", "tanh", "softmax"):
        net = ad.Mlp.build([3, 5, 4, 2], [act, "tanh", "identity"], RngStream(1), init="fan-in")
        x = rng.standard_normal((6, 3))
        target = rng.standard_normal((6, 2))
        y, tape = ad.forward(net, x)
        _, dy = ad.mse_loss(y, target)
        grads, dx = ad.backward(net, tape, dy)
        e = max(rel_err(g, _param_fd(lambda: ad.mse_loss(net(x), target)[0], p)) for p, g in zip(net.params(), grads))
        e = max(e, rel_err(dx, central_fd(lambda v: ad.mse_loss(net(v), target)[0], x)))
        errs[f"mlp-{act}"] = e

    # twin joint loss
    harm = get_system("harmonic")
    ds = sample_pairs_ode(harm, 256, seed=SEED)
    arch = tw.TwinArch("mlp", n_z=3, encoder_hidden=(8,), encoder_activation="tanh", map_widths=(8,),
                       map_activation="tanh")
    m = tw.build_twin(2, arch, ds.norm, seed=1)
    t1, x1, t2, x2 = (a[:16] for a in normalize(ds).subset("train"))
    cfg = tw.TrainConfig(w_rec=0.7, w_pred=1.3)
    grads = tw._batch_loss(m, x1, t1, t2, x2, cfg)[3]
    params = [p for net in m.networks for p in net.params()]
    errs["twin-loss"] = max(rel_err(g, _param_fd(lambda: tw._batch_loss(m, x1, t1, t2, x2, cfg, grad=False)[0], p))
                            for p, g in zip(params, grads))

    # structured map: generator gradient runs through the Frechet derivative
    smap = sm.StructuredMap.full_state(3, rng.standard_normal((3, 3)))
    a1, a2 = rng.standard_normal((2, 6, 3))
    s1, s2 = rng.uniform(0, 1, (2, 6))
    _, g = sm.structured_loss(smap, a1, s1, s2, a2)
    errs["structured-loss"] = rel_err(g, _param_fd(lambda: sm.structured_loss(smap, a1, s1, s2, a2, need_grad=False)[0],
                                                   smap.generator))

    # Frechet derivative of expm
    a = rng.standard_normal((4, 4))
    e = rng.standard_normal((4, 4))
    h = 1e-6
    fd = (nk.expm(a + h * e) - nk.expm(a - h * e)) / (2 * h)
    errs["expm-frechet"] = rel_err(nk.expm_frechet(a, e), fd)

    # baselines
    lm = bl.lstm_init(2, 4, seed=1, window=5)
    xs, ys = rng.standard_normal((3, 5, 2)), rng.standard_normal((3, 2))
    y, cache = bl.lstm_forward(lm, xs)
    lg = bl.lstm_backward(lm, cache, 2 * (y - ys) / y.size)
    errs["lstm"] = max(rel_err(g, _param_fd(lambda: float(np.mean((bl.lstm_forward(lm, xs)[0] - ys) ** 2)), p))
                       for p, g in zip(lm.params(), lg))
    don = bl.deeponet_init(192, (8, 8), NormStats(np.zeros(192), np.ones(192)), 2, branch_hidden=(6,),
                           trunk_hidden=(5,), p=4)
    b0, q0, tg = rng.standard_normal((2, 192)), rng.uniform(-1, 1, (7, 3)), rng.standard_normal((2, 7, 3))
    dg = bl.deeponet_loss(don, b0, q0, tg)[1]
    dparams = don.branch.params() + don.trunk.params() + [don.heads]
    errs["deeponet"] = max(rel_err(g, _param_fd(lambda: bl.deeponet_loss(don, b0, q0, tg)[0], p))
                           for p, g in zip(dparams, dg))

    # 4D-Var gradient, componentwise on a small grid
    cfg8 = swe.SweConfig(nx=8, ny=8, steps=5)
    n8 = NormStats(np.zeros(192), np.ones(192), 0.0, 1.0)
    x0 = swe.gaussian_init(cfg8, center=(0.0, 0.0)).as_array() * 0.1
    ob = da.observe(da.ObsOperator(2, 0.01, 0), swe.propagate(x0, cfg8, 3), n8)
    prob = da.VarProblem(cfg8, np.zeros(cfg8.shape), n8, [(3, ob)], sigma_b=0.5, lam=1.0)
    xi = 0.05 * RngStream(1).gaussian(0, 1, cfg8.shape)
    errs["4dvar"] = rel_err(da.fourdvar_gradient(prob, xi), central_fd(lambda v: da.fourdvar_cost(prob, v), xi))
    return errs


def _adjoint_identity() -> float:
    cfg = swe.SweConfig(nx=32, ny=32, steps=60)
    x = swe.simulate(cfg, seed=3).fields[-1]
    rng = np.random.default_rng(1)
    v, w = rng.standard_normal((2, *x.shape))
    traj = swe.propagate(x, cfg, 100, keep=True)
    d = v
    for k in range(100):
        _, d = swe.tlm_step(traj[k], d, cfg)
    lam = w
    for k in reversed(range(100)):
        lam = swe.adjoint_step(traj[k], lam, cfg)
    a, b = np.sum(d * w), np.sum(v * lam)
    return float(abs(a - b) / abs(a))


def test_c08_numerical_hygiene(criterion):
    errs = _hygiene()
    adj = _adjoint_identity()
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-5 and adj < 1e-10
    assert criterion(8, ok, f"worst FD rel err {errs[worst]:.1e} ({worst}); adjoint identity {adj:.1e}")


# ---------------------------------------------------------------------------
# shallow water

def test_c09_swe_physics(criterion):
    cfg = swe.SweConfig(nx=32, ny=32)
    run = swe.simulate(cfg, seed=3)
    mass = np.array([swe.total_mass(f) for f in run.fields])
    drift = float(np.max(np.abs(mass - mass[0])) / abs(mass[0]))
    again = swe.simulate(cfg, seed=3)
    deterministic = run.fields.tobytes() == again.fields.tobytes()

    # wave front of a centred bump without rotation, tracked along the middle row
    wcfg = swe.SweConfig(nx=128, ny=128, f0=0.0, beta=0.0, dt=25.5, steps=400)
    tr = swe.simulate(wcfg, init=swe.gaussian_init(wcfg, center=(0.0, 0.0)))
    pos = []
    for k in (200, 400):
        row = tr.fields[k][0][64]
        j = int(np.argmax(row[64:])) + 64
        y0, y1, y2 = row[j - 1], row[j], row[j + 1]
        pos.append(wcfg.xc[j] + 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2) * wcfg.dx)
    speed = (pos[1] - pos[0]) / (tr.times[400] - tr.times[200])
    c = np.sqrt(wcfg.g * wcfg.depth)
    ok = drift < 1e-6 and abs(speed - c) / c < 0.05 and deterministic
    assert criterion(9, ok, f"mass drift={drift:.1e} wave speed={speed:.2f} m/s (sqrt(gH)={c:.2f}) "
                            f"deterministic={deterministic}")


def test_c10_swe_twin(swe_run, criterion):
    _, res, seconds = swe_run
    ok = res.rel_rec < 0.10 and res.rel_pred < 0.15 and seconds < 1800
    assert criterion(10, ok, f"rel rec={res.rel_rec:.4f} rel pred={res.rel_pred:.4f} time={seconds:.0f}s")


def test_c11_observation_inference(swe_assimilation, criterion):
    (inf, _), (hinf, _) = swe_assimilation
    ok = inf.err_twin_t1 < inf.err_bilinear_t1 and inf.err_twin_t2 < inf.err_bilinear_t2
    assert criterion(11, ok, f"t1: twin {inf.err_twin_t1:.3f} vs bilinear {inf.err_bilinear_t1:.3f}; "
                             f"t2: twin {inf.err_twin_t2:.3f} vs bilinear {inf.err_bilinear_t2:.3f} "
                             f"[held-out trajectory t1: {hinf.err_twin_t1:.3f} vs {hinf.err_bilinear_t1:.3f}, "
                             f"t2: {hinf.err_twin_t2:.3f} vs {hinf.err_bilinear_t2:.3f}]")


def test_c12_twin_vs_fourdvar(swe_assimilation, criterion):
    (inf, var), (hinf, hvar) = swe_assimilation
    ok = (inf.err_twin_t2 < var.err_forecast_t2 and np.isfinite(var.err_analysis_t1)
          and var.err_analysis_t1 < var.err_background_t1)
    assert criterion(12, ok, f"t2: twin {inf.err_twin_t2:.3f} vs 4D-Var {var.err_forecast_t2:.3f}; "
                             f"4D-Var analysis {var.err_analysis_t1:.3f} vs background {var.err_background_t1:.3f} "
                             f"[held-out trajectory t2: twin {hinf.err_twin_t2:.3f} vs 4D-Var {hvar.err_forecast_t2:.3f}]")


def test_c13_twin_vs_deeponet(swe_run, criterion):
    setup, res, _ = swe_run
    don, _ = ex.run_deeponet(setup, SEED, norm=res.model.norm)
    rows = ex.twin_vs_deeponet(res.model, don, setup.trajectories[ex.evaluation_trajectory(setup)])
    held = ex.twin_vs_deeponet(res.model, don, setup.trajectories[setup.test_ids[0]])
    ok = all(twin < dn for _, twin, dn in rows)
    worst = max(rows, key=lambda r: r[1] - r[2])
    wins = sum(twin < dn for _, twin, dn in held)
    assert criterion(13, ok, f"{len(rows)} times; closest: t={worst[0]:.0f}s twin {worst[1]:.3f} vs "
                             f"DeepONet {worst[2]:.3f} [held-out trajectory: twin lower at {wins}/{len(held)} times]")


# ---------------------------------------------------------------------------
# reproducibility

REPRO_COMMANDS = [
    ["simulate", "--system", "lorenz63"],
    ["dataset", "--system", "sir", "--pairs", "512"],
    ["train", "--system", "harmonic", "--epochs", "5", "--pairs", "512"],
    ["train", "--system", "harmonic", "--mode", "structured", "--epochs", "2", "--pairs", "512"],
    ["train", "--system", "sir", "--baseline", "lstm", "--epochs", "3", "--samples", "200"],
    ["simulate", "--system", "swe", "--grid", "16"],
]


def test_c14_reproducibility(tmp_path, monkeypatch, capsys, criterion):
    monkeypatch.setenv("LT_RUN_DIR", str(tmp_path))
    mismatched, compared = [], 0
    for argv in REPRO_COMMANDS:
        dirs = []
        for _ in range(2):
            assert cli.main([*argv, "--seed", "3", "--deterministic", "--no-plots"]) == 0
            dirs.append(capsys.readouterr().out.strip().splitlines()[-1])
        a, b = (tmp_path / d for d in dirs)
        for f in sorted(a.iterdir()):
            compared += 1
            if f.read_bytes() != (b / f.name).read_bytes():
                mismatched.append(f"{argv[0]}:{f.name}")
    assert criterion(14, not mismatched, f"{compared} files over {len(REPRO_COMMANDS)} commands; "
                                         f"mismatched: {mismatched or 'none'}")
