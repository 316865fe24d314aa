"""Command-line interface.

Every invocation writes into a fresh directory under ``$LT_RUN_DIR`` (default
``./runs``) holding the resolved configuration, CSV metrics and, unless
``--no-plots`` is given, PNG figures rendered from those CSVs.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import assimilate as da
from . import baselines as bl
from . import datasets, experiments as ex, odelab, plotting, swe
from .structured import write_structured, StructuredConfig
from .twin import TwinArch, load_twin, save_twin, write_metrics_csv, write_profile_csv

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4

ODE_SYSTEMS = tuple(odelab.SYSTEMS)
SYSTEMS = ODE_SYSTEMS + ("swe",)
MODES = ("mlp", "structured", "identity-ae")
COMMANDS = ("simulate", "dataset", "train", "eval", "infer", "4dvar", "compare", "report")

# key -> (type, default).  Every key can come from --config or a long flag.
OPTIONS: dict[str, tuple[type, object]] = {
    "system": (str, "harmonic"),
    "seed": (int, 0),
    "epochs": (int, None),
    "pairs": (int, None),
    "gap_cap": (float, None),
    "mode": (str, "identity-ae"),
    "baseline": (str, None),
    "lr": (float, None),
    "batch_size": (int, None),
    "grid": (int, 32),
    "trajectories": (int, ex.SWE_TRAJECTORIES),
    "factor": (int, None),
    "samples": (int, None),
    "model": (str, None),
    "deeponet": (str, None),
    "trajectory": (str, None),
    "profile": (str, "horizon"),
    "methods": (str, "twin,4dvar"),
    "iters": (int, 100),
    "threads": (int, None),
    "deterministic": (bool, False),
    "run": (str, None),
    "plots": (bool, True),
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _convert(key: str, raw):
    typ = OPTIONS[key][0]
    if raw is None or isinstance(raw, typ):
        return raw
    if typ is bool:
        s = str(raw).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are an error."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _convert(key, val)
    return out


def resolve(args: argparse.Namespace) -> dict:
    cfg = {k: d for k, (_, d) in OPTIONS.items()}
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in OPTIONS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = _convert(key, val)
    cfg["command"] = args.command
    if cfg["system"] not in SYSTEMS:
        raise ConfigError(f"unknown system {cfg['system']!r}; choose from {', '.join(SYSTEMS)}")
    if cfg["mode"] not in MODES:
        raise ConfigError(f"unknown mode {cfg['mode']!r}; choose from {', '.join(MODES)}")
    if cfg["baseline"] not in (None, "lstm", "deeponet"):
        raise ConfigError("baseline must be lstm or deeponet")
    if cfg["grid"] < 4 or cfg["trajectories"] < 2:
        raise ConfigError("grid must be >= 4 and trajectories >= 2")
    if cfg["factor"] is None:
        cfg["factor"] = max(1, cfg["grid"] // 8)
    return cfg


def write_config(path, cfg: dict) -> None:
    with open(path, "w") as fp:
        for k in sorted(cfg):
            if cfg[k] is not None:
                fp.write(f"{k} = {cfg[k]}\n")


def fresh_run_dir(cfg: dict) -> Path:
    root = Path(os.environ.get("LT_RUN_DIR", "runs"))
    stem = f"{cfg['command']}-{cfg['system']}-s{cfg['seed']}"
    root.mkdir(parents=True, exist_ok=True)
    k = 0
    while (root / f"{stem}-{k:03d}").exists():
        k += 1
    out = root / f"{stem}-{k:03d}"
    out.mkdir()
    return out


# ---------------------------------------------------------------------------
# small io helpers

def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fp:
        rows = list(csv.reader(fp))
    return rows[0], rows[1:]


def write_summary(path, items: dict) -> None:
    write_rows(path, ["key", "value"], list(items.items()))


def _need(cfg, key):
    if cfg[key] is None:
        raise ConfigError(f"--{key.replace('_', '-')} is required for {cfg['command']}")
    return cfg[key]


def _swe_setup(cfg) -> ex.SweSetup:
    return ex.swe_setup(cfg["grid"], cfg["trajectories"], cfg["pairs"] or ex.SWE_PAIRS, cfg["seed"])


def _swe_truth(cfg, setup: ex.SweSetup | None = None) -> swe.FieldTrajectory:
    """Explicit ``--trajectory`` file, else the seeded setup's evaluation trajectory."""
    if cfg["trajectory"]:
        return swe.load_trajectory(cfg["trajectory"])
    setup = setup or _swe_setup(cfg)
    return setup.trajectories[ex.evaluation_trajectory(setup)]


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg, out: Path) -> None:
    if cfg["system"] == "swe":
        traj = swe.simulate(swe.SweConfig(nx=cfg["grid"], ny=cfg["grid"]), cfg["seed"])
        swe.save_trajectory(out / "trajectory.ltwt", traj)
        write_rows(out / "invariants.csv", ["t", "mass", "energy"],
                   [(t, swe.total_mass(x), swe.energy(x, traj.cfg)) for t, x in zip(traj.times, traj.fields)])
        return
    sys_ = odelab.get_system(cfg["system"])
    ref = odelab.integrate(sys_, sys_.x0, *sys_.t_span)
    times = np.linspace(*sys_.t_span, cfg["samples"] or 1001)
    odelab.write_trajectory_csv(out / "trajectory.csv", odelab.Trajectory(times, ref.at(times)))


def cmd_dataset(cfg, out: Path) -> None:
    if cfg["system"] == "swe":
        ds = _swe_setup(cfg).ds
    else:
        ds = datasets.sample_pairs_ode(odelab.get_system(cfg["system"]), cfg["pairs"] or ex.N_PAIRS,
                                       gap_cap=cfg["gap_cap"], seed=cfg["seed"])
    datasets.save(ds, out / "pairs.ltw1")
    write_summary(out / "summary.csv", {"n_x": ds.n_x, "pairs": len(ds.t1), "train": len(ds.train_idx),
                                        "test": len(ds.test_idx), "digest": datasets.digest(ds)})


def _train_kwargs(cfg) -> dict:
    kw = {}
    if cfg["lr"] is not None:
        kw["lr"] = cfg["lr"]
    if cfg["batch_size"] is not None:
        kw["batch_size"] = cfg["batch_size"]
    if cfg["deterministic"]:
        kw["deterministic"] = True
    return kw


def cmd_train(cfg, out: Path) -> None:
    system, seed = cfg["system"], cfg["seed"]
    if cfg["baseline"] == "lstm":
        if system == "swe":
            raise ConfigError("the LSTM baseline runs on the ODE systems")
        res = ex.run_lstm(system, seed, cfg["epochs"] or 1000, cfg["samples"] or 1000)
        bl.save_baseline(out / "lstm.ltbl", res.model)
        write_rows(out / "loss.csv", ["epoch", "train_mse", "val_mse"],
                   [(h["epoch"], h["train_mse"], h["val_mse"]) for h in res.history])
        write_rows(out / "rollout.csv", ["t", "horizon", "error"], zip(res.times[-len(res.errors):], res.horizon, res.errors))
        write_summary(out / "summary.csv", {"params": res.model.n_params(), "slope": res.slope,
                                            "final_error": float(res.errors[-1])})
        return
    if cfg["baseline"] == "deeponet":
        if system != "swe":
            raise ConfigError("the DeepONet baseline runs on the swe system")
        setup = _swe_setup(cfg)
        kw = {k: v for k, v in (("epochs", cfg["epochs"]), ("lr", cfg["lr"]), ("batch_size", cfg["batch_size"]))
              if v is not None}
        model, hist = ex.run_deeponet(setup, seed, **kw)
        bl.save_baseline(out / "deeponet.ltbl", model)
        write_rows(out / "loss.csv", ["epoch", "train_mse"], [(h["epoch"], h["train_mse"]) for h in hist])
        return
    if system == "swe":
        if cfg["mode"] == "structured":
            raise ConfigError("the structured map is available for the ODE systems only")
        setup = _swe_setup(cfg)
        res = ex.run_swe_twin(setup, cfg["epochs"] or ex.SWE_EPOCHS, seed, **_train_kwargs(cfg))
        save_twin(out / "twin.lttw", res.model)
        write_metrics_csv(out / "metrics.csv", res.history)
        write_summary(out / "summary.csv", {"params": res.model.n_params(), "test_rel_rec": res.rel_rec,
                                            "test_rel_pred": res.rel_pred})
        return
    if cfg["mode"] == "structured":
        if system != "harmonic":
            raise ConfigError("structured training with a known generator is set up for the harmonic system")
        sc = StructuredConfig(**{**ex.STRUCTURED_HARMONIC.__dict__, "seed": seed})
        if cfg["epochs"]:
            sc.epochs = cfg["epochs"]
        if cfg["lr"]:
            sc.lr = cfg["lr"]
        res = ex.run_structured_harmonic(seed, sc, cfg["pairs"] or ex.N_PAIRS)
        with open(out / "structured.ltsm", "wb") as fp:
            write_structured(fp, res.smap)
        write_rows(out / "loss.csv", ["epoch", "train_loss", "lr"],
                   [(h["epoch"], h["train_loss"], h["lr"]) for h in res.history])
        odelab.write_trajectory_csv(out / "prediction.csv", odelab.Trajectory(res.times, res.pred))
        odelab.write_trajectory_csv(out / "reference.csv", odelab.Trajectory(res.times, res.truth))
        write_summary(out / "summary.csv", {"w_frobenius_error": res.w_error, "max_traj_error": res.max_traj_error})
        return
    arch = None
    if cfg["mode"] == "mlp":
        arch = TwinArch("mlp", n_z=odelab.get_system(system).dim + 2, encoder_hidden=(16,), encoder_activation="tanh",
                        map_widths=(32,), map_activation="tanh")
    res = ex.run_ode_twin(system, seed, cfg["epochs"] or 1000, cfg["pairs"] or ex.N_PAIRS, cfg["gap_cap"], arch=arch,
                          **_train_kwargs(cfg))
    save_twin(out / "twin.lttw", res.model)
    write_metrics_csv(out / "metrics.csv", res.history)
    write_profile_csv(out / "profile.csv", res.profile)
    write_summary(out / "summary.csv", {"params": res.model.n_params(), "direct_mse": res.direct_mse,
                                        "rollout_mse": res.rollout_mse})


def cmd_eval(cfg, out: Path) -> None:
    model = load_twin(_need(cfg, "model"))
    system = cfg["system"]
    if system == "swe":
        setup = _swe_setup(cfg)
        rr, pr = ex.relative_test_errors(model, setup.ds)
        write_summary(out / "summary.csv", {"test_rel_rec": rr, "test_rel_pred": pr})
        return
    sys_ = odelab.get_system(system)
    if model.n_x != sys_.dim:
        raise ConfigError("model dimension does not match the system")
    ref = odelab.integrate(sys_, sys_.x0, *sys_.t_span)
    if cfg["profile"] == "horizon":
        T = sys_.t_span[1] - sys_.t_span[0]
        prof = ex.horizon_error_profile(model, ref, sys_.t_span[0], T / ex.PROFILE_STEPS, ex.PROFILE_STEPS)
        write_profile_csv(out / "profile.csv", prof)
        write_summary(out / "summary.csv", {"direct_mse": prof.mse("direct"), "rollout_mse": prof.mse("rollout"),
                                            "direct_slope": prof.slope("direct"), "rollout_slope": prof.slope("rollout")})
    elif cfg["profile"] == "budget":
        ds = datasets.sample_pairs_ode(sys_, cfg["pairs"] or ex.N_PAIRS, gap_cap=cfg["gap_cap"], seed=cfg["seed"],
                                       reference=ref)
        ds.norm = model.norm
        eb = ex.error_budget(model, ds, system, seed=cfg["seed"])
        write_summary(out / "summary.csv", {"eps_ae": eb.eps_ae, "eps_map": eb.eps_map, "L_d": eb.lipschitz_decoder,
                                            "L_G": eb.lipschitz_flow, "T": eb.horizon, "bound": eb.bound,
                                            "max_error": eb.max_error, "holds": int(eb.holds)})
    else:
        raise ConfigError("profile must be horizon or budget")


def _infer(cfg, model, truth):
    ex.check_grid(model, truth)
    return ex.swe_inference(model, truth, cfg["factor"], seed=cfg["seed"])


def cmd_infer(cfg, out: Path) -> None:
    model = load_twin(_need(cfg, "model"))
    truth = _swe_truth(cfg)
    inf = _infer(cfg, model, truth)
    da.write_observation(out / "observation.ltwo", inf.obs)
    t = truth.times
    with open(out / "reconstruction.ltwf", "wb") as fp:
        swe.write_snapshot(fp, swe.SweState.from_array(inf.recon_t1, t[inf.k1]))
    write_rows(out / "errors.csv", ["t", "method", "rel_err"], [
        (t[inf.k1], "twin", inf.err_twin_t1), (t[inf.k1], "bilinear", inf.err_bilinear_t1),
        (t[inf.k2], "twin", inf.err_twin_t2), (t[inf.k2], "bilinear", inf.err_bilinear_t2),
    ])
    np.save(out / "fields.npy", np.stack([truth.fields[inf.k1, 0], inf.bilinear[0], inf.recon_t1[0],
                                          truth.fields[inf.k2, 0], inf.forecast_t2[0]]))


def cmd_4dvar(cfg, out: Path) -> None:
    model = load_twin(cfg["model"]) if cfg["model"] else None
    setup = None if cfg["trajectory"] else _swe_setup(cfg)
    truth = _swe_truth(cfg, setup)
    norm = model.norm if model else setup.ds.norm
    obs = da.observe(da.ObsOperator(cfg["factor"], 0.01, cfg["seed"]), truth.fields[ex.OBS_STEP], norm,
                     truth.times[ex.OBS_STEP])
    res = ex.swe_fourdvar(norm, truth, obs, max_iters=cfg["iters"])
    write_rows(out / "cost.csv", ["iteration", "cost"], enumerate(res.var.cost_history))
    write_summary(out / "summary.csv", {
        "iterations": res.var.iterations, "converged": int(res.var.converged),
        "analysis_err_t1": res.err_analysis_t1, "background_err_t1": res.err_background_t1,
        "forecast_err_t2": res.err_forecast_t2, "background_err_t2": res.err_background_t2})


def cmd_compare(cfg, out: Path) -> None:
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    unknown = set(methods) - {"twin", "4dvar", "deeponet"}
    if unknown or "twin" not in methods or len(methods) < 2:
        raise ConfigError("methods must list twin plus at least one of 4dvar, deeponet")
    model = load_twin(_need(cfg, "model"))
    setup = _swe_setup(cfg)
    truth = _swe_truth(cfg, setup)
    ex.check_grid(model, truth)
    if "4dvar" in methods:
        inf = ex.swe_inference(model, truth, cfg["factor"], seed=cfg["seed"])
        ks = ex.compare_times(truth, start=ex.OBS_STEP)
        var = ex.swe_fourdvar(model.norm, truth, inf.obs, max_iters=cfg["iters"], extra_steps=ks)
        rows = ex.twin_vs_fourdvar(model, inf, var, truth, ks)
        write_rows(out / "twin_vs_4dvar.csv", ["t", "twin", "4dvar"], rows)
    if "deeponet" in methods:
        if cfg["deeponet"]:
            don = bl.load_baseline(cfg["deeponet"])
        else:
            don, _ = ex.run_deeponet(setup, cfg["seed"], norm=model.norm, **({"epochs": cfg["epochs"]} if cfg["epochs"] else {}))
            bl.save_baseline(out / "deeponet.ltbl", don)
        rows = ex.twin_vs_deeponet(model, don, truth)
        write_rows(out / "twin_vs_deeponet.csv", ["t", "twin", "deeponet"], rows)


# ---------------------------------------------------------------------------
# figures

def _floats(rows, col):
    return np.array([float(r[col]) for r in rows])


def render_report(run: Path) -> list[Path]:
    """Render a PNG next to each known CSV in ``run``; returns the files written."""
    made = []
    run = Path(run)
    if (run / "trajectory.csv").exists():
        tr = odelab.read_trajectory_csv(run / "trajectory.csv")
        plotting.plot_trajectory(run / "trajectory.png", tr.times, tr.states)
        made.append(run / "trajectory.png")
    if (run / "prediction.csv").exists() and (run / "reference.csv").exists():
        ref = odelab.read_trajectory_csv(run / "reference.csv")
        pr = odelab.read_trajectory_csv(run / "prediction.csv")
        plotting.plot_trajectory(run / "prediction.png", ref.times, ref.states, pred_times=pr.times, pred=pr.states,
                                 title="reference (solid) and structured twin (dashed)")
        made.append(run / "prediction.png")
    if (run / "metrics.csv").exists():
        h, rows = read_rows(run / "metrics.csv")
        if rows:
            series = {name: _floats(rows, h.index(name)) for name in ("train_loss", "test_rec_mse", "test_pred_mse")}
            series = {k: np.maximum(v, 1e-300) for k, v in series.items() if np.any(v > 0)}
            plotting.plot_loss(run / "loss.png", _floats(rows, 0), series)
            made.append(run / "loss.png")
    elif (run / "loss.csv").exists():
        h, rows = read_rows(run / "loss.csv")
        if rows:
            series = {name: _floats(rows, h.index(name)) for name in h[1:] if name != "lr"}
            plotting.plot_loss(run / "loss.png", _floats(rows, 0), series)
            made.append(run / "loss.png")
    if (run / "profile.csv").exists():
        h, rows = read_rows(run / "profile.csv")
        plotting.plot_horizon(run / "horizon.png", _floats(rows, 1), _floats(rows, 2), _floats(rows, 3))
        made.append(run / "horizon.png")
    if (run / "rollout.csv").exists():
        h, rows = read_rows(run / "rollout.csv")
        plotting.plot_lstm(run / "rollout.png", _floats(rows, 1), _floats(rows, 2))
        made.append(run / "rollout.png")
    for name in ("twin_vs_4dvar", "twin_vs_deeponet"):
        if (run / f"{name}.csv").exists():
            h, rows = read_rows(run / f"{name}.csv")
            plotting.plot_relerr(run / f"{name}.png", _floats(rows, 0), {m: _floats(rows, i) for i, m in enumerate(h) if i})
            made.append(run / f"{name}.png")
    if (run / "invariants.csv").exists():
        h, rows = read_rows(run / "invariants.csv")
        t = _floats(rows, 0)
        plotting.plot_relerr(run / "invariants.png", t, {m: _floats(rows, i) / _floats(rows, i)[0] for i, m in enumerate(h) if i},
                             title="mass and energy relative to t = 0")
        made.append(run / "invariants.png")
    if (run / "fields.npy").exists():
        f = np.load(run / "fields.npy")
        names = ["truth t1", "bilinear t1", "twin t1", "truth t2", "twin t2"]
        plotting.plot_fields(run / "fields.png", list(zip(names, f)))
        made.append(run / "fields.png")
    return made


def cmd_report(cfg, out: Path) -> None:
    run = Path(_need(cfg, "run"))
    if not run.is_dir():
        raise FileNotFoundError(f"no such run directory: {run}")
    made = render_report(run)
    write_rows(out / "figures.csv", ["figure"], [[str(p)] for p in made])


HANDLERS = {
    "simulate": cmd_simulate, "dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval,
    "infer": cmd_infer, "4dvar": cmd_4dvar, "compare": cmd_compare, "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latent-twins", description="Latent twin surrogates, baselines and assimilation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--system")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--gap-cap", dest="gap_cap", type=float)
    p.add_argument("--mode")
    p.add_argument("--baseline")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--trajectories", type=int)
    p.add_argument("--factor", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--model")
    p.add_argument("--deeponet")
    p.add_argument("--trajectory")
    p.add_argument("--profile")
    p.add_argument("--methods")
    p.add_argument("--iters", type=int)
    p.add_argument("--run", help="run directory to render (report)")
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", action="store_const", const=True)
    p.add_argument("--no-plots", dest="plots", action="store_const", const=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    try:
        cfg = resolve(args)
        threads = cfg["threads"] if cfg["threads"] is not None else (1 if cfg["deterministic"] else None)
        out = fresh_run_dir(cfg)
        write_config(out / "config.txt", cfg)
        with threadpool_limits(limits=threads):
            HANDLERS[cfg["command"]](cfg, out)
        if cfg["plots"] and cfg["command"] != "report":
            render_report(out)
        print(out)
        return 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
