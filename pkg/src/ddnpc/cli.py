"""Command-line entry point.

Subcommands: ``collect`` (offline data plus certificate), ``check-pe``
(excitation report for a recorded dataset), ``simulate`` / ``match-output``
(data-driven simulation and tracking with certified bound columns),
``npc-run`` (closed-loop experiment) and ``sweep`` (fan out several runs).
Every experiment is described by one JSON config file with fixed sections and
mandatory seeds; reruns of the same config are byte-identical. Exit codes:
0 success, 2 config error, 3 assumption violated (strict mode), 4 solver
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import basis, behavior, npc, plant, presets, trajlib

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_SOLVER = 4

FLOAT_FMT = trajlib.FLOAT_FMT


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

_SCHEMA = {
    "plant": {"name", "params"},
    "data": {"N", "seed", "policy"},
    "dictionary": {"name", "perturbation", "seed"},
    "box": {"u_lower", "u_upper", "xi_lower", "xi_upper", "grid_points"},
    "noise": {"w_star", "seed"},
    "ocp": {
        "mode", "L", "Q", "R", "u_setpoint", "y_setpoint", "u_min", "u_max",
        "y_min", "y_max", "lambda_alpha", "lambda_sigma", "slack_mode",
        "c_slack", "eps_inflation", "stride",
    },
    "run": {"total_steps", "seed", "x0", "hold_input"},
    "simulate": {"L", "lambda_alpha", "u_file", "xi0"},
    "match": {"L", "lambda_alpha", "y_file"},
    "files": {"data", "data_noisy", "certificate"},
    "sweep": {"vary", "values", "seeds"},
}

_POLICY_KEYS = {
    "kp", "kd", "dither", "redraw_every", "dither_edge", "ref_low", "ref_high",
    "ref_step", "seed", "K",
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for section, content in cfg.items():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section '{section}'")
        if not isinstance(content, dict):
            raise ConfigError(f"{path}: section '{section}' must be an object")
        allowed = _SCHEMA[section]
        for key in content:
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key '{section}.{key}'")
        if section == "data" and "policy" in content:
            for key in content["policy"]:
                if key not in _POLICY_KEYS:
                    raise ConfigError(f"{path}: unknown key 'data.policy.{key}'")
    for section in ("data", "noise", "run"):
        if section in cfg and "seed" not in cfg[section]:
            raise ConfigError(f"{path}: section '{section}' requires an explicit seed")
    if "files" in cfg:
        for key, value in cfg["files"].items():
            ref = (path.parent / value) if not Path(value).is_absolute() else Path(value)
            if not ref.exists():
                raise ConfigError(f"{path}: files.{key} does not exist: {ref}")
    return cfg


def _resolve(path, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


# ---------------------------------------------------------------------------
# experiment assembly
# ---------------------------------------------------------------------------


class Experiment:
    """Everything a subcommand needs, built from one config."""

    def __init__(self, cfg: dict, base: Path):
        self.cfg = cfg
        self.base = base
        plant_cfg = cfg.get("plant", {"name": "double_pendulum"})
        name = plant_cfg.get("name", "double_pendulum")
        params = plant_cfg.get("params", {})
        if name == "double_pendulum":
            self.params = plant.DoublePendulumParams(**params)
            self.plant_model = plant.make_double_pendulum(self.params)
            self.structure = plant.BrunovskyStructure(degrees=(2, 2))
            self.phi = lambda U, XI: plant.pendulum_synthetic_input(self.params, U, XI)
        elif name == "lti_toy":
            self.plant_model, self.structure, self.phi = plant.make_chain_lti()
            self.params = None
        elif name == "scalar_flat":
            self.plant_model, self.structure, self.phi = plant.make_scalar_flat(**params)
            self.params = None
        else:
            raise ConfigError(f"unknown plant '{name}'")
        self.plant_name = name

        box_cfg = cfg.get("box")
        if box_cfg is None and name == "double_pendulum":
            self.box = presets.pendulum_experiment().box
        elif box_cfg is not None:
            self.box = basis.OperatingBox(
                u_lower=box_cfg["u_lower"],
                u_upper=box_cfg["u_upper"],
                xi_lower=box_cfg["xi_lower"],
                xi_upper=box_cfg["xi_upper"],
                grid_points=int(box_cfg.get("grid_points", 7)),
            )
        else:
            m, n = self.structure.m, self.structure.n
            self.box = basis.OperatingBox(
                u_lower=-3 * np.ones(m), u_upper=3 * np.ones(m),
                xi_lower=-1.5 * np.ones(n), xi_upper=1.5 * np.ones(n),
            )

    def dictionary(self):
        d_cfg = self.cfg.get("dictionary", {})
        name = d_cfg.get("name", "pendulum_model" if self.plant_name == "double_pendulum" else "input")
        m, n = self.structure.m, self.structure.n
        if name == "pendulum_model":
            if self.plant_name != "double_pendulum":
                raise ConfigError("pendulum_model dictionary needs the pendulum plant")
            return basis.make_pendulum_dictionary(
                self.params,
                perturbation=float(d_cfg.get("perturbation", 0.1)),
                seed=int(d_cfg.get("seed", 0)),
            )
        if name == "identity":
            return basis.IdentityDictionary(m, n)
        if name == "input":
            return basis.InputDictionary(m, n)
        if name == "poly2":
            return basis.PolynomialDictionary(m, n)
        if name == "trig":
            return basis.TrigDictionary(m, n)
        if name == "flat_exact":
            return presets.flat_toy_dictionary()
        raise ConfigError(f"unknown dictionary '{name}'")

    def policy(self):
        data_cfg = self.cfg.get("data", {})
        pol = dict(data_cfg.get("policy", {}))
        seed = int(data_cfg.get("seed", 0))
        if self.plant_name == "double_pendulum":
            defaults = dict(
                ref_low=np.array([-0.6, 0.05]),
                ref_high=np.array([0.95, 1.15]),
                u_low=self.box.u_lower,
                u_high=self.box.u_upper,
            )
            for key in ("kp", "kd", "dither", "redraw_every", "dither_edge", "ref_step"):
                if key in pol:
                    defaults[key] = np.asarray(pol[key], dtype=float) if key == "dither" else pol[key]
            for key in ("ref_low", "ref_high"):
                if key in pol:
                    defaults[key] = np.asarray(pol[key], dtype=float)
            return plant.PendulumPdPolicy(params=self.params, seed=seed, **defaults)
        K = pol.get("K")
        if K is None:
            K = {
                "lti_toy": [[0.2, 0.4, 0.0], [0.0, 0.0, 0.3]],
                "scalar_flat": [[0.25, 0.55]],
            }[self.plant_name]
        return plant.StateFeedbackDitherPolicy(
            K=np.asarray(K, dtype=float),
            dither=float(pol.get("dither", 0.6)),
            u_low=self.box.u_lower,
            u_high=self.box.u_upper,
            seed=seed,
        )

    def noise(self):
        n_cfg = self.cfg.get("noise", {"w_star": 0.0, "seed": 0})
        return plant.NoiseModel(w_star=float(n_cfg.get("w_star", 0.0)), seed=int(n_cfg.get("seed", 0)))

    def ocp_cfg(self):
        return self.cfg.get("ocp", {})


# ---------------------------------------------------------------------------
# emission helpers
# ---------------------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [FLOAT_FMT % v if isinstance(v, float) else str(v) for v in row]
            )


def _summary(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_collect(cfg, base, out_dir: Path, strict: bool) -> int:
    exp = Experiment(cfg, base)
    data_cfg = cfg.get("data", {})
    N = int(data_cfg.get("N", 200))
    noise = exp.noise()
    traj = plant.collect_offline_data(
        exp.plant_model, exp.policy(), N, exp.structure, noise, box=exp.box, strict=strict
    )
    if not traj.stayed_in_box:
        print(f"warning: trajectory left the operating box at step {traj.first_violation}")
        if strict:
            return EXIT_ASSUMPTION
    dictionary = exp.dictionary()
    cert = basis.build_certificate(
        dictionary,
        exp.phi,
        exp.box,
        degrees=exp.structure.degrees,
        w_star=noise.w_star,
        seed=cfg.get("dictionary", {}).get("seed"),
    )
    trajlib.write_trajectory_csv(out_dir / "data.csv", traj.u, traj.outputs)
    trajlib.write_trajectory_csv(out_dir / "data_noisy.csv", traj.u, traj.outputs_noisy)
    cert.save(out_dir / "certificate.json")

    L = int(cfg.get("ocp", {}).get("L", 10))
    order = L + exp.structure.d_max + exp.structure.n
    feats = basis.evaluate_along(dictionary, traj.u, traj.xi_noisy.data[:N])
    pe = trajlib.is_persistently_exciting(trajlib.Sequence(feats), order)
    print(
        f"excitation check: order {order}, rank {pe.rank}/{pe.required_rank}, "
        f"smallest singular value {pe.sigma_min:.6g}"
    )
    lower_bound = (dictionary.r + 1) * order - 1
    if N < lower_bound:
        print(
            f"warning: N = {N} is below the excitation budget "
            f"(r + 1)(L + d_max + n) - 1 = {lower_bound}"
        )
    if noise.w_star == 0.0:
        print("noise bound is zero: noise-gain estimation skipped (identically zero)")
    print(f"eps_star = {cert.eps_star:.6g}")
    run_cfg = json.loads(json.dumps(cfg))
    run_cfg["files"] = {
        "data": str((out_dir / "data.csv").resolve()),
        "data_noisy": str((out_dir / "data_noisy.csv").resolve()),
        "certificate": str((out_dir / "certificate.json").resolve()),
    }
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(run_cfg, fh, indent=2, sort_keys=True)
    if strict and not pe.is_pe:
        return EXIT_ASSUMPTION
    return EXIT_OK


def _load_trajectory(exp: Experiment, cfg, base: Path):
    files = cfg.get("files", {})
    if "data" not in files:
        raise ConfigError("this command needs files.data (run collect first)")
    u, outputs = trajlib.read_trajectory_csv(_resolve(files["data"], base))
    noisy = outputs
    if "data_noisy" in files:
        _, noisy = trajlib.read_trajectory_csv(_resolve(files["data_noisy"], base))
    st = exp.structure
    N = u.shape[0]
    xi = plant.window_states([y[: N + d] for y, d in zip(outputs, st.degrees)], st)
    xi_noisy = plant.window_states([y[: N + d] for y, d in zip(noisy, st.degrees)], st)
    return plant.Trajectory(
        u=u,
        outputs=[y[: N + d] for y, d in zip(outputs, st.degrees)],
        outputs_noisy=[y[: N + d] for y, d in zip(noisy, st.degrees)],
        xi=xi,
        xi_noisy=xi_noisy,
        structure=st,
        stayed_in_box=True,
    )


def _load_certificate(cfg, base: Path):
    files = cfg.get("files", {})
    if "certificate" not in files:
        raise ConfigError(
            "this command needs files.certificate; produce one with collect"
        )
    return basis.ApproximationCertificate.load(_resolve(files["certificate"], base))


def cmd_check_pe(cfg, base, out_dir, strict, order=None) -> int:
    exp = Experiment(cfg, base)
    traj = _load_trajectory(exp, cfg, base)
    dictionary = exp.dictionary()
    if order is None:
        L = int(cfg.get("ocp", {}).get("L", 10))
        order = L + exp.structure.d_max + exp.structure.n
    feats = basis.evaluate_along(dictionary, traj.u, traj.xi_noisy.data[: traj.N])
    pe = trajlib.is_persistently_exciting(trajlib.Sequence(feats), int(order))
    print(
        f"order {order}: rank {pe.rank}, required {pe.required_rank}, "
        f"smallest singular value {pe.sigma_min:.6g} -> "
        + ("excitation holds" if pe.is_pe else "excitation FAILS")
    )
    return EXIT_OK if pe.is_pe else EXIT_ASSUMPTION


def _state_from_window(exp: Experiment, xi0):
    xi0 = np.asarray(xi0, dtype=float).reshape(-1)
    if exp.plant_name == "double_pendulum":
        Ts = exp.params.Ts
        return np.array(
            [xi0[0], (xi0[1] - xi0[0]) / Ts, xi0[2], (xi0[3] - xi0[2]) / Ts]
        )
    return xi0.copy()  # the toy plants use the window state as the state


def cmd_simulate(cfg, base, out_dir, strict) -> int:
    exp = Experiment(cfg, base)
    traj = _load_trajectory(exp, cfg, base)
    cert = _load_certificate(cfg, base)
    sim_cfg = cfg.get("simulate", {})
    L = int(sim_cfg.get("L", 10))
    dictionary = exp.dictionary()
    blocks = behavior.DataDictionaryBlocks.from_trajectory(dictionary, traj, horizon=L)
    if "u_file" in sim_cfg:
        u_new, _ = trajlib.read_trajectory_csv(_resolve(sim_cfg["u_file"], base))
        u_new = u_new[:L]
    else:
        u_new = np.tile(np.zeros(exp.structure.m), (L, 1))
    xi0 = np.asarray(sim_cfg.get("xi0", np.zeros(exp.structure.n)), dtype=float)
    result = behavior.simulate_data_driven(
        blocks,
        u_new,
        xi0,
        lambda_alpha=float(sim_cfg.get("lambda_alpha", 1e3)),
        eps_star=cert.eps_star,
        k_xi=cert.k_xi,
        g_row_norm=cert.g_inf_bound,
    )
    # oracle column: the window state determines the physical state, so the
    # true response is available whenever the plant model is configured
    x0 = _state_from_window(exp, xi0)
    pad = np.vstack([u_new, np.zeros((exp.structure.d_max, exp.structure.m))])
    _, y_true = plant.simulate(exp.plant_model, x0, pad)
    rows = []
    for i, (y_hat, bound) in enumerate(zip(result.outputs, result.bounds)):
        for k in range(y_hat.size):
            rows.append(
                (i + 1, k, float(y_hat[k]), float(bound[k]), float(y_true[k, i]))
            )
    _write_csv(
        out_dir / "simulation.csv",
        ["channel", "k", "y_hat", "bound", "y_true"],
        rows,
    )
    print(f"combination norm {result.alpha_l1:.6g}, residual {result.residual_sq:.3e}")
    return EXIT_OK


def cmd_match(cfg, base, out_dir, strict) -> int:
    exp = Experiment(cfg, base)
    traj = _load_trajectory(exp, cfg, base)
    cert = _load_certificate(cfg, base)
    m_cfg = cfg.get("match", {})
    L = int(m_cfg.get("L", 10))
    dictionary = exp.dictionary()
    blocks = behavior.DataDictionaryBlocks.from_trajectory(dictionary, traj, horizon=L)
    if "y_file" not in m_cfg:
        raise ConfigError("match needs match.y_file with the reference outputs")
    _, refs = trajlib.read_trajectory_csv(_resolve(m_cfg["y_file"], base))
    refs = [y[: L + d] for y, d in zip(refs, exp.structure.degrees)]
    result = behavior.match_output_data_driven(
        blocks,
        refs,
        lambda_alpha=float(m_cfg.get("lambda_alpha", 1e3)),
        eps_star=cert.eps_star,
        k_xi=cert.k_xi,
        g_row_norm=cert.g_inf_bound,
    )
    rows = []
    for k in range(L):
        rows.append(tuple([k] + [float(v) for v in result.u[k]]))
    _write_csv(
        out_dir / "matched_input.csv",
        ["k"] + [f"u_{i+1}" for i in range(exp.structure.m)],
        rows,
    )
    print(f"combination norm {result.alpha_l1:.6g}, residual {result.residual_sq:.3e}")
    return EXIT_OK


def _run_once(exp: Experiment, cfg, base) -> tuple:
    ocp_cfg = exp.ocp_cfg()
    run_cfg = cfg.get("run", {})
    cert = _load_certificate(cfg, base)
    traj = _load_trajectory(exp, cfg, base)
    mode = ocp_cfg.get("mode", "robust")
    L = int(ocp_cfg.get("L", 10))
    noise = exp.noise()
    inflation = float(ocp_cfg.get("eps_inflation", 1.1))
    eps_star = cert.eps_star * inflation
    blocks = behavior.DataDictionaryBlocks.from_trajectory(
        exp.dictionary(), traj, horizon=L + exp.structure.d_max,
        use_noisy=(mode == "robust"),
    )
    m = exp.structure.m
    spec = npc.OcpSpec(
        mode=mode,
        L=L,
        structure=exp.structure,
        blocks=blocks,
        Q=np.asarray(ocp_cfg.get("Q", np.eye(m).tolist()), dtype=float),
        R=np.asarray(ocp_cfg.get("R", np.eye(m).tolist()), dtype=float),
        u_setpoint=np.asarray(ocp_cfg["u_setpoint"], dtype=float),
        y_setpoint=np.asarray(ocp_cfg["y_setpoint"], dtype=float),
        u_min=np.asarray(ocp_cfg.get("u_min", exp.box.u_lower), dtype=float),
        u_max=np.asarray(ocp_cfg.get("u_max", exp.box.u_upper), dtype=float),
        y_min=None if "y_min" not in ocp_cfg else np.asarray(ocp_cfg["y_min"], dtype=float),
        y_max=None if "y_max" not in ocp_cfg else np.asarray(ocp_cfg["y_max"], dtype=float),
        lambda_alpha=float(ocp_cfg.get("lambda_alpha", 1e4)),
        lambda_sigma=float(ocp_cfg.get("lambda_sigma", 1e8)),
        eps_star=eps_star if mode == "robust" else 0.0,
        w_star=noise.w_star if mode == "robust" else 0.0,
        slack_mode=ocp_cfg.get("slack_mode", "relaxed"),
        c_slack=float(ocp_cfg.get("c_slack", 10.0)),
        k_psi=cert.k_psi,
        k_w=cert.k_w,
        g_dagger_norm=cert.g_dagger_inf_bound,
    )
    x0 = np.asarray(run_cfg.get("x0", np.zeros(exp.plant_model.n)), dtype=float)
    hold = run_cfg.get("hold_input")
    if hold is None and exp.plant_name == "double_pendulum":
        hold = plant.equilibrium_torque(exp.params, x0[[0, 2]])
    elif hold is not None:
        hold = np.asarray(hold, dtype=float)
    run_noise = plant.NoiseModel(w_star=noise.w_star, seed=int(run_cfg.get("seed", 0)))
    log = npc.run_closed_loop(
        spec,
        exp.plant_model,
        run_noise,
        x0=x0,
        total_steps=int(run_cfg.get("total_steps", 300)),
        stride=ocp_cfg.get("stride"),
        hold_input=hold,
    )
    return spec, cert, log


def cmd_npc_run(cfg, base, out_dir: Path, strict) -> int:
    exp = Experiment(cfg, base)
    spec, cert, log = _run_once(exp, cfg, base)
    arr = log.as_arrays()
    m = spec.structure.m
    inflation = float(exp.ocp_cfg().get("eps_inflation", 1.1))
    bound_rows = npc.evaluate_runtime_bounds(
        log,
        eps_star=cert.eps_star * inflation,
        w_star=spec.w_star,
        k_xi=cert.k_xi,
        k_w=cert.k_w,
        g_norm_inf=cert.g_inf_bound,
    )
    solves_by_t = {s.t: s for s in log.solves}

    rows = []
    for idx, t in enumerate(arr["t"]):
        row = [int(t)]
        row += [float(v) for v in arr["u"][idx]]
        row += [float(v) for v in arr["y_measured"][idx]]
        row += [float(v) for v in arr["y"][idx]]
        s = solves_by_t.get(int(t) - (int(t) % log.stride)) if t >= 0 else None
        if s is not None and t >= 0:
            row += [float(s.objective), float(s.alpha_l1), float(s.sigma_inf), s.status]
        else:
            row += ["", "", "", "bootstrap"]
        row.append(float(arr["stage_cost"][idx]))
        rows.append(tuple(row))
    header = (
        ["t"]
        + [f"u_{i+1}" for i in range(m)]
        + [f"y_meas_{i+1}" for i in range(m)]
        + [f"y_{i+1}" for i in range(m)]
        + ["J", "alpha_l1", "sigma_inf", "status", "stage_cost"]
    )
    _write_csv(out_dir / "log.csv", header, rows)

    _write_csv(
        out_dir / "bound_trace.csv",
        ["solve_t", "k", "channel", "realized", "bound"],
        [(int(t), int(k), int(i) + 1, float(r), float(b)) for t, k, i, r, b in bound_rows],
    )

    bound_by_step = {}
    for t, k, i, r, b in bound_rows:
        bound_by_step[t + k] = max(bound_by_step.get(t + k, 0.0), b)
    plot_rows = []
    for idx, t in enumerate(arr["t"]):
        if t < 0:
            continue
        plot_rows.append(
            (
                int(t),
                float(arr["y"][idx][0]),
                float(arr["y"][idx][1]) if m > 1 else 0.0,
                float(spec.y_setpoint[0]),
                float(spec.y_setpoint[1]) if m > 1 else 0.0,
                float(arr["u"][idx][0]),
                float(arr["u"][idx][1]) if m > 1 else 0.0,
                float(solves_by_t[int(t) - int(t) % log.stride].objective),
                float(bound_by_step.get(int(t), 0.0)),
            )
        )
    _write_csv(
        out_dir / "plot_data.csv",
        ["t", "y_1", "y_2", "y_1_set", "y_2_set", "u_1", "u_2", "J", "bound"],
        plot_rows,
    )

    settled = log.settled_error(last=min(50, len(log.times)))
    statuses = [s.status for s in log.solves]
    held = sum(1 for s in log.solves if not s.applied)
    # solver-tolerance slack: exact certificates give bounds below the
    # achievable constraint accuracy
    violations = sum(1 for t, k, i, r, b in bound_rows if r > b + 1e-6)
    _summary(
        out_dir / "summary.json",
        {
            "settled_error": settled,
            "mean_iterations": float(np.mean([s.iterations for s in log.solves])),
            "solves": len(log.solves),
            "held_steps": held,
            "statuses": sorted(set(statuses)),
            "bound_violations": violations,
            "all_inputs_in_box": bool(
                np.all(arr["u"] >= spec.u_min - 1e-12)
                and np.all(arr["u"] <= spec.u_max + 1e-12)
            ),
        },
    )
    print(f"settled error {settled:.6g}, {held} held solves, {violations} bound violations")
    if held and strict:
        return EXIT_SOLVER
    return EXIT_OK


def cmd_sweep(cfg, base, out_dir: Path, strict) -> int:
    sweep_cfg = cfg.get("sweep")
    if not sweep_cfg:
        raise ConfigError("sweep needs a [sweep] section (vary, values, seeds)")
    vary = sweep_cfg["vary"]
    values = sweep_cfg["values"]
    seeds = sweep_cfg.get("seeds", [0])
    results = []
    for value in values:
        for seed in seeds:
            sub = json.loads(json.dumps(cfg))
            sub.pop("sweep")
            section, key = vary.split(".")
            sub.setdefault(section, {})[key] = value
            sub.setdefault("run", {})["seed"] = seed
            run_dir = out_dir / f"{vary.replace('.', '_')}_{value}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            exp = Experiment(sub, base)
            spec, cert, log = _run_once(exp, sub, base)
            settled = log.settled_error(last=min(50, len(log.times)))
            results.append({"value": value, "seed": seed, "settled_error": settled})
            _summary(run_dir / "summary.json", results[-1])
            print(f"{vary} = {value}, seed {seed}: settled error {settled:.6g}")
    by_value = {}
    for rec in results:
        by_value.setdefault(rec["value"], []).append(rec["settled_error"])
    ordered = [float(np.mean(by_value[v])) for v in values]
    _summary(
        out_dir / "sweep_summary.json",
        {"vary": vary, "values": values, "settled_errors": ordered},
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ddnpc",
        description="Data-driven nonlinear predictive control experiments",
    )
    parser.add_argument("command", choices=[
        "collect", "check-pe", "simulate", "match-output", "npc-run", "sweep",
    ])
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--out-dir", default=".", help="output directory")
    parser.add_argument("--strict", action="store_true",
                        help="exit nonzero on any assumption-check failure")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="replace the run seed from the config")
    parser.add_argument("--order", type=int, default=None,
                        help="excitation order for check-pe")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed_override is not None:
        cfg.setdefault("run", {})["seed"] = args.seed_override
    base = Path(args.config).resolve().parent
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    dispatch = {
        "collect": cmd_collect,
        "check-pe": lambda *a: cmd_check_pe(*a, order=args.order),
        "simulate": cmd_simulate,
        "match-output": cmd_match,
        "npc-run": cmd_npc_run,
        "sweep": cmd_sweep,
    }
    try:
        return dispatch[args.command](cfg, base, out_dir, args.strict)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (behavior.ConvergenceError, behavior.InfeasibleInitialConditionError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except plant.BoxViolationError as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION


if __name__ == "__main__":
    sys.exit(main())
