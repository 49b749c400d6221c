"""Batch command-line harness: ``python -m lqmftg <command> [--preset | --config] ...``.

Every command writes CSV/JSON files into ``--out`` plus ``manifest.json``
holding the expanded config, package version and seed. Exit codes:
0 success, 1 config error, 2 singular Riccati system, 3 learner divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, dynamics, learner, presets, riccati
from .model import ConfigError, PolicyProfile, derive_joint_model, load_config, spec_from_dict
from .riccati import FixedPointDiverged, SingularPhi

EXIT_OK, EXIT_CONFIG, EXIT_SINGULAR, EXIT_DIVERGED = 0, 1, 2, 3


# --------------------------------------------------------------------------
# config plumbing


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "model":
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def expand_config(args) -> dict:
    """Preset and/or file merged into one explicit tree."""
    tree: dict = {}
    if args.preset:
        try:
            tree = presets.expand(args.preset)
        except KeyError as exc:
            raise ConfigError("--preset", str(exc.args[0])) from None
    if args.config:
        loaded = load_config(args.config)
        if "model" not in loaded and "learner" not in loaded and "experiment" not in loaded:
            loaded = {"model": loaded}
        tree = _merge(tree, loaded)
    if "model" not in tree:
        raise ConfigError("<config>", "need --preset or --config with a model")
    tree.setdefault("learner", {})
    tree.setdefault("experiment", {})
    if args.seed is not None:
        tree["learner"]["seed"] = int(args.seed)
    tree["learner"].setdefault("seed", 0)
    return tree


def _model(tree):
    spec = spec_from_dict(tree["model"])
    try:
        return derive_joint_model(spec)
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None


def _learner_cfg(tree, **overrides) -> learner.LearnerConfig:
    try:
        cfg = learner.config_from_dict(tree["learner"])
        cfg = replace(cfg, **overrides)
        cfg.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError("learner", str(exc)) from None
    return cfg


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return x


def _write_manifest(out: Path, command: str, tree: dict, extra=None) -> None:
    manifest = {"command": command, "version": __version__, "seed": tree["learner"].get("seed"),
                "config": _jsonable(tree)}
    if extra:
        manifest.update(_jsonable(extra))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _gain_rows(profile):
    for part, gains in (("y", profile.k), ("x", profile.k_bar)):
        for i, arr in enumerate(gains):
            for t in range(arr.shape[0]):
                for a in range(arr.shape[1]):
                    for b in range(arr.shape[2]):
                        yield i, part, t, a, b, float(arr[t, a, b])


GAIN_HEADER = ("player", "part", "t", "row", "col", "value")


# --------------------------------------------------------------------------
# commands


def cmd_solve_ne(args, tree, out: Path) -> int:
    model = _model(tree)
    sol = riccati.solve_clne(model)
    res = riccati.verify_ne_residual(model, sol)
    riccati.save_solution(sol, out / "solution.json")
    _write_rows(out / "gains.csv", GAIN_HEADER, _gain_rows(sol.profile))
    _write_rows(out / "residuals.csv", ("part", "player", "t", "residual"),
                ((part, i, t, float(arr[i, t])) for part, arr in (("y", res.y), ("x", res.x))
                 for i in range(arr.shape[0]) for t in range(arr.shape[1])))
    _write_rows(out / "rcond.csv", ("t", "rcond", "rcond_bar"),
                ((t, float(sol.rcond[t]), float(sol.rcond_bar[t])) for t in range(model.horizon)))
    print(f"solved NE: max residual {res.max():.3e}, min rcond {min(sol.rcond.min(), sol.rcond_bar.min()):.3e}")
    return EXIT_OK


def cmd_solve_olne(args, tree, out: Path) -> int:
    model = _model(tree)
    sol = riccati.solve_olne(model)
    res = riccati.olne_residual(model, sol)
    _write_rows(out / "gains.csv", GAIN_HEADER, _gain_rows(sol.profile))
    _write_rows(out / "residuals.csv", ("part", "player", "t", "residual"),
                ((part, i, t, float(res[row, i, t])) for row, part in enumerate(("y", "x"))
                 for i in range(res.shape[1]) for t in range(res.shape[2])))
    try:
        gap = sol.gap_to(riccati.solve_clne(model).profile)
    except SingularPhi:
        gap = float("nan")
    (out / "olne.json").write_text(json.dumps({
        "L": [x.tolist() for x in sol.l], "L_bar": [x.tolist() for x in sol.l_bar],
        "P": [x.tolist() for x in sol.p], "P_bar": [x.tolist() for x in sol.p_bar],
        "gains": riccati.profile_to_dict(sol.profile), "used_fallback": np.asarray(sol.used_fallback).tolist(),
        "max_residual": float(res.max()), "gap_to_clne": gap}, indent=1))
    print(f"solved OLNE: max residual {res.max():.3e}, gap to closed-loop NE {gap:.3e}")
    return EXIT_OK


def _trace_stats(trace: learner.RunTrace):
    """Phase-0 final error and tail mean (worst player), increment spread."""
    players = sorted({r[2] for r in trace.records})
    errs = [trace.error(0, i) for i in players]
    final = max(float(e[-1]) for e in errs)
    tail = max(float(e[len(e) // 2:].mean()) for e in errs)
    return final, tail, trace.increment_std(0)


SUMMARY_HEADER = ("label", "mode", "eta", "batch_size", "final_error", "max_gain_error",
                  "tail_mean_error", "increment_std")


def _run_grid(model, reference, runs, out: Path, runner) -> list:
    """Run each ``(label, cfg)``; writes ``trace_<label>.csv`` files."""
    ref_profile = getattr(reference, "profile", reference)
    rows = []
    for label, cfg in runs:
        try:
            profile, trace = runner(model, cfg, reference)
        except learner.DivergenceDetected as exc:
            if exc.trace is not None:
                exc.trace.to_csv(out / f"trace_{label}.csv")
            raise
        trace.to_csv(out / f"trace_{label}.csv")
        (out / f"profile_{label}.json").write_text(json.dumps(riccati.profile_to_dict(profile)))
        final, tail, inc = _trace_stats(trace)
        gap = profile.max_error(ref_profile) if ref_profile is not None else float("nan")
        rows.append((label, cfg.mode, cfg.rate(0, 0), cfg.batch_size, final, gap, tail, inc))
        print(f"{label}: max gain error {gap:.3e}, tail increment std {inc:.3e}")
    _write_rows(out / "summary.csv", SUMMARY_HEADER, rows)
    return rows


def _grid(tree, cfg, args, default_modes):
    exp = tree["experiment"]
    modes = [args.mode] if args.mode else exp.get("modes", default_modes) or [cfg.mode]
    etas = exp.get("eta_grid", [None])
    batches = exp.get("batch_grid", [None])
    runs = []
    for mode in modes:
        for eta in etas:
            for nb in batches:
                c = replace(cfg, mode=mode)
                label = mode
                if eta is not None:
                    c = replace(c, eta=float(eta))
                    label += f"_eta{eta:g}"
                if nb is not None:
                    c = replace(c, batch_size=int(nb))
                    label += f"_nb{nb}"
                runs.append((label, c))
    return runs


def cmd_run_mrpg(args, tree, out: Path) -> int:
    model = _model(tree)
    cfg = _learner_cfg(tree)
    reference = riccati.solve_clne(model)
    rows = _run_grid(model, reference, _grid(tree, cfg, args, None), out, learner.mrpg_run)
    if tree["experiment"].get("vanilla") and not args.mode:
        rows += _run_grid(model, reference, [("vanilla", cfg)], out, learner.vanilla_npg_run)
        _write_rows(out / "summary.csv", SUMMARY_HEADER, rows)
    return EXIT_OK


def cmd_run_vanilla(args, tree, out: Path) -> int:
    model = _model(tree)
    cfg = _learner_cfg(tree)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    reference = riccati.solve_clne(model)
    _run_grid(model, reference, [("vanilla", cfg)], out, learner.vanilla_npg_run)
    return EXIT_OK


def cmd_run_sp_mrpg(args, tree, out: Path) -> int:
    model = _model(tree)
    cfg = _learner_cfg(tree)
    if args.M is not None:
        cfg = replace(cfg, population=int(args.M))
    reference = riccati.solve_clne(model)
    compare = tree["experiment"].get("compare")
    if compare and not args.batch_size:
        runs = [(f"{mode}_nb{nb}", replace(cfg, mode=mode, batch_size=int(nb))) for mode, nb in compare]
    else:
        c = replace(cfg, mode="zero_order_sample_path")
        if args.batch_size:
            c = replace(c, batch_size=int(args.batch_size))
        runs = [(f"zero_order_sample_path_nb{c.batch_size}", c)]
    _run_grid(model, reference, runs, out, learner.mrpg_run)
    return EXIT_OK


def cmd_run_augmented(args, tree, out: Path) -> int:
    model = _model(tree)
    cfg = _learner_cfg(tree)
    if math.isinf(cfg.proj_radius):
        cfg = replace(cfg, proj_radius=1e3)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    base = riccati.compute_gamma_schedule(model)
    try:
        ne = riccati.solve_clne(model).profile
    except SingularPhi:
        ne = None
    scales = args.gamma_scale or tree["experiment"].get("gamma_scales", [1.0])
    rows = []
    for c in scales:
        g, gb = base.scaled(float(c))
        sched = riccati.solve_augmented(model, g, gb)
        profile, trace = learner.augmented_mrpg_run(model, cfg, sched)
        label = f"gamma_x{float(c):g}"
        trace.to_csv(out / f"trace_{label}.csv")
        err = profile.max_error(sched.profile)
        shift = sched.profile.max_error(ne) if ne is not None else float("nan")
        rows.append((float(c), sched.max_gamma, err, shift))
        print(f"{label}: max gamma {sched.max_gamma:.4f}, error vs augmented NE {err:.3e}, "
              f"augmented-to-true NE gap {shift:.3e}")
    _write_rows(out / "summary.csv", ("gamma_scale", "max_gamma", "error_vs_augmented", "augmented_ne_gap"), rows)
    return EXIT_OK


def cmd_eps_nash_sweep(args, tree, out: Path) -> int:
    model = _model(tree)
    exp = tree["experiment"]
    grid = args.m_grid or exp.get("m_grid", [10, 50, 100, 500, 1000])
    runs = args.runs or exp.get("runs", 2000)
    sol = riccati.solve_clne(model)
    table = dynamics.eps_nash_gap(model, sol.profile, grid, seed=int(tree["learner"]["seed"]),
                                  n_runs=int(runs))
    dynamics.gap_table_to_csv(table, out / "gap.csv")
    lines = []
    for i, (s, se) in enumerate(zip(table.slope, table.slope_stderr)):
        if np.isnan(s):
            lines.append(f"player {i}: slope not applicable (gaps below noise floor)")
        else:
            ok = -1.3 <= s <= -0.7
            lines.append(f"player {i}: slope {s:.3f} +/- {se:.3f}; in [-1.3, -0.7]: {'yes' if ok else 'no'}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_check_diag_dom(args, tree, out: Path) -> int:
    model = _model(tree)
    sol = riccati.solve_clne(model)
    rep = riccati.check_diag_dominance(model, sol)
    rows = [(part, i, t, float(arr[i, t]), bool(arr[i, t] >= 0))
            for part, arr in (("y", rep.margin), ("x", rep.margin_bar))
            for i in range(arr.shape[0]) for t in range(arr.shape[1])]
    _write_rows(out / "margins.csv", ("part", "player", "t", "margin", "holds"), rows)
    print(f"diagonal dominance {'holds' if rep.holds else 'fails'}; min margin "
          f"{min(rep.margin.min(), rep.margin_bar.min()):.6f}")
    if not rep.holds:
        sched = riccati.compute_gamma_schedule(model)
        _write_rows(out / "gamma.csv", ("part", "player", "t", "gamma"),
                    ((part, i, t, float(arr[i, t])) for part, arr in (("y", sched.gamma), ("x", sched.gamma_bar))
                     for i in range(arr.shape[0]) for t in range(arr.shape[1])))
        for part, arr in (("y", sched.gamma), ("x", sched.gamma_bar)):
            for i in range(arr.shape[0]):
                print(f"suggested gamma ({part}, player {i}): " + ", ".join(f"{g:.6f}" for g in arr[i]))
    return EXIT_OK


def cmd_variance_cert(args, tree, out: Path) -> int:
    model = _model(tree)
    if args.profile == "zero":
        profile = PolicyProfile.zeros(model)
    else:
        profile = riccati.solve_clne(model).profile
    rows, phis = [], []
    for part in ("y", "x"):
        for i in range(model.num_players):
            cert = dynamics.variance_certificate(model, profile, i, args.t, part)
            rows.append((part, i, args.t, cert.mean, cert.variance))
            phis.extend((part, i, a, b, float(cert.phi[a, b]))
                        for a in range(cert.phi.shape[0]) for b in range(cert.phi.shape[1]))
    _write_rows(out / "certificate.csv", ("part", "player", "t", "mean", "variance"), rows)
    _write_rows(out / "phi.csv", ("part", "player", "row", "col", "value"), phis)
    for r in rows:
        print(f"{r[0]} player {r[1]}: mean {r[3]:.6g}, variance {r[4]:.6g}")
    return EXIT_OK


COMMANDS = {
    "solve-ne": cmd_solve_ne,
    "solve-olne": cmd_solve_olne,
    "run-mrpg": cmd_run_mrpg,
    "run-sp-mrpg": cmd_run_sp_mrpg,
    "run-augmented": cmd_run_augmented,
    "run-vanilla": cmd_run_vanilla,
    "eps-nash-sweep": cmd_eps_nash_sweep,
    "check-diag-dom": cmd_check_diag_dom,
    "variance-cert": cmd_variance_cert,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lqmftg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config (model, learner, experiment keys)")
        s.add_argument("--preset", help=f"one of: {', '.join(presets.names())}")
        s.add_argument("--seed", type=int, help="master seed (overrides learner.seed)")
        s.add_argument("--out", default="out", help="output directory")
        if name in ("run-mrpg", "run-vanilla", "run-augmented"):
            s.add_argument("--mode", choices=learner.MODES)
        if name == "run-sp-mrpg":
            s.add_argument("--M", type=int, help="agents per team in each rollout")
            s.add_argument("--batch-size", type=int)
        if name == "run-augmented":
            s.add_argument("--gamma-scale", type=float, action="append")
        if name == "eps-nash-sweep":
            s.add_argument("--m-grid", type=int, nargs="+")
            s.add_argument("--runs", type=int, help="Monte-Carlo runs per M")
        if name == "variance-cert":
            s.add_argument("--t", type=int, default=0)
            s.add_argument("--profile", choices=("ne", "zero"), default="ne")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        tree = expand_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, args.command, tree)
        return COMMANDS[args.command](args, tree, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SingularPhi as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except FixedPointDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except learner.DivergenceDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
