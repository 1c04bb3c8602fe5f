"""Command-line runner: ``qdtn <subcommand> --config FILE``.

Every subcommand writes CSV/JSON into the output directory together with
``manifest.json`` (config hash, version, timings). Exit codes: 0 success,
2 configuration or gate error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dtn, experiments, fem, forward, probes, recovery
from .config import ConfigError, ExperimentConfig
from .errors import GateError, SolverError
from .mesh import build_structured_mesh, save_mesh

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


class Run:
    """Output bookkeeping for one invocation."""

    def __init__(self, command, out_dir, cfg_hash, plots=False, dump=False):
        self.command = command
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = cfg_hash
        self.plots = plots
        self.dump = dump
        self.outputs = []
        self.timings = {}
        self._t0 = time.perf_counter()

    def timed(self, label):
        run = self

        class _Timer:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[label] = time.perf_counter() - self.start

        return _Timer()

    def csv(self, name, header, rows):
        path = self.out / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.outputs.append(name)
        return path

    def json(self, name, payload):
        path = self.out / name
        body = {"config_hash": self.hash, **payload}
        with open(path, "w", newline="\n") as fh:
            json.dump(_jsonable(body), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.outputs.append(name)
        return path

    def plot(self, name, draw):
        if not self.plots:
            return
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        matplotlib.rcParams["svg.hashsalt"] = self.hash
        fig, ax = plt.subplots(figsize=(5, 3.5))
        draw(ax)
        fig.tight_layout()
        fig.savefig(self.out / name, format="svg", metadata={"Date": None})
        plt.close(fig)
        self.outputs.append(name)

    def manifest(self, config_source, seed, threads):
        self.timings["total"] = time.perf_counter() - self._t0
        payload = {"command": self.command, "config_hash": self.hash, "config_source": config_source,
                   "version": __version__, "seed": seed, "threads": threads,
                   "timings_seconds": self.timings, "outputs": sorted(self.outputs)}
        with open(self.out / "manifest.json", "w", newline="\n") as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dump_linear_algebra(run, cfg):
    if not run.dump:
        return
    d = run.out / "linear_algebra"
    d.mkdir(exist_ok=True)
    mesh = cfg.mesh
    fem.dump_triplets(d / "stiffness_A.txt", fem.assemble_weighted_stiffness(mesh, 1.0, cfg.A), "stiffness_A")
    fem.dump_triplets(d / "mass.txt", fem.assemble_mass(mesh), "mass")
    S, M = fem.boundary_matrices(mesh)
    fem.dump_triplets(d / "boundary_stiffness.txt", S, "boundary_stiffness")
    fem.dump_triplets(d / "boundary_mass.txt", M, "boundary_mass")
    run.outputs.append("linear_algebra/")


# -- subcommands ----------------------------------------------------------------

def cmd_forward(cfg, run):
    mesh, A = cfg.mesh, cfg.A
    f = cfg.boundary_trace()
    s = cfg.solver
    bd = cfg.get("boundary_data")
    rows, details = [], []
    for fam in cfg.families:
        with run.timed(f"forward[{fam.name}]"):
            u = forward.solve_quasilinear(mesh, fam, A, f, tol=s["picard_tol"], damping=s["damping"],
                                          max_iter=s["max_iter"])
            o = forward.solve_quasilinear_oracle(mesh, fam, A, f)
        oracle_gap = fem.h1_norm(mesh, u.nodal_values - o.nodal_values) / max(o.h1_norm(), 1e-300)
        dev = (float(np.abs(u.nodal_values - bd["value"]).max())
               if bd["kind"] == "constant" else float("nan"))
        row = [fam.name, u.info["iterations"], u.info["residual"], float(np.abs(u.nodal_values).max()),
               float(np.abs(f.nodal_values).max()), u.info["max_principle_gap"], u.h1_norm(),
               oracle_gap, dev]
        rows.append(row)
        details.append(dict(zip(FORWARD_HEADER, row)))
    run.csv("forward.csv", FORWARD_HEADER, rows)
    run.json("forward.json", {"results": details})
    for d in details:
        if np.isfinite(d["max_dev_from_constant"]):
            print(f"{d['family']}: max|u - {bd['value']}| = {d['max_dev_from_constant']:.3e}")
        print(f"{d['family']}: iterations={d['iterations']} oracle_rel_h1_gap={d['oracle_rel_h1_gap']:.3e}")


FORWARD_HEADER = ["family", "iterations", "residual", "max_abs_u", "max_abs_f", "max_principle_gap",
                  "h1_norm", "oracle_rel_h1_gap", "max_dev_from_constant"]


def cmd_dtn(cfg, run):
    mesh, A, chi = cfg.mesh, cfg.A, cfg.chi
    t = float(cfg.get("t", 0.0))
    ctx = fem.build_norm_context(mesh)
    with run.timed("linear_dtn"):
        L = dtn.linear_dtn_matrix(mesh, A, chi=chi, threads=cfg.threads)
    nL = dtn.operator_norm(L, ctx, seed=cfg.seed)
    L.to_csv(run.out / "dtn_linear.csv", f"config_hash={run.hash}")
    run.outputs.append("dtn_linear.csv")
    rows = []
    for k, fam in enumerate(cfg.families):
        with run.timed(f"frechet[{fam.name}]"):
            D = dtn.frechet_dtn_matrix(mesh, fam, A, t, chi=chi, threads=cfg.threads)
        name = f"dtn_frechet_{k}.csv"
        D.to_csv(run.out / name, f"config_hash={run.hash}")
        run.outputs.append(name)
        at = float(fam.a(t))
        nD = dtn.operator_norm(D, ctx, seed=cfg.seed)
        gap = dtn.operator_norm(D - at * L, ctx, seed=cfg.seed) / (at * nL)
        rows.append([fam.name, t, nD, at * nL, gap])
    run.csv("dtn_norms.csv", ["family", "t", "opnorm_frechet", "opnorm_a_t_linear", "factorization_rel_gap"], rows)
    run.json("dtn.json", {"t": t, "gamma0_dofs": len(mesh.gamma0_dofs), "linear_opnorm": nL,
                          "families": [dict(zip(["family", "t", "opnorm", "a_t_linear_opnorm", "rel_gap"], r))
                                       for r in rows]})


def cmd_frechet_check(cfg, run):
    mesh, A = cfg.mesh, cfg.A
    t = float(cfg.get("t", 0.5))
    eps = cfg.get("epsilons", [1e-1, 3e-2, 1e-2, 3e-3])
    h = experiments.gamma0_bump(mesh)
    ctx = fem.build_norm_context(mesh)
    rows, reports = [], {}
    for fam in cfg.families:
        with run.timed(f"fd[{fam.name}]"):
            rep = dtn.frechet_fd_validation(mesh, fam, A, t, h, eps, tol=cfg.solver["picard_tol"],
                                            context=ctx, chi=cfg.chi)
        reports[fam.name] = rep.as_dict()
        rows.extend([fam.name, t, e, r] for e, r in zip(rep.epsilons, rep.errors))
        print(f"{fam.name}: slope={rep.slope}")
    run.csv("frechet_check.csv", ["family", "t", "epsilon", "remainder"], rows)
    run.json("frechet_check.json", {"t": t, "reports": reports})

    def draw(ax):
        for name, r in reports.items():
            ax.loglog(r["epsilons"], np.maximum(r["errors"], 1e-300), "o-", label=name)
        ax.set_xlabel("epsilon")
        ax.set_ylabel("Taylor remainder")
        ax.legend()
    run.plot("frechet_check.svg", draw)


def probe_sweep_rows(cfg):
    mesh, spec = cfg.mesh, cfg.probe_spec
    p = probes.Parametrix(cfg.A)
    ctx = fem.build_norm_context(mesh)
    inner = cfg.get("probe").get("inner_radius")
    rows = []
    for d in sorted(cfg.deltas, reverse=True):
        pr = probes.build_probe(p, spec, mesh, d, inner)
        K = probes.normalization_integral(p, p, mesh, pr.y_delta)
        rep = probes.remainder_diagnostic(mesh, pr)
        rows.append([d, ctx.function_norm(pr.trace_f_delta.nodal_values, 0.5), K, rep.z_h1, rep.ell_n])
    return rows


def cmd_probe_sweep(cfg, run):
    with run.timed("probe_sweep"):
        rows = probe_sweep_rows(cfg)
    header = ["delta", "f_delta_h_half_norm", "K_delta", "z_delta_h1", "ell_n"]
    run.csv("probe_sweep.csv", header, rows)
    run.json("probe_sweep.json", {"rows": [dict(zip(header, r)) for r in rows]})

    def draw(ax):
        arr = np.array(rows, dtype=float)
        ax.loglog(arr[:, 0], arr[:, 2], "o-", label="K_delta")
        ax.loglog(arr[:, 0], arr[:, 3], "s-", label="||z_delta||_H1")
        ax.set_xlabel("delta")
        ax.legend()
    run.plot("probe_sweep.svg", draw)


STABILITY_HEADER = ["t", "a1_t", "a2_t", "recovered_diff", "opnorm_diff"]


def _stability_rows(fam1, fam2, res):
    a1, a2 = fam1.a(res.t_grid), fam2.a(res.t_grid)
    return [[t, x, y, r, o] for t, x, y, r, o in zip(res.t_grid, a1, a2, res.recovered_diff, res.per_t_opnorm)]


def cmd_recover(cfg, run):
    fam1, fam2 = cfg.pairs[0]
    mode = cfg.get("mode", "PAIRING_RATIO")
    with run.timed("recover"):
        res = recovery.recover_a_difference(fam1, fam2, cfg.A, cfg.mesh, cfg.probe_spec,
                                            float(cfg.get("tau", 1.0)), int(cfg.get("t_count", 17)),
                                            mode, cfg.threads, delta=min(cfg.deltas), chi=cfg.chi)
    run.csv("recover.csv", STABILITY_HEADER, _stability_rows(fam1, fam2, res))
    err = np.abs(res.recovered_diff - res.true_diff)
    run.json("recover.json", {"a1": fam1.name, "a2": fam2.name, "mode": res.normalization_mode.value,
                              "max_abs_error": float(err.max()), **res.meta})
    print(f"{fam1.name} vs {fam2.name}: max |recovered - true| = {err.max():.3e}")


def cmd_stability(cfg, run):
    mode = cfg.get("mode", "PAIRING_RATIO")
    with run.timed("stability"):
        rep = recovery.stability_experiment(cfg.pairs, cfg.A, cfg.mesh, cfg.probe_spec,
                                            float(cfg.get("tau", 1.0)), int(cfg.get("t_count", 17)),
                                            mode, cfg.threads, delta=min(cfg.deltas), chi=cfg.chi)
    for k, pr in enumerate(rep.pairs):
        fam1, fam2 = cfg.pairs[k]
        run.csv(f"stability_pair{k}.csv", STABILITY_HEADER, _stability_rows(fam1, fam2, pr.result))
    run.json("stability_summary.json", rep.summary())
    print(f"C_measured = {rep.C_measured:.10g} (spread {rep.spread:.2e}, "
          f"1/||chi Lambda^A|| = {1.0 / rep.reference_opnorm:.10g})")

    def draw(ax):
        for pr in rep.pairs:
            res = pr.result
            ax.plot(res.t_grid, res.true_diff, "-", label=f"{pr.name1} - {pr.name2}")
            ax.plot(res.t_grid, res.recovered_diff, "o", ms=3)
        ax.set_xlabel("t")
        ax.legend(fontsize=7)
    run.plot("stability.svg", draw)


def cmd_appendix_suite(cfg, run):
    app = cfg.get("appendix", {})
    with run.timed("coercivity"):
        rows = experiments.coercivity_battery(cfg.mesh, app.get("cases", 20), cfg.seed)
    header = ["case", "c", "scale", "drift_sup", "threshold", "accepted", "solved", "expected"]
    run.csv("appendix_coercivity.csv", header, [[r[k] for k in header] for r in rows])
    with run.timed("manufactured"):
        study = experiments.manufactured_study(tuple(app.get("resolutions", [8, 16, 32])))
    mrows = []
    for form, s in study.items():
        for N, e, c in zip(s["resolutions"], s["l2_errors"], s["energy_constants"]):
            mrows.append([form, N, e, c])
    run.csv("appendix_manufactured.csv", ["form", "resolution", "l2_error", "energy_constant"], mrows)
    false_accepts = sum(r["accepted"] and not r["expected"] for r in rows)
    mismatches = sum(r["accepted"] != r["expected"] for r in rows)
    run.json("appendix.json", {"false_accepts": false_accepts, "gate_mismatches": mismatches,
                               "manufactured": study})
    print(f"gate mismatches={mismatches}; orders: "
          + ", ".join(f"{k}={min(v['orders']):.3f}" for k, v in study.items()))


def cmd_mesh(cfg, run, out_file):
    mesh = cfg.mesh
    path = Path(out_file) if out_file else run.out / "mesh.qm"
    save_mesh(mesh, path)
    run.outputs.append(str(path.name))
    print(f"wrote {path}: {mesh.n_vertices} vertices, {mesh.n_cells} cells, h={mesh.mesh_size_h:.4g}")


COMMANDS = {
    "forward": cmd_forward,
    "dtn": cmd_dtn,
    "frechet-check": cmd_frechet_check,
    "probe-sweep": cmd_probe_sweep,
    "recover": cmd_recover,
    "stability": cmd_stability,
    "appendix-suite": cmd_appendix_suite,
}

NEEDS_REGIONS = {"dtn", "frechet-check", "probe-sweep", "recover", "stability"}


def build_parser():
    parser = argparse.ArgumentParser(prog="qdtn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qdtn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required)
        p.add_argument("--out-dir")
        p.add_argument("--threads", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--plots", action="store_true")
        p.add_argument("--dump-linear-algebra", action="store_true")

    pm = sub.add_parser("mesh", help="build and save a structured mesh")
    common(pm, config_required=False)
    pm.add_argument("--domain", choices=["unit_square", "unit_cube"])
    pm.add_argument("--res", type=int)
    pm.add_argument("--out")
    for name in COMMANDS:
        common(sub.add_parser(name))
    return parser


def _load(args):
    overrides = {"threads": args.threads, "seed": args.seed, "output_dir": args.out_dir}
    if args.config:
        return ExperimentConfig.load(args.config, **overrides)
    if args.command == "mesh" and args.domain and args.res:
        return ExperimentConfig.from_dict({"mesh": {"domain": args.domain, "resolution": args.res}},
                                          "<cli>", **overrides)
    raise ConfigError("need --config (or --domain and --res for 'mesh')")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "mesh" and args.domain and args.res:
            raw = dict(cfg.raw, mesh={"domain": args.domain, "resolution": args.res})
            cfg = ExperimentConfig.from_dict(raw, cfg.source)
        cfg.prepare()
        if args.command in NEEDS_REGIONS and cfg.get("regions") is None:
            raise ConfigError(f"'{args.command}' needs a 'regions' entry")
        run = Run(args.command, cfg.output_dir, cfg.hash, args.plots, args.dump_linear_algebra)
        if args.command == "mesh":
            cmd_mesh(cfg, run, args.out)
        else:
            COMMANDS[args.command](cfg, run)
        _dump_linear_algebra(run, cfg)
        run.manifest(cfg.source, cfg.seed, cfg.threads)
    except (ConfigError, GateError, FileNotFoundError) as exc:
        print(f"qdtn: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"qdtn: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
