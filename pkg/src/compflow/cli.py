"""Command-line front end for the component-network flow solver.

Subcommands cover meshing, full-order and domain-decomposition solves,
reduced-order solves, the offline training pipeline, adaptive enrichment,
test-set evaluation and the two study commands (formulation comparison and
interface-control refinement).  Every command writes its artifacts plus a
run manifest into ``--out``.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io as cfio
from .geometry import (ArchetypeLabel, NetworkConfig, build_network,
                       random_tree_config)
from .mesh import make_space
from .fem import SolverError, instantiate_network, solve_monolithic
from .ddopt import (NEW, STANDARD, DDProblem, GNMDivergenceError,
                    RankDeficiencyError, compare_formulations, gnm_solve,
                    h_star_refinement_study, jump_norms, sqp_solve)
from .rom import (RankDeficiencyError as RomRankError, ReducedSolveError,
                  eval_errors, eval_port_errors, rom_dd_solve)
from .training import (BoundarySampler, MarkingPolicy, TrainingError,
                       adaptive_enrichment, localized_state_training,
                       pairwise_port_training, port_based_state_enrichment,
                       _rom_setup_for)

HARD_ERRORS = (SolverError, GNMDivergenceError, RankDeficiencyError,
               ReducedSolveError, TrainingError, np.linalg.LinAlgError)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, extra_hash: str = "") -> cfio.RunManifest:
    return cfio.RunManifest(
        command=" ".join(getattr(args, "_argv", None) or sys.argv[1:])
        or args.command,
        config_hash=extra_hash,
        seed=getattr(args, "seed", None),
    )


def _emit(man: cfio.RunManifest, out: Path, *paths) -> None:
    for p in paths:
        man.add_output(Path(p).name)
    man.record("total")
    man.save(out)


def _load_network(args):
    config = cfio.load_config(args.config)
    if getattr(args, "Re", None) is not None:
        config.Re = float(args.Re)
    net = build_network(config)
    comps = instantiate_network(net, args.res)
    return config, net, comps


def _write_states(out: Path, comps, states) -> list[Path]:
    paths = []
    for comp, w in zip(comps, states):
        p = out / f"state_{comp.index:03d}.bin"
        cfio.save_snapshot(p, w, {
            "label": comp.label.value, "mu": comp.mu.to_dict(),
            "component": comp.index, "n_dofs": comp.n_dofs,
        })
        paths.append(p)
    return paths


def _port_profiles(out: Path, problem, s) -> list[Path]:
    paths = []
    layout = problem.layout
    for p in problem.ports:
        full = layout.C[p.index] @ s[layout.slices[p.index]]
        n_t = full.size // 3
        xi = np.linspace(0.0, 1.0, n_t)
        path = out / f"port_{p.index:03d}.csv"
        cfio.write_port_profile(path, xi, {
            "g_x": full[:n_t], "g_y": full[n_t:2 * n_t], "h": full[2 * n_t:],
        })
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# subcommands

def cmd_mesh(args) -> int:
    out = _outdir(args)
    man = _manifest(args)
    space = make_space(ArchetypeLabel(args.label), args.res)
    paths = cfio.write_mesh_csv(space, out)
    _emit(man, out, *paths)
    return 0


def cmd_solve_fom(args) -> int:
    out = _outdir(args)
    config, net, comps = _load_network(args)
    man = _manifest(args, cfio.config_hash(config))
    states, _ = solve_monolithic(comps, net)
    paths = _write_states(out, comps, states)
    _emit(man, out, *paths)
    return 0


def cmd_solve_dd(args) -> int:
    out = _outdir(args)
    config, net, comps = _load_network(args)
    man = _manifest(args, cfio.config_hash(config))
    form = NEW if args.formulation == "new" else STANDARD
    problem = DDProblem(comps=comps, ports=net.ports, formulation=form,
                        delta=args.delta)
    solver = sqp_solve if args.solver == "sqp" else gnm_solve
    res = solver(problem, tol=args.tol, maxit=args.maxit)
    log_path = out / "convergence.csv"
    cfio.write_convergence_log(log_path, res.log)
    by_comp = {loc.comp.index: loc for loc in res.locals_}
    jumps = jump_norms(problem, by_comp)
    jump_path = out / "jumps.csv"
    cfio.write_csv(jump_path, ["port", "velocity_jump_sq", "pressure_jump_sq"],
                   [(pi, j["velocity_sq"], j["pressure_sq"])
                    for pi, j in sorted(jumps.items())])
    paths = _write_states(out, comps, res.states)
    paths += _port_profiles(out, problem, res.s)
    _emit(man, out, log_path, jump_path, *paths)
    return 0 if res.converged else 3


def _load_bases(bases_dir):
    bases_dir = Path(bases_dir)
    W, _ = cfio.load_basis(bases_dir / "ports.basis")
    Z = {}
    for lab in ArchetypeLabel:
        p = bases_dir / f"state_{lab.value}.basis"
        if p.exists():
            Z[lab], _ = cfio.load_basis(p)
    return W, Z


def cmd_solve_rom(args) -> int:
    out = _outdir(args)
    config, net, comps = _load_network(args)
    man = _manifest(args, cfio.config_hash(config))
    W, Z = _load_bases(args.bases)
    ctrl_bases, setup = _rom_setup_for(net, comps, W, Z, args.mode)
    for item in args.assign or []:
        idx, mode = item.split("=")
        setup.modes[int(idx.removeprefix("comp"))] = mode
    problem = DDProblem(comps=comps, ports=net.ports, formulation=NEW,
                        delta=args.delta, control_bases=ctrl_bases)
    res = rom_dd_solve(problem, setup, method=args.solver, tol=args.tol,
                       maxit=args.maxit)
    log_path = out / "convergence.csv"
    cfio.write_convergence_log(log_path, res.log)
    paths = _write_states(out, comps, res.states)
    paths += _port_profiles(out, problem, res.s)
    _emit(man, out, log_path, *paths)
    return 0 if res.converged else 3


def cmd_train_ports(args) -> int:
    out = _outdir(args)
    man = _manifest(args)
    rng = np.random.default_rng(args.seed)
    sampler = BoundarySampler(Re_range=(args.re_min, args.re_max))
    W = pairwise_port_training(rng, sampler, n_loc_s=args.nloc, m0=args.m0,
                               res=args.res)
    path = out / "ports.basis"
    cfio.save_basis(path, W, norm="port_h1",
                    extra={"res": args.res, "seed": args.seed})
    _emit(man, out, path, path.with_suffix(".basis.json"))
    return 0


def cmd_train_states(args) -> int:
    out = _outdir(args)
    man = _manifest(args)
    rng = np.random.default_rng(args.seed)
    sampler = BoundarySampler(Re_range=(args.re_min, args.re_max))
    W, _ = cfio.load_basis(Path(args.ports) / "ports.basis")
    Z, data = localized_state_training(
        W, rng, sampler, n_networks=args.networks,
        n_comp_max=args.max_components, n0=args.n0, res=args.res)
    if args.port_modes > 0:
        Z = port_based_state_enrichment(Z, W, data, res=args.res,
                                        n_new=args.port_modes)
    paths = []
    wpath = out / "ports.basis"
    cfio.save_basis(wpath, W, norm="port_h1", extra={"res": args.res})
    paths.append(wpath)
    for lab, basis in Z.items():
        p = out / f"state_{lab.value}.basis"
        cfio.save_basis(p, basis, norm="state_x",
                        extra={"res": args.res, "seed": args.seed})
        paths.append(p)
    _emit(man, out, *paths)
    return 0


def cmd_enrich(args) -> int:
    out = _outdir(args)
    man = _manifest(args)
    rng = np.random.default_rng(args.seed)
    W, Z = _load_bases(args.bases)
    policy = MarkingPolicy(maxit=args.maxit, n_glo=args.nglo, m_glo=args.mglo,
                           n_train_glo=args.ntrain,
                           n_components=args.components)
    result = adaptive_enrichment(policy, W, Z, rng, res=args.res,
                                 mode=args.mode)
    paths = []
    wpath = out / "ports.basis"
    cfio.save_basis(wpath, result.W, norm="port_h1", extra={"res": args.res})
    paths.append(wpath)
    for lab, basis in result.Z.items():
        p = out / f"state_{lab.value}.basis"
        cfio.save_basis(p, basis, norm="state_x", extra={"res": args.res})
        paths.append(p)
    hist_path = out / "history.csv"
    rows = []
    for h in result.history:
        te = h.get("test_errors") or {}
        rows.append((h["iteration"], h["m"],
                     max(h["n"].values()) if h["n"] else 0, h["skipped"],
                     te.get("median", math.nan), te.get("mean", math.nan)))
    cfio.write_csv(hist_path,
                   ["it", "m", "n_max", "skipped", "median_err", "mean_err"],
                   rows)
    paths.append(hist_path)
    _emit(man, out, *paths)
    return 0


def cmd_eval(args) -> int:
    out = _outdir(args)
    man = _manifest(args)
    W, Z = _load_bases(args.bases)
    rows, prow = [], []
    for cfg_path in sorted(Path(args.test_set).glob("*.json")):
        if cfg_path.name == "manifest.json":
            continue
        config = cfio.load_config(cfg_path)
        net = build_network(config)
        comps = instantiate_network(net, args.res)
        ref_problem = DDProblem(comps=comps, ports=net.ports, formulation=NEW,
                                delta=args.delta)
        ref = sqp_solve(ref_problem)
        ctrl_bases, setup = _rom_setup_for(net, comps, W, Z, args.mode)
        problem = DDProblem(comps=comps, ports=net.ports, formulation=NEW,
                            delta=args.delta, control_bases=ctrl_bases)
        try:
            res = rom_dd_solve(problem, setup, maxit=args.maxit)
        except HARD_ERRORS as exc:
            print(f"{cfg_path.name}: reduced solve failed: {exc}",
                  file=sys.stderr)
            for comp in comps:
                rows.append((cfg_path.stem, comp.index, comp.label.value,
                             math.inf))
            continue
        errs = eval_errors([res.states], [ref.states], comps)
        for comp in comps:
            rows.append((cfg_path.stem, comp.index, comp.label.value,
                         errs["component"][comp.index]))
        s_rom = np.zeros(ref_problem.layout.n)
        for p in net.ports:
            sl = problem.layout.slices[p.index]
            s_rom[ref_problem.layout.slices[p.index]] = \
                problem.layout.C[p.index] @ res.s[sl]
        perr = eval_port_errors([s_rom], [ref.s], ref_problem.layout)
        for pi, v in sorted(perr.items(), key=lambda kv: str(kv[0])):
            if pi != "mean":
                prow.append((cfg_path.stem, pi, v))
    state_path = out / "state_errors.csv"
    cfio.write_csv(state_path, ["network", "component", "label", "E_avg"], rows)
    port_path = out / "port_errors.csv"
    cfio.write_csv(port_path, ["network", "port", "E_avg_port"], prow)
    finite = [r[3] for r in rows if math.isfinite(r[3])]
    summary_path = out / "summary.csv"
    cfio.write_csv(summary_path, ["median_E_avg", "mean_E_avg", "n_failed"],
                   [(float(np.median(finite)) if finite else math.inf,
                     float(np.mean(finite)) if finite else math.inf,
                     sum(1 for r in rows if not math.isfinite(r[3])))])
    _emit(man, out, state_path, port_path, summary_path)
    return 0


def cmd_make_test_set(args) -> int:
    out = _outdir(args)
    man = _manifest(args)
    rng = np.random.default_rng(args.seed)
    paths = []
    for k in range(args.networks):
        cfg = random_tree_config(rng, args.components,
                                 Re_range=(args.re_min, args.re_max))
        p = out / f"net_{k:03d}.json"
        cfio.save_config(cfg, p)
        paths.append(p)
    _emit(man, out, *paths)
    return 0


def cmd_compare_formulations(args) -> int:
    out = _outdir(args)
    config, net, comps = _load_network(args)
    man = _manifest(args, cfio.config_hash(config))
    mono, _ = solve_monolithic(comps, net)
    report = compare_formulations(comps, net.ports, mono_states=mono,
                                  delta=args.delta)
    path = out / "formulations.csv"
    keys = ["pressure_jump_l2", "velocity_jump_l2", "state_error_rel",
            "iterations", "converged"]
    cfio.write_csv(path, ["formulation"] + keys,
                   [(name, *[entry.get(k, "") for k in keys])
                    for name, entry in report.items()])
    _emit(man, out, path)
    return 0


def cmd_hstar_study(args) -> int:
    out = _outdir(args)
    man = _manifest(args)
    rows = h_star_refinement_study(tuple(args.cells), delta=args.delta)
    path = out / "hstar.csv"
    cfio.write_csv(path, ["cells", "h_star_l2", "objective", "jump"],
                   [(r["cells"], r["h_star_l2"], r["objective"], r["jump"])
                    for r in rows])
    _emit(man, out, path)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="compflow",
        description="Steady flow networks of parameterized components: "
                    "FE/DD/ROM solvers and the offline training pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=False, seed=False, re_range=False):
        p.add_argument("--out", default="out", help="artifact directory")
        p.add_argument("--res", type=int, default=4, help="mesh resolution")
        if config:
            p.add_argument("--config", required=True, help="network JSON")
            p.add_argument("--delta", type=float, default=1e-8)
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if re_range:
            p.add_argument("--re-min", type=float, default=50.0)
            p.add_argument("--re-max", type=float, default=150.0)

    p = sub.add_parser("mesh", help="emit a reference mesh as CSV")
    p.add_argument("--label", required=True,
                   choices=[l.value for l in ArchetypeLabel])
    common(p)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("solve-fom", help="monolithic full-order solve")
    common(p, config=True)
    p.set_defaults(func=cmd_solve_fom)

    p = sub.add_parser("solve-dd", help="optimization-based DD solve")
    common(p, config=True)
    p.add_argument("--formulation", choices=["new", "standard"], default="new")
    p.add_argument("--solver", choices=["sqp", "gnm"], default="sqp")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--maxit", type=int, default=50)
    p.set_defaults(func=cmd_solve_dd)

    p = sub.add_parser("solve-rom", help="reduced-order DD solve")
    common(p, config=True)
    p.add_argument("--bases", required=True, help="directory with basis files")
    p.add_argument("--assign", nargs="*", metavar="compI=MODE",
                   help="per-component override, e.g. comp3=fom")
    p.add_argument("--mode", choices=["minres", "galerkin"], default="minres")
    p.add_argument("--solver", choices=["sqp", "gnm"], default="sqp")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--maxit", type=int, default=50)
    p.set_defaults(func=cmd_solve_rom)

    p = sub.add_parser("train-ports", help="pairwise port-control training")
    common(p, seed=True, re_range=True)
    p.add_argument("--nloc", type=int, default=15,
                   help="samples per connection type")
    p.add_argument("--m0", type=int, default=10)
    p.set_defaults(func=cmd_train_ports)

    p = sub.add_parser("train-states", help="localized state-space training")
    common(p, seed=True, re_range=True)
    p.add_argument("--ports", required=True,
                   help="directory containing ports.basis")
    p.add_argument("--networks", type=int, default=20)
    p.add_argument("--max-components", type=int, default=4)
    p.add_argument("--n0", type=int, default=10)
    p.add_argument("--port-modes", type=int, default=10,
                   help="port-sensitivity enrichment modes (0 disables)")
    p.set_defaults(func=cmd_train_states)

    p = sub.add_parser("enrich", help="adaptive basis enrichment")
    common(p, seed=True)
    p.add_argument("--bases", required=True)
    p.add_argument("--maxit", type=int, default=2)
    p.add_argument("--mglo", dest="mglo", type=int, default=10)
    p.add_argument("--nglo", dest="nglo", type=int, default=10)
    p.add_argument("--ntrain", type=int, default=12)
    p.add_argument("--components", type=int, default=6)
    p.add_argument("--mode", choices=["minres", "galerkin"], default="minres")
    p.set_defaults(func=cmd_enrich)

    p = sub.add_parser("make-test-set", help="sample random test networks")
    common(p, seed=True, re_range=True)
    p.add_argument("--networks", type=int, default=10)
    p.add_argument("--components", type=int, default=6)
    p.set_defaults(func=cmd_make_test_set)

    p = sub.add_parser("eval", help="evaluate bases on a test set")
    common(p)
    p.add_argument("--bases", required=True)
    p.add_argument("--test-set", required=True, dest="test_set")
    p.add_argument("--delta", type=float, default=1e-8)
    p.add_argument("--mode", choices=["minres", "galerkin"], default="minres")
    p.add_argument("--maxit", type=int, default=50)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-formulations",
                       help="new-vs-standard formulation table")
    common(p, config=True)
    p.add_argument("--Re", type=float, default=None)
    p.set_defaults(func=cmd_compare_formulations)

    p = sub.add_parser("hstar-study", help="interface-control refinement study")
    p.add_argument("--out", default="out")
    p.add_argument("--cells", type=int, nargs="+", default=[4, 8, 16])
    p.add_argument("--delta", type=float, default=1e-8)
    p.set_defaults(func=cmd_hstar_study)

    return ap


def main(argv=None) -> int:
    threads = os.environ.get("COMPFLOW_THREADS")
    if threads:
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(int(threads))
        except ImportError:
            pass
    args = build_parser().parse_args(argv)
    args._argv = list(argv) if argv is not None else sys.argv[1:]
    try:
        return args.func(args)
    except HARD_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
