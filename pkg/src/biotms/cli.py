"""Command-line interface.

Subcommands: ``mesh``, ``offline``, ``solve-fine``, ``solve-coarse``,
``sweep``, ``report``. Experiment commands read a flat config file and
accept per-key overrides; ``BIOTMS_WORKERS`` sizes the sweep worker pool.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import experiment, report, vtkio
from .coarse_solver import (CoarseBasis, constrained_dof_map, initial_pressure_field,
                            project, run_coarse)
from .config import ConfigError, ExperimentConfig, apply_overrides, parse_config
from .fine_solver import FineSolver, ProblemData, SchemeConfig, trajectory_diagnostics_csv
from .material import build_case
from .mesh import build_coarse_grid, build_fine_mesh
from .metrics import ErrorNorms, compare_trajectories
from .offline import build_offline, material_signature


def _add_override_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="flat key = value config file")
    p.add_argument("--fine-n", dest="fine_n", type=int, default=None)
    p.add_argument("--coarse-n", dest="coarse_n", type=int, default=None)
    p.add_argument("--case", type=int, default=None)
    p.add_argument("--geometry", type=str, default=None,
                   help="'default', 'generate:<seed>' or a raster file")
    p.add_argument("--scheme", choices=("coupled", "fixed_stress"), default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--noff-p", dest="noff_p", type=str, default=None,
                   help="comma list of pressure mode counts")
    p.add_argument("--noff-u", dest="noff_u", type=str, default=None,
                   help="comma list of displacement mode counts")
    p.add_argument("--snapshots", choices=("delta", "random"), default=None)
    p.add_argument("--snapshot-ratio", dest="snapshot_ratio", type=float, default=None)
    p.add_argument("--oversample-t", dest="oversample_t", type=str, default=None,
                   help="comma list of oversampling layer counts")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pou", choices=("multiscale", "linear"), default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--no-vtk", action="store_true", help="skip VTK field output")
    p.add_argument("--output", dest="output_dir", type=str, default=None)


def _config_from_args(args) -> ExperimentConfig:
    config = parse_config(args.config) if args.config else ExperimentConfig()
    overrides = {key: getattr(args, key, None) for key in (
        "fine_n", "coarse_n", "case", "geometry", "scheme", "tau", "steps",
        "noff_p", "noff_u", "snapshots", "snapshot_ratio", "oversample_t",
        "seed", "pou", "workers", "output_dir")}
    if getattr(args, "no_vtk", False):
        overrides["write_vtk"] = False
    return apply_overrides(config, overrides)


def _setup(config: ExperimentConfig):
    mesh = build_fine_mesh(config.fine_n)
    cg = build_coarse_grid(mesh, config.coarse_n)
    material = build_case(config.case, experiment.load_geometry(config), mesh)
    return mesh, cg, material


def cmd_mesh(args) -> int:
    config = _config_from_args(args)
    mesh, cg, material = _setup(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    vtkio.write_vtk(out / "mesh.vtk", mesh,
                    point_scalars={"boundary_tag": mesh.boundary_tag.astype(float)},
                    cell_scalars={"subdomain": material.labels})
    print(f"fine: {mesh.n_nodes} nodes, {mesh.n_cells} cells")
    print(f"coarse: {cg.n_cnodes} nodes, {cg.n_ccells} cells "
          f"({cg.cell_to_fine.shape[1]} fine cells each)")
    print(f"coupled fine dimension: {3 * mesh.n_nodes}")
    print(f"wrote {out / 'mesh.vtk'}")
    return 0


def cmd_offline(args) -> int:
    config = _config_from_args(args)
    mesh, cg, material = _setup(config)
    basis = build_offline(
        mesh, cg, material, n_off_p=max(config.noff_p), n_off_u=max(config.noff_u),
        snapshots=config.snapshots, snapshot_ratio=config.snapshot_ratio,
        layers=config.oversample_t[0], seed=config.seed, pou_variant=config.pou,
        constrained_dofs=constrained_dof_map(mesh, ProblemData()),
    )
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "offline_basis.npz"
    basis.save(path)
    dims = {n: basis.coarse_dimension(n, n)
            for n in sorted(set(config.noff_p) | set(config.noff_u))}
    print(f"offline basis: {basis.meta['snapshots']} snapshots, "
          f"t={basis.meta['oversample_layers']}, material {material_signature(material)}")
    print("coarse dimensions (noff -> dim):", dims)
    print(f"wrote {path}")
    return 0


def cmd_solve_fine(args) -> int:
    config = _config_from_args(args)
    mesh, cg, material = _setup(config)
    scheme = SchemeConfig(scheme=config.scheme, tau=config.tau, n_steps=config.steps,
                          fs_inner_iterations=config.fs_inner)
    solver = FineSolver(mesh, material, ProblemData(), scheme)
    traj = solver.run()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    trajectory_diagnostics_csv(traj, out / "diagnostics.csv")
    if config.write_vtk:
        for i, t in enumerate(traj.times):
            vtkio.write_vtk(out / f"step_{i:04d}.vtk", mesh,
                            point_scalars={"pressure": traj.pressure[i]},
                            point_vectors={"displacement": traj.displacement[i]},
                            cell_scalars={"subdomain": material.labels})
    print(f"fine {config.scheme} solve: dim {solver.coupled_dimension}, "
          f"{config.steps} steps of tau={config.tau}")
    print(f"wrote {out / 'diagnostics.csv'}")
    return 0


def cmd_solve_coarse(args) -> int:
    config = _config_from_args(args)
    mesh, cg, material = _setup(config)
    problem = ProblemData()
    scheme = SchemeConfig(scheme=config.scheme, tau=config.tau, n_steps=config.steps,
                          fs_inner_iterations=config.fs_inner)
    noff_p, noff_u = config.noff_p[0], config.noff_u[0]

    fine = FineSolver(mesh, material, problem, scheme)
    reference = fine.run()
    basis_all = build_offline(
        mesh, cg, material, n_off_p=noff_p, n_off_u=noff_u,
        snapshots=config.snapshots, snapshot_ratio=config.snapshot_ratio,
        layers=config.oversample_t[0], seed=config.seed, pou_variant=config.pou,
        constrained_dofs=constrained_dof_map(mesh, problem),
    )
    basis = CoarseBasis.from_offline(basis_all, problem, noff_p, noff_u)
    system = project(fine.ops, basis, scheme, load=fine.load)
    traj = run_coarse(system, initial_pressure_field(mesh, problem))
    displacement, pressure = traj.prolonged()
    norms = ErrorNorms(mesh, material)
    errors = compare_trajectories(norms, reference.times, reference.pressure,
                                  reference.displacement, pressure, displacement)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    errors.to_csv(out / "errors.csv")
    if config.write_vtk:
        vtkio.write_vtk(out / "coarse_final.vtk", mesh,
                        point_scalars={"pressure": pressure[-1]},
                        point_vectors={"displacement": displacement[-1]},
                        cell_scalars={"subdomain": material.labels})
    e = errors.endpoint()
    print(f"coarse solve: dim {traj.dim} (noff_p={noff_p}, noff_u={noff_u}, "
          f"t={config.oversample_t[0]})")
    print(f"endpoint relative errors: L2_p={e['l2_p']:.4e} H1_p={e['h1_p']:.4e} "
          f"L2_u={e['l2_u']:.4e} H1_u={e['h1_u']:.4e}")
    print(f"wrote {out / 'errors.csv'}")
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    out = experiment.run(config)
    print(f"sweep complete: {out / 'errors_endpoint.csv'}")
    print(f"manifest: {out / 'manifest.json'}")
    return 0


def cmd_report(args) -> int:
    out = report.generate(args.run_dir)
    print(f"report written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biotms",
        description="Fine-scale and multiscale FEM solvers for linear Biot poroelasticity")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (
        ("mesh", cmd_mesh, "build the nested grids and dump a VTK mesh"),
        ("offline", cmd_offline, "build and archive the offline multiscale basis"),
        ("solve-fine", cmd_solve_fine, "run the fine-scale reference solver"),
        ("solve-coarse", cmd_solve_coarse, "run one coarse solve against the reference"),
        ("sweep", cmd_sweep, "run the configured experiment sweep"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_override_flags(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("report", help="render tables and figures for a finished run")
    p.add_argument("--run-dir", required=True, help="sweep output directory")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
