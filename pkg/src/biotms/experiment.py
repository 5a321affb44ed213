"""Experiment orchestration: fine reference, offline cache, coarse sweeps.

A run executes one (case, scheme) configuration: the fine reference is
solved once, offline bases are built per oversampling level (cached by a
hash of everything that determines them) and the coarse solves sweep the
requested mode counts. Every sweep cell writes its own files, so cells
can run on a worker pool without contention; failures are recorded per
cell without aborting the sweep.
"""

import hashlib
import json
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import vtkio
from .config import ExperimentConfig, write_config
from .coarse_solver import (CoarseBasis, constrained_dof_map, initial_pressure_field,
                            project, run_coarse)
from .fine_solver import (FineSolver, ProblemData, SchemeConfig,
                          trajectory_diagnostics_csv)
from .material import (SubdomainGeometry, build_case, default_geometry,
                       generate_geometry, read_geometry)
from .mesh import build_coarse_grid, build_fine_mesh
from .metrics import ErrorNorms, compare_trajectories
from .offline import OfflineBasis, build_offline, material_signature, offline_cache_key

log = logging.getLogger(__name__)

ENDPOINT_HEADER = ("oversample_t,noff_p,noff_u,dim,l2_p,h1_p,l2_u,h1_u,"
                   "l2_p_abs,h1_p_abs,l2_u_abs,h1_u_abs\n")


def load_geometry(config: ExperimentConfig) -> SubdomainGeometry:
    if config.geometry == "default":
        return default_geometry()
    if config.geometry.startswith("generate:"):
        seed = int(config.geometry.split(":", 1)[1])
        return generate_geometry(config.fine_n, seed=seed)
    return read_geometry(config.geometry)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _offline_for_layers(config: ExperimentConfig, mesh, cg, material, layers: int,
                        cache_dir: Path) -> OfflineBasis:
    """Build (or load from cache) the offline basis for one oversampling level."""
    meta = {
        "fine_n": config.fine_n,
        "coarse_n": config.coarse_n,
        "snapshots": config.snapshots,
        "snapshot_ratio": config.snapshot_ratio,
        "oversample_layers": layers,
        "seed": config.seed,
        "pou_variant": config.pou,
        "n_off_max_p": max(config.noff_p),
        "n_off_max_u": max(config.noff_u),
        "bc_aware": True,
    }
    key = offline_cache_key(meta, material_signature(material))
    cache_file = cache_dir / f"offline_{key}.npz"
    if cache_file.exists():
        log.info("offline cache hit: %s", cache_file.name)
        return OfflineBasis.load(cache_file, cg)
    basis = build_offline(
        mesh, cg, material,
        n_off_p=max(config.noff_p), n_off_u=max(config.noff_u),
        snapshots=config.snapshots, snapshot_ratio=config.snapshot_ratio,
        layers=layers, seed=config.seed, pou_variant=config.pou,
        constrained_dofs=constrained_dof_map(mesh, ProblemData()),
    )
    cache_dir.mkdir(parents=True, exist_ok=True)
    basis.save(cache_file)
    return basis


def _endpoint_row(t, noff_p, noff_u, dim, report) -> str:
    e = report.endpoint()
    abs_vals = (report.pressure_l2_abs[-1], report.pressure_h1_abs[-1],
                report.displacement_l2_abs[-1], report.displacement_h1_abs[-1])
    vals = [e["l2_p"], e["h1_p"], e["l2_u"], e["h1_u"], *abs_vals]
    return f"{t},{noff_p},{noff_u},{dim}," + ",".join(f"{v:.17g}" for v in vals) + "\n"


def run(config: ExperimentConfig) -> Path:
    """Execute the configured sweep; returns the artifact directory."""
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache_dir = out / ".cache"

    mesh = build_fine_mesh(config.fine_n)
    cg = build_coarse_grid(mesh, config.coarse_n)
    geometry = load_geometry(config)
    material = build_case(config.case, geometry, mesh)
    problem = ProblemData()
    scheme = SchemeConfig(scheme=config.scheme, tau=config.tau, n_steps=config.steps,
                          fs_inner_iterations=config.fs_inner)

    # output_dir is implied by the location; leaving it out keeps otherwise
    # identical runs byte-comparable across directories
    write_config(config, out / "resolved_config.txt", exclude=("output_dir",))

    log.info("fine reference solve (%s, case %d)", config.scheme, config.case)
    fine = FineSolver(mesh, material, problem, scheme)
    reference = fine.run()
    fine_dir = out / "fine"
    fine_dir.mkdir(exist_ok=True)
    trajectory_diagnostics_csv(reference, fine_dir / "diagnostics.csv")
    if config.write_vtk:
        for i, t in enumerate(reference.times):
            vtkio.write_vtk(fine_dir / f"step_{i:04d}.vtk", mesh,
                            point_scalars={"pressure": reference.pressure[i]},
                            point_vectors={"displacement": reference.displacement[i]},
                            cell_scalars={"subdomain": material.labels})

    norms = ErrorNorms(mesh, material)
    p0_field = initial_pressure_field(mesh, problem)

    offline = {t: _offline_for_layers(config, mesh, cg, material, t, cache_dir)
               for t in sorted(set(config.oversample_t))}

    cells = [(t, p, u) for t in config.oversample_t
             for u in config.noff_u for p in config.noff_p]
    statuses = {}

    def run_cell(cell):
        t, noff_p, noff_u = cell
        name = f"cell_t{t}_p{noff_p}_u{noff_u}"
        try:
            basis = CoarseBasis.from_offline(offline[t], problem, noff_p, noff_u)
            system = project(fine.ops, basis, scheme, load=fine.load)
            traj = run_coarse(system, p0_field)
            displacement, pressure = traj.prolonged()
            report = compare_trajectories(norms, reference.times, reference.pressure,
                                          reference.displacement, pressure, displacement)
            report.to_csv(out / f"{name}.csv")
            if config.write_vtk:
                vtkio.write_vtk(out / f"{name}_final.vtk", mesh,
                                point_scalars={"pressure": pressure[-1]},
                                point_vectors={"displacement": displacement[-1]},
                                cell_scalars={"subdomain": material.labels})
            return cell, traj.dim, report, "ok"
        except Exception as exc:  # keep the sweep alive, record the failure
            log.error("cell %s failed: %s", name, exc)
            log.debug("%s", traceback.format_exc())
            return cell, None, None, f"error: {exc}"

    workers = config.effective_workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]

    rows = []
    for cell, dim, report, status in results:
        statuses[f"t{cell[0]}_p{cell[1]}_u{cell[2]}"] = status
        if status == "ok":
            rows.append(_endpoint_row(*cell, dim, report))
    with open(out / "errors_endpoint.csv", "w") as f:
        f.write(ENDPOINT_HEADER)
        for row in sorted(rows):
            f.write(row)

    write_manifest(out, config, statuses)
    return out


def write_manifest(out: Path, config: ExperimentConfig, statuses: dict) -> None:
    """Record the resolved config, per-cell statuses and all output hashes."""
    files = {}
    for path in sorted(out.rglob("*")):
        rel = path.relative_to(out)
        if not path.is_file() or rel.parts[0] == ".cache" or rel.name == "manifest.json":
            continue
        files[str(rel)] = _sha256(path)
    manifest = {
        "config": {k: v for k, v in config.as_flat_dict().items() if v is not None},
        "cells": dict(sorted(statuses.items())),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
