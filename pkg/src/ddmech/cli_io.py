"""Command-line front end, config validation, file codecs and study pipelines.

All floating-point output is written with 17 significant digits so files
round-trip losslessly and byte-identically; reports carry provenance
(config hash, seed, package version) but no timestamps, making runs with
identical config and seed bit-reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__ as VERSION
from . import datagen
from .ddcm import (
    DDCMOptions,
    DDCMProblem,
    DDCMSolution,
    MetricsReport,
    ddcm_solve,
    solution_metrics,
)
from .ddi import DDIOptions, DDIProblem, Snapshot, ddi_solve
from .errors import ConfigError, DDMechError, NumericsError
from .fe_core import (
    BoundaryConditions,
    FemSolution,
    Mesh,
    build_model,
    fem_reference_solve,
    load_mesh_json,
    save_mesh_json,
    write_vtk,
)
from .phase_space import (
    MaterialDatabase,
    Metric,
    load_database_csv,
    mandel_to_tensor,
    save_database_csv,
    tensor_to_mandel,
)

# -- deterministic JSON ---------------------------------------------------


def _json_token(x) -> str:
    if x is None:
        return "null"
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not np.isfinite(x):
            return "null"
        return f"{x:.17g}"
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        inner = ",".join(f"{json.dumps(str(k))}:{_json_token(v)}" for k, v in sorted(x.items()))
        return "{" + inner + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ",".join(_json_token(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x)}")


def dumps_json(obj) -> str:
    """Deterministic JSON: sorted keys, 17-significant-digit floats."""
    return _json_token(obj) + "\n"


def dump_json(path, obj) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(dumps_json(obj))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dumps_json(cfg).encode()).hexdigest()[:16]


def provenance(cfg: dict, seed) -> dict:
    return {"config_hash": config_hash(cfg), "seed": seed, "version": VERSION}


# -- config validation ------------------------------------------------------


def _check_keys(cfg: dict, allowed: set[str], where: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _need(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"{where}: missing required field '{key}'")
    return cfg[key]


def _require_all(cfg: dict, required: tuple[str, ...], where: str) -> None:
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ConfigError(f"{where}: missing required fields {missing}")


def _metric_from(cfg: dict, where: str) -> Metric:
    _check_keys(cfg, {"E", "nu"}, where)
    return Metric.isotropic_plane_strain(float(_need(cfg, "E", where)), float(_need(cfg, "nu", where)))


def _law_from(cfg: dict, where: str) -> datagen.LinearElasticLaw:
    _check_keys(cfg, {"E", "nu"}, where)
    return datagen.LinearElasticLaw(float(_need(cfg, "E", where)), float(_need(cfg, "nu", where)))


_COMP = {"x": 0, "y": 1}


def bcs_from_config(mesh: Mesh, cfg: dict, where: str = "bcs") -> BoundaryConditions:
    """Boundary conditions from a preset name or explicit set-based spec."""
    _check_keys(cfg, {"preset", "params", "dirichlet", "tractions"}, where)
    if "preset" in cfg:
        params = dict(cfg.get("params", {}))
        preset = cfg["preset"]
        if preset == "plate":
            return datagen.plate_hole_bcs(mesh, **params)
        if preset == "lbeam":
            return datagen.l_beam_bcs(mesh, **params)
        raise ConfigError(f"{where}: unknown BC preset {preset!r}")
    dirichlet: dict[int, float] = {}
    for item in cfg.get("dirichlet", []):
        _check_keys(item, {"set", "component", "value"}, f"{where}.dirichlet")
        comp = _COMP[_need(item, "component", where)]
        val = float(_need(item, "value", where))
        name = _need(item, "set", where)
        if name not in mesh.node_sets:
            raise ConfigError(f"{where}: mesh has no node set {name!r}")
        for n in mesh.node_sets[name]:
            dirichlet[2 * int(n) + comp] = val
    forces = np.zeros(mesh.n_dof)
    for item in cfg.get("tractions", []):
        _check_keys(item, {"set", "component", "value"}, f"{where}.tractions")
        comp = _COMP[_need(item, "component", where)]
        forces += float(_need(item, "value", where)) * datagen.edge_load_vector(
            mesh, _need(item, "set", where), comp
        )
    if not dirichlet:
        raise ConfigError(f"{where}: no Dirichlet constraints given")
    return BoundaryConditions(dirichlet=dirichlet, forces=forces)


# -- state CSV codec ----------------------------------------------------------

_STATE_COLS = "weight,eps_xx,eps_yy,eps_xy,sig_xx,sig_yy,sig_xy"
_MAPPED_COLS = _STATE_COLS + ",map_eps_xx,map_eps_yy,map_eps_xy,map_sig_xx,map_sig_yy,map_sig_xy"


def save_states_csv(path, w: np.ndarray, states: np.ndarray, mapped: np.ndarray | None = None) -> None:
    """Per-quadrature-point solution states (tensor components, 17 digits)."""
    states_t = np.hstack([mandel_to_tensor(states[:, :3]), mandel_to_tensor(states[:, 3:])])
    cols = [np.asarray(w, dtype=float).reshape(-1, 1), states_t]
    header = _STATE_COLS
    if mapped is not None:
        cols.append(np.hstack([mandel_to_tensor(mapped[:, :3]), mandel_to_tensor(mapped[:, 3:])]))
        header = _MAPPED_COLS
    rows = np.hstack(cols)
    with open(path, "w", newline="\n") as f:
        f.write(header + "\n")
        for r in rows:
            f.write(",".join(f"{v:.17g}" for v in r) + "\n")


def load_states_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Returns (w, states_mandel, mapped_mandel-or-None)."""
    with open(path) as f:
        header = f.readline().strip()
        raw = np.array([[float(v) for v in ln.split(",")] for ln in f if ln.strip()])
    if header not in (_STATE_COLS, _MAPPED_COLS):
        raise ValueError(f"{path}: unrecognized state CSV header")
    w = raw[:, 0]
    states = np.hstack([tensor_to_mandel(raw[:, 1:4]), tensor_to_mandel(raw[:, 4:7])])
    mapped = None
    if header == _MAPPED_COLS:
        mapped = np.hstack([tensor_to_mandel(raw[:, 7:10]), tensor_to_mandel(raw[:, 10:13])])
    return w, states, mapped


# -- snapshot manifest ---------------------------------------------------------


def save_snapshots(outdir, mesh: Mesh, snapshots: list[Snapshot], metric_cfg: dict, prov: dict) -> Path:
    """Write mesh + manifest + per-snapshot displacement/force CSVs."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_mesh_json(outdir / "mesh.json", mesh, provenance=prov)
    entries = []
    for k, s in enumerate(snapshots):
        u_name, f_name = f"snap{k:03d}_u.csv", f"snap{k:03d}_f.csv"
        for name, vec, cols in ((u_name, s.u, "ux,uy"), (f_name, s.f, "fx,fy")):
            arr = vec.reshape(-1, 2)
            with open(outdir / name, "w", newline="\n") as f:
                f.write(cols + "\n")
                for row in arr:
                    f.write(f"{row[0]:.17g},{row[1]:.17g}\n")
        entries.append(
            {"time": s.time, "u": u_name, "f": f_name, "resultants": s.resultants or {}}
        )
    manifest = {
        "mesh": "mesh.json",
        "metric": metric_cfg,
        "dirichlet_dofs": snapshots[0].dirichlet_dofs.tolist(),
        "snapshots": entries,
        "provenance": prov,
    }
    path = outdir / "manifest.json"
    dump_json(path, manifest)
    return path


def load_snapshots(manifest_path) -> tuple[Mesh, Metric, list[Snapshot]]:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        doc = json.load(f)
    base = manifest_path.parent
    mesh = load_mesh_json(base / doc["mesh"])
    metric = _metric_from(doc["metric"], "manifest.metric")
    dir_dofs = np.array(doc["dirichlet_dofs"], dtype=np.int64)
    snaps = []
    for entry in doc["snapshots"]:
        u = np.loadtxt(base / entry["u"], delimiter=",", skiprows=1).reshape(-1)
        fv = np.loadtxt(base / entry["f"], delimiter=",", skiprows=1).reshape(-1)
        snaps.append(
            Snapshot(u=u, f=fv, dirichlet_dofs=dir_dofs, time=float(entry.get("time", 0.0)),
                     resultants=entry.get("resultants"))
        )
    return mesh, metric, snaps


# -- output bundles -------------------------------------------------------------


def write_solution_outputs(outdir: Path, model, sol: DDCMSolution, metric: Metric, prov: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    quad = model.quad
    save_states_csv(outdir / "ddcm_states.csv", quad.w, sol.z, sol.mapped)
    with open(outdir / "history.csv", "w", newline="\n") as f:
        f.write("iteration,distance2,mapping_changes\n")
        for i, (d2, ch) in enumerate(zip(sol.history, sol.mapping_changes), start=1):
            f.write(f"{i},{d2:.17g},{ch}\n")
    diff = metric.embed_states(sol.z) - metric.embed_states(sol.mapped)
    d2pp = np.einsum("ij,ij->i", diff, diff)
    cell = {
        "eps_xx": quad.element_average(mandel_to_tensor(sol.eps)[:, 0]),
        "eps_yy": quad.element_average(mandel_to_tensor(sol.eps)[:, 1]),
        "eps_xy": quad.element_average(mandel_to_tensor(sol.eps)[:, 2]),
        "sig_xx": quad.element_average(mandel_to_tensor(sol.sig)[:, 0]),
        "sig_yy": quad.element_average(mandel_to_tensor(sol.sig)[:, 1]),
        "sig_xy": quad.element_average(mandel_to_tensor(sol.sig)[:, 2]),
        "db_distance2": quad.element_average(d2pp),
    }
    write_vtk(
        outdir / "ddcm.vtk",
        model.mesh,
        point_data={"displacement": sol.u.reshape(-1, 2), "lambda": sol.lam.reshape(-1, 2)},
        cell_data=cell,
        title=f"ddmech ddcm fields hash={prov.get('config_hash', '')}",
    )
    dump_json(
        outdir / "ddcm_summary.json",
        {
            "distance2": sol.distance2,
            "iterations": sol.iterations,
            "converged": sol.converged,
            "status": sol.status,
            "max_equilibrium_residual": max(sol.equilibrium_residuals),
            "provenance": prov,
        },
    )


def write_fem_outputs(outdir: Path, model, fem: FemSolution, prov: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    quad = model.quad
    save_states_csv(outdir / "fem_states.csv", quad.w, fem.states())
    cell = {
        "eps_xx": quad.element_average(mandel_to_tensor(fem.eps)[:, 0]),
        "eps_yy": quad.element_average(mandel_to_tensor(fem.eps)[:, 1]),
        "eps_xy": quad.element_average(mandel_to_tensor(fem.eps)[:, 2]),
        "sig_xx": quad.element_average(mandel_to_tensor(fem.sig)[:, 0]),
        "sig_yy": quad.element_average(mandel_to_tensor(fem.sig)[:, 1]),
        "sig_xy": quad.element_average(mandel_to_tensor(fem.sig)[:, 2]),
    }
    write_vtk(
        outdir / "fem.vtk",
        model.mesh,
        point_data={"displacement": fem.u.reshape(-1, 2)},
        cell_data=cell,
        title=f"ddmech fem fields hash={prov.get('config_hash', '')}",
    )
    dump_json(outdir / "fem_summary.json", {"energy": fem.energy, "provenance": prov})


# -- streaming recomputation (independent code path for compare) ----------------


def recompute_metrics_from_files(sol_csv, fem_csv, db_csv, metric: Metric) -> dict:
    """Re-derive the three squared distances from the written files only.

    Uses plain chunked linear algebra (no k-d tree) so it is independent of
    the in-memory pipeline.
    """
    w, z, mapped = load_states_csv(sol_csv)
    w_ref, z_ref, _ = load_states_csv(fem_csv)
    if mapped is None:
        raise ValueError("solution CSV lacks mapped states")
    db_states = load_database_csv(db_csv)
    ez = metric.embed_states(z)
    eref = metric.embed_states(z_ref)
    emap = metric.embed_states(mapped)
    edb = metric.embed_states(db_states)
    d2_min = np.full(z_ref.shape[0], np.inf)
    for lo in range(0, edb.shape[0], 4096):
        blk = edb[lo : lo + 4096]
        d2 = (
            np.sum(eref**2, axis=1)[:, None]
            - 2.0 * eref @ blk.T
            + np.sum(blk**2, axis=1)[None, :]
        )
        d2_min = np.minimum(d2_min, d2.min(axis=1))
    d2_min = np.maximum(d2_min, 0.0)
    return {
        "fem_db": float(np.sum(w_ref * d2_min)),
        "ddcm_db": float(np.sum(w * np.sum((ez - emap) ** 2, axis=1))),
        "ddcm_fem": float(np.sum(w * np.sum((ez - eref) ** 2, axis=1))),
    }


# -- subcommands -----------------------------------------------------------------

_MESH_PRESETS = {"plate": "plate_hole_quarter", "lbeam": "l_beam", "sample": "perforated_sample"}


def _cmd_gen_mesh(args) -> int:
    kind = _MESH_PRESETS.get(args.preset, args.preset)
    params = {}
    for kv in args.param or []:
        if "=" not in kv:
            raise ConfigError(f"--param expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        params[k] = json.loads(v)
    mesh = datagen.gen_mesh(kind, params, target_element_size=args.size)
    cfg = {"preset": args.preset, "params": params, "size": args.size}
    save_mesh_json(args.output, mesh, provenance=provenance(cfg, args.seed))
    print(f"wrote {args.output}: {mesh.n_nodes} nodes, {mesh.n_elements} elements")
    return 0


def _cmd_gen_db(args) -> int:
    law = datagen.LinearElasticLaw(args.law_E, args.law_nu)
    if args.preset:
        spec = datagen.StrainGridSpec.preset(args.preset)
        label = args.preset
    elif args.counts:
        spec = datagen.StrainGridSpec.cube(args.counts)
        label = f"cube{args.counts}"
    else:
        raise ConfigError("gen-db: need --preset or --counts")
    db = datagen.gen_regular_db(spec, law)
    cfg = {"preset": label, "law": {"E": args.law_E, "nu": args.law_nu}}
    prov = provenance(cfg, args.seed)
    save_database_csv(
        args.output,
        db,
        comments=[f"provenance preset={label} E={args.law_E:.17g} nu={args.law_nu:.17g} "
                  f"hash={prov['config_hash']} seed={args.seed} version={VERSION}"],
    )
    print(f"wrote {args.output}: {len(db)} states")
    return 0


def _load_config(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _cmd_fem(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"mesh", "law", "bcs", "seed"}, "fem config")
    _require_all(cfg, ("mesh", "law", "bcs"), "fem config")
    mesh = load_mesh_json(_need(cfg, "mesh", "fem config"))
    law = _law_from(_need(cfg, "law", "fem config"), "fem config.law")
    bcs = bcs_from_config(mesh, _need(cfg, "bcs", "fem config"))
    model = build_model(mesh, bcs)
    fem = fem_reference_solve(model, law)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    prov = provenance(cfg, seed)
    dump_json(outdir / "config_resolved.json", {**cfg, "provenance": prov})
    write_fem_outputs(outdir, model, fem, prov)
    print(f"fem: energy = {fem.energy:.6e} J")
    return 0


def _ddcm_case(cfg: dict, outdir: Path, seed) -> tuple[DDCMProblem, DDCMSolution]:
    _check_keys(
        cfg,
        {"mesh", "database", "metric", "bcs", "variant", "max_iterations", "init", "seed"},
        "ddcm config",
    )
    _require_all(cfg, ("mesh", "database", "metric", "bcs"), "ddcm config")
    mesh = load_mesh_json(_need(cfg, "mesh", "ddcm config"))
    metric = _metric_from(_need(cfg, "metric", "ddcm config"), "ddcm config.metric")
    db = load_database_csv(_need(cfg, "database", "ddcm config"), metric=metric)
    bcs = bcs_from_config(mesh, _need(cfg, "bcs", "ddcm config"))
    model = build_model(mesh, bcs)
    options = DDCMOptions(
        max_iterations=int(cfg.get("max_iterations", 10_000)),
        variant=cfg.get("variant", "standard"),
        init=cfg.get("init", "zero"),
        seed=seed,
    )
    problem = DDCMProblem(model=model, metric=metric, database=db, options=options)
    sol = ddcm_solve(problem)
    prov = provenance(cfg, seed)
    dump_json(outdir / "config_resolved.json", {**cfg, "provenance": prov})
    write_solution_outputs(outdir, model, sol, metric, prov)
    return problem, sol


def _cmd_ddcm(args) -> int:
    cfg = _load_config(args.config)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    _, sol = _ddcm_case(cfg, outdir, seed)
    print(f"ddcm: {sol.status} after {sol.iterations} iterations, d2 = {sol.distance2:.6e} J")
    return 0


def _cmd_ddi(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"manifest", "n_star", "metric", "options", "seed"}, "ddi config")
    _require_all(cfg, ("manifest", "n_star"), "ddi config")
    mesh, metric, snaps = load_snapshots(_need(cfg, "manifest", "ddi config"))
    if "metric" in cfg:
        metric = _metric_from(cfg["metric"], "ddi config.metric")
    opts_cfg = dict(cfg.get("options", {}))
    _check_keys(
        opts_cfg,
        {"max_outer", "kmeans_max_iter", "kmeans_subsample", "cg_rtol", "cg_maxiter"},
        "ddi config.options",
    )
    seed = args.seed if args.seed is not None else cfg.get("seed", 42)
    options = DDIOptions(seed=seed, **{k: v for k, v in opts_cfg.items()})
    pattern = snaps[0].dirichlet_dofs
    model = build_model(mesh, BoundaryConditions(dirichlet={int(d): 0.0 for d in pattern}))
    problem = DDIProblem(
        snapshots=snaps, model=model, metric=metric, n_star=int(_need(cfg, "n_star", "ddi config")),
        options=options,
    )
    result = ddi_solve(problem)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg, seed)
    dump_json(outdir / "config_resolved.json", {**cfg, "provenance": prov})
    save_database_csv(
        outdir / "database.csv",
        result.database,
        comments=[f"provenance ddi n_star={problem.n_star} hash={prov['config_hash']} "
                  f"seed={seed} version={VERSION}"],
    )
    dump_json(
        outdir / "ddi_diagnostics.json",
        {
            "objective_history": result.objective_history,
            "converged": result.converged,
            "iterations": result.iterations,
            "cluster_weight_min": float(result.cluster_weights.min()),
            "cluster_weight_total": float(result.cluster_weights.sum()),
            "max_equilibrium_residual": float(result.equilibrium_residuals.max()),
            "empty_cluster_events": result.empty_cluster_events,
            "provenance": prov,
        },
    )
    print(
        f"ddi: {result.iterations} outer iterations, objective = "
        f"{result.objective_history[-1]:.6e} J, converged = {result.converged}"
    )
    return 0


def _cmd_compare(args) -> int:
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.study:
        cfg = study_preset(args.study) if args.study in ("smoke", "desk") else _load_config(args.study)
        if args.seed is not None:
            cfg["seed"] = args.seed
        run_study(cfg, outdir)
        print(f"study report: {outdir / 'study_report.json'}")
        return 0
    if not args.config:
        raise ConfigError("compare: need --config or --study")
    cfg = _load_config(args.config)
    _check_keys(cfg, {"mesh", "database", "metric", "law", "bcs", "variant",
                      "max_iterations", "init", "seed"}, "compare config")
    _require_all(cfg, ("mesh", "database", "metric", "law", "bcs"), "compare config")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    law = _law_from(_need(cfg, "law", "compare config"), "compare config.law")
    ddcm_cfg = {k: v for k, v in cfg.items() if k != "law"}
    problem, sol = _ddcm_case(ddcm_cfg, outdir, seed)
    fem = fem_reference_solve(problem.model, law)
    prov = provenance(cfg, seed)
    write_fem_outputs(outdir, problem.model, fem, prov)
    report = solution_metrics(sol, fem, problem.database, problem.metric, problem.model.quad.w)
    recheck = recompute_metrics_from_files(
        outdir / "ddcm_states.csv", outdir / "fem_states.csv", cfg["database"], problem.metric
    )
    for key in ("fem_db", "ddcm_db", "ddcm_fem"):
        a, b = report.scalars()[key], recheck[key]
        if abs(a - b) > 1e-10 * max(abs(a), abs(b), 1e-300):
            raise NumericsError(f"compare cross-check failed on {key}: {a} vs {b}")
    dump_json(
        outdir / "metrics.json",
        {**report.scalars(), "recheck": recheck, "provenance": prov},
    )
    print(
        f"compare: fem_db={report.fem_db:.6e} ddcm_db={report.ddcm_db:.6e} "
        f"ddcm_fem={report.ddcm_fem:.6e} (J)"
    )
    return 0


# -- study runner ------------------------------------------------------------------


def study_preset(name: str) -> dict:
    """Built-in study configurations (the full identify/solve/compare cycle)."""
    if name == "smoke":
        return {
            "seed": 42,
            "metric": {"E": 100e9, "nu": 0.35},
            "law": {"E": datagen.REFERENCE_E, "nu": datagen.REFERENCE_NU},
            "sample": {"size": 0.05, "n_snapshots": 6, "amp_x": 1.0e9, "amp_y": -1.5e9},
            "ddi": {"sizes": [100], "max_outer": 8, "target_ratio": 200},
            "reg_sizes": [10],
            "plate": {"n_arc": 8, "n_rad": 10, "avg_strain": -0.004},
            "lbeam": {"size": 0.08, "top_disp_factor": 0.002},
            "variants": ["standard", "isotropic"],
            "max_iterations": 400,
        }
    if name == "desk":
        return {
            "seed": 42,
            "metric": {"E": 100e9, "nu": 0.35},
            "law": {"E": datagen.REFERENCE_E, "nu": datagen.REFERENCE_NU},
            "sample": {"size": 0.008, "n_snapshots": 20, "amp_x": 1.0e9, "amp_y": -1.5e9},
            "ddi": {"sizes": [10_000, 25_000, 100_000], "max_outer": 15, "target_ratio": 200},
            "reg_sizes": [30, 50, 100],
            "plate": {"n_arc": 17, "n_rad": 28, "avg_strain": -0.004},
            "lbeam": {"size": 0.03, "top_disp_factor": 0.002},
            "variants": ["standard", "isotropic"],
            "max_iterations": 4000,
        }
    raise ConfigError(f"unknown study preset {name!r}")


def run_study(cfg: dict, outdir) -> dict:
    """Full cycle: virtual experiment, identification at several database
    sizes, regular databases, both solvers on both problems, FEM references,
    consolidated distance report.

    Partial results are persisted per case; a failing case is recorded with
    a failure marker and does not stop the remaining cases.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    _check_keys(
        cfg,
        {"seed", "metric", "law", "sample", "ddi", "reg_sizes", "plate", "lbeam",
         "variants", "max_iterations"},
        "study config",
    )
    seed = int(cfg.get("seed", 42))
    prov = provenance(cfg, seed)
    dump_json(outdir / "config_resolved.json", {**cfg, "provenance": prov})
    metric = _metric_from(cfg["metric"], "study.metric")
    law = _law_from(cfg["law"], "study.law")

    # 1. virtual experiment
    s_cfg = cfg["sample"]
    sample_mesh = datagen.gen_mesh("perforated_sample", {}, target_element_size=s_cfg["size"])
    history = datagen.LoadHistory.biaxial_default(s_cfg["amp_x"], s_cfg["amp_y"])
    model, snaps = datagen.run_virtual_experiment(sample_mesh, law, history, s_cfg["n_snapshots"])
    save_snapshots(outdir / "experiment", sample_mesh, snaps, cfg["metric"], prov)
    M = model.quad.n_points

    # 2. identified databases (snapshot count trimmed toward the target ratio)
    databases: dict[str, MaterialDatabase] = {}
    ddi_cfg = cfg["ddi"]
    for n_star in ddi_cfg["sizes"]:
        want = int(np.ceil(ddi_cfg.get("target_ratio", 200) * n_star / M))
        use = snaps[:: max(1, len(snaps) // max(1, want))][: max(1, want)] if want < len(snaps) else snaps
        problem = DDIProblem(
            snapshots=list(use),
            model=model,
            metric=metric,
            n_star=n_star,
            options=DDIOptions(seed=seed, max_outer=int(ddi_cfg.get("max_outer", 20))),
        )
        result = ddi_solve(problem)
        label = f"DDI-{n_star}"
        databases[label] = result.database
        save_database_csv(outdir / f"db_{label}.csv", result.database,
                          comments=[f"provenance study {label} hash={prov['config_hash']} "
                                    f"seed={seed} version={VERSION}"])
        dump_json(outdir / f"db_{label}_diagnostics.json", {
            "objective_history": result.objective_history,
            "iterations": result.iterations,
            "converged": result.converged,
            "snapshots_used": len(use),
            "max_equilibrium_residual": float(result.equilibrium_residuals.max()),
        })

    for n in cfg["reg_sizes"]:
        label = f"REG-{n}"
        databases[label] = datagen.gen_regular_db(datagen.StrainGridSpec.cube(int(n)), law, metric)
        save_database_csv(outdir / f"db_{label}.csv", databases[label],
                          comments=[f"provenance study {label} hash={prov['config_hash']} "
                                    f"seed={seed} version={VERSION}"])

    # 3. problems and FEM references
    p_cfg = dict(cfg["plate"])
    plate_mesh = datagen.gen_mesh(
        "plate_hole_quarter",
        {"n_arc": p_cfg.pop("n_arc", 17), "n_rad": p_cfg.pop("n_rad", 28)},
        target_element_size=0.3,
    )
    plate_model = build_model(plate_mesh, datagen.plate_hole_bcs(plate_mesh, **p_cfg))
    b_cfg = dict(cfg["lbeam"])
    beam_mesh = datagen.gen_mesh("l_beam", {}, target_element_size=b_cfg.pop("size", 0.03))
    beam_model = build_model(beam_mesh, datagen.l_beam_bcs(beam_mesh, **b_cfg))
    problems = {"plate": plate_model, "lbeam": beam_model}

    report: dict = {"provenance": prov, "cases": {}}
    for pname, pmodel in problems.items():
        fem = fem_reference_solve(pmodel, law)
        case_dir = outdir / pname
        write_fem_outputs(case_dir / "fem", pmodel, fem, prov)
        report["cases"][pname] = {"fem_energy": fem.energy, "databases": {}}
        for label, db in sorted(databases.items()):
            entry: dict = {}
            for variant in cfg["variants"]:
                vdir = case_dir / f"{label}_{variant}"
                try:
                    options = DDCMOptions(
                        max_iterations=int(cfg.get("max_iterations", 10_000)),
                        variant=variant,
                        seed=seed,
                    )
                    problem = DDCMProblem(model=pmodel, metric=metric, database=db, options=options)
                    if variant == "isotropic" and "standard" in entry:
                        problem.options.init = entry["standard"].pop("_z", None)
                        if problem.options.init is None:
                            problem.options.init = "zero"
                    sol = ddcm_solve(problem)
                    mr = solution_metrics(sol, fem, db, metric, pmodel.quad.w)
                    write_solution_outputs(vdir, pmodel, sol, metric, prov)
                    entry[variant] = {**mr.scalars(), "status": sol.status}
                    if variant == "standard":
                        entry[variant]["_z"] = sol.z
                except DDMechError as exc:
                    entry[variant] = {"failed": str(exc)}
            for v in entry.values():
                v.pop("_z", None)
            report["cases"][pname]["databases"][label] = entry
    dump_json(outdir / "study_report.json", report)
    return report


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ddmech",
        description="Model-free data-driven mechanics: database identification and solvers",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-mesh", help="generate a parametric mesh (JSON)")
    g.add_argument("--preset", required=True,
                   help="plate | lbeam | sample (or a full kind name)")
    g.add_argument("--size", type=float, default=0.05, help="target element size")
    g.add_argument("--param", action="append", help="geometry override key=value (JSON value)")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_mesh)

    g = sub.add_parser("gen-db", help="generate a regular strain-grid database (CSV)")
    g.add_argument("--preset", help="REG-DB1 | REG-DB2 | REG-DB3")
    g.add_argument("--counts", type=int, help="points per strain axis (cube grid)")
    g.add_argument("--law-E", type=float, default=datagen.REFERENCE_E)
    g.add_argument("--law-nu", type=float, default=datagen.REFERENCE_NU)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_db)

    for name, fn, hlp in (
        ("fem", _cmd_fem, "classical FEM reference solve"),
        ("ddcm", _cmd_ddcm, "data-driven solve against a database"),
        ("ddi", _cmd_ddi, "identify a database from snapshots"),
    ):
        g = sub.add_parser(name, help=hlp)
        g.add_argument("--config", required=True, help="JSON run configuration")
        g.add_argument("-o", "--output", required=True, help="output directory")
        g.add_argument("--seed", type=int, default=None)
        g.set_defaults(func=fn)

    g = sub.add_parser("compare", help="end-to-end pipeline: FEM reference vs data-driven run")
    g.add_argument("--config", help="single-case compare configuration")
    g.add_argument("--study", help="study preset name (smoke | desk) or study config path")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=_cmd_compare)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (DDMechError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
