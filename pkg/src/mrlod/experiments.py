"""Experiment runners: sweeps, CSV persistence and metadata sidecars.

Each runner writes ``<experiment>.csv`` plus a ``.meta`` sidecar with the
full configuration, seeds and environment versions. Row values other than
wall times are bit-reproducible for a fixed config; failed rows keep their
place with empty error fields and are listed in the sidecar.
"""

import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import fem, multires
from .config import ExperimentConfig
from .corrector import CorrectorWorkspace
from .mesh import BoundaryLayout, ElementId, build_hierarchy
from .solver import diagnostics
from .transfer import TransferSet

__all__ = ["run_experiment", "RUNNERS", "build_inclusion_coefficient",
           "write_rows", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1

CONVERGENCE_COLUMNS = [
    "schema_version", "experiment", "problem", "variant", "kappa", "H1",
    "HL", "L", "m", "h", "err_V", "ref_norm", "err_rel",
    "slope_window_flag", "seed", "wall_ms_bases", "wall_ms_solve",
]
VARCOEFF_COLUMNS = [
    "schema_version", "experiment", "problem", "variant", "kappa", "H1",
    "HL", "L", "m", "h", "err_V", "ref_norm", "err_rel", "err_V_weighted",
    "ref_norm_weighted", "err_rel_weighted", "seed", "wall_ms_bases",
    "wall_ms_solve",
]
SCATTERING_COLUMNS = [
    "schema_version", "experiment", "problem", "variant", "kappa", "H1",
    "HL", "L", "m", "h", "level", "block_dim", "solver_kind",
    "gmres_iterations", "gmres_restarts", "gmres_converged",
    "gmres_final_residual", "direct_fallback", "condition", "norm2",
    "smin_proxy", "fov_min_real", "fov_min_abs", "seed", "wall_ms_bases",
    "wall_ms_solve",
]
DECAY_COLUMNS = [
    "schema_version", "experiment", "problem", "kappa", "H1", "L", "h",
    "level", "elem_ix", "elem_iy", "beta_hat", "n_annuli", "seed", "wall_ms",
]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return f"{value:.12e}"
    return str(value)


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def write_meta(path, cfg: ExperimentConfig, extra: dict) -> None:
    import scipy

    from . import __version__

    items = dict(cfg.to_dict())
    items.update({
        "version_mrlod": __version__,
        "version_numpy": np.__version__,
        "version_scipy": scipy.__version__,
        "version_python": sys.version.split()[0],
        "timestamp": datetime.now(timezone.utc).isoformat(),
    })
    items.update({k: str(v) for k, v in extra.items()})
    with open(path, "w") as fh:
        for key in sorted(items):
            fh.write(f"{key}={items[key]}\n")


def _boundary(cfg: ExperimentConfig) -> BoundaryLayout:
    if cfg.boundary == "dirichlet":
        return BoundaryLayout.all_dirichlet()
    return BoundaryLayout.all_robin()


def _source(cfg: ExperimentConfig):
    if cfg.source == "sin_cos":
        return fem.SinCosSource()
    return fem.BumpSource(cfg.source_r, cfg.source_x0, cfg.source_y0,
                          cfg.source_amplitude)


def build_inclusion_coefficient(cfg: ExperimentConfig,
                                space: fem.FineSpace) -> fem.CoefficientField:
    """Periodic-cell inclusion coefficient with seeded random values.

    Each eps-cell not touching the outer boundary carries an inclusion (the
    centered half-size square) with a value drawn uniformly from
    [lo, hi]; cells at the boundary and the matrix stay at 1. The draw
    order is the row-major cell order, so a seed fixes the field exactly.
    """
    nf = space.nf
    h = space.hierarchy.h
    eps = cfg.coeff_eps
    n_cells = int(round(1.0 / eps))
    per = int(round(eps / h))
    quarter = per // 4
    rng = np.random.default_rng(cfg.seed)
    values = np.ones((nf, nf))
    for jy in range(n_cells):
        for jx in range(n_cells):
            val = rng.uniform(cfg.coeff_lo, cfg.coeff_hi)
            if jx in (0, n_cells - 1) or jy in (0, n_cells - 1):
                continue  # boundary cells stay at 1 (value still drawn)
            x0 = jx * per + quarter
            y0 = jy * per + quarter
            values[y0:y0 + 2 * quarter, x0:x0 + 2 * quarter] = val
    return fem.CoefficientField(values, space)


class _Problem:
    """Everything needed to run one hierarchy: operators, transfer, workspace."""

    def __init__(self, cfg: ExperimentConfig, kappa: float, H1: float, L: int,
                 hole_geometry: bool | None = None):
        use_hole = (cfg.geometry == "square_with_hole"
                    if hole_geometry is None else hole_geometry)
        self.hier = build_hierarchy(
            H1, L, cfg.hfine,
            geometry="square_with_hole" if use_hole else "unit_square",
            hole=tuple(cfg.hole) if use_hole else None,
            boundary=_boundary(cfg))
        self.space = fem.FineSpace(self.hier)
        if cfg.coeff == "inclusions":
            self.coeff = build_inclusion_coefficient(cfg, self.space)
        else:
            self.coeff = fem.CoefficientField.constant(self.space, cfg.coeff_value)
        self.ops = fem.assemble_operators(self.space, kappa, self.coeff)
        self.transfer = TransferSet(self.space)
        self.workspace = CorrectorWorkspace(self.ops, self.transfer)
        self.load = fem.load_vector(self.space, _source(cfg))
        self.u_ref = fem.reference_solve(self.ops, self.load)


def _base_row(cfg, kappa, H1, HL, L, m):
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment,
        "problem": cfg.problem,
        "variant": cfg.variant,
        "kappa": float(kappa),
        "H1": float(H1),
        "HL": float(HL),
        "L": int(L),
        "m": int(m),
        "h": float(cfg.hfine),
        "seed": int(cfg.seed),
    }


# -- sweep groups (independent units, parallelizable) -------------------------


def _convergence_group(args):
    """One oversampling value: shared hierarchy, incremental level bases."""
    cfg, kappa, m = args
    HLs = sorted(cfg.HL, reverse=True)
    Lmax = cfg.levels_for(min(HLs))
    prob = _Problem(cfg, kappa, cfg.H1, Lmax)
    ref_norm = fem.v_norm(prob.u_ref, prob.ops)
    weighted = cfg.experiment == "varcoeff"
    ref_norm_w = fem.v_norm(prob.u_ref, prob.ops, weighted=True) if weighted else None

    bases = []
    level_ms = []
    base_wall = []
    for level in range(1, Lmax + 1):
        t0 = time.perf_counter()
        bases.append(multires.build_level_basis(
            prob.workspace, level, cfg.m_for_level(level, m), cfg.variant))
        base_wall.append(int(1000 * (time.perf_counter() - t0)))
        level_ms.append(cfg.m_for_level(level, m))
    system = multires.assemble_blocks(bases, prob.ops, prob.load)
    t0 = time.perf_counter()
    solution = multires.solve_blocks(system, cfg.strategy, cfg.restart,
                                     cfg.rtol, cfg.maxiter)
    solve_ms = int(1000 * (time.perf_counter() - t0))

    rows = []
    window = set(HLs[:4])
    for HL in HLs:
        L = cfg.levels_for(HL)
        u = solution.partial_sum(bases, L)
        diff = prob.u_ref - u
        err = fem.v_norm(diff, prob.ops)
        row = _base_row(cfg, kappa, cfg.H1, HL, L, m)
        row.update({
            "err_V": err,
            "ref_norm": ref_norm,
            "err_rel": err / ref_norm if ref_norm > 0 else np.nan,
            "slope_window_flag": HL in window,
            "wall_ms_bases": sum(base_wall[:L]),
            "wall_ms_solve": solve_ms,
        })
        if weighted:
            err_w = fem.v_norm(diff, prob.ops, weighted=True)
            row.update({
                "err_V_weighted": err_w,
                "ref_norm_weighted": ref_norm_w,
                "err_rel_weighted": err_w / ref_norm_w if ref_norm_w > 0 else np.nan,
            })
        rows.append(row)
    return rows


def _stabilization_group(args):
    """One (mesh size, variant, oversampling) cell of the comparison."""
    cfg, kappa, H1, variant, m = args
    sub = ExperimentConfig(**{**cfg.__dict__, "variant": variant, "H1": H1})
    prob = _Problem(sub, kappa, H1, 1)
    ref_norm = fem.v_norm(prob.u_ref, prob.ops)
    t0 = time.perf_counter()
    basis = multires.build_level_basis(prob.workspace, 1, m, variant)
    bases_ms = int(1000 * (time.perf_counter() - t0))
    system = multires.assemble_blocks([basis], prob.ops, prob.load)
    t0 = time.perf_counter()
    solution = multires.solve_blocks(system, "direct_all")
    solve_ms = int(1000 * (time.perf_counter() - t0))
    err = fem.v_norm(prob.u_ref - solution.combined, prob.ops)
    row = _base_row(sub, kappa, H1, H1, 1, m)
    row.update({
        "variant": variant,
        "err_V": err,
        "ref_norm": ref_norm,
        "err_rel": err / ref_norm if ref_norm > 0 else np.nan,
        "slope_window_flag": False,
        "wall_ms_bases": bases_ms,
        "wall_ms_solve": solve_ms,
    })
    return [row]


def _decay_group(args):
    cfg, kappa = args
    Lmax = cfg.levels_for(min(cfg.HL))
    prob = _Problem(cfg, kappa, cfg.H1, Lmax)
    rows = []
    for level in range(1, Lmax + 1):
        t0 = time.perf_counter()
        n = prob.hier.grid_n(level)
        ix = iy = n // 2
        if not prob.hier.is_active(level, ix, iy):
            ix = iy = 0
        eid = ElementId(level, ix, iy)
        e = np.zeros(prob.hier.n_active(level))
        e[prob.hier.element_index(eid)] = 1.0
        v = prob.transfer.bubble_lift(e, level)
        profile = prob.workspace.decay_profile(level, eid, v)
        rows.append({
            "schema_version": SCHEMA_VERSION,
            "experiment": cfg.experiment,
            "problem": cfg.problem,
            "kappa": float(kappa),
            "H1": float(cfg.H1),
            "L": Lmax,
            "h": float(cfg.hfine),
            "level": level,
            "elem_ix": ix,
            "elem_iy": iy,
            "beta_hat": profile.beta_hat,
            "n_annuli": profile.n_points,
            "seed": int(cfg.seed),
            "wall_ms": int(1000 * (time.perf_counter() - t0)),
        })
    return rows


# -- runners -------------------------------------------------------------------


def _run_groups(cfg, groups, worker, row_sort_key):
    """Run independent sweep groups, sequentially or in processes."""
    results = []
    errors = []
    if cfg.parallel and len(groups) > 1:
        with ProcessPoolExecutor() as pool:
            futures = list(pool.map(_guarded, [(worker, g) for g in groups]))
        for g, (rows, err) in zip(groups, futures):
            results.extend(rows)
            if err:
                errors.append((g, err))
    else:
        for g in groups:
            rows, err = _guarded((worker, g))
            results.extend(rows)
            if err:
                errors.append((g, err))
    results.sort(key=row_sort_key)
    return results, errors


def _guarded(packed):
    worker, args = packed
    try:
        return worker(args), None
    except Exception as exc:  # recorded per group, run continues
        return [], f"{type(exc).__name__}: {exc}"


def run_convergence(cfg: ExperimentConfig, out_dir):
    groups = [(cfg, kappa, m) for kappa in cfg.kappa for m in cfg.m]
    rows, errors = _run_groups(
        cfg, groups, _convergence_group,
        lambda r: (r["kappa"], r["m"], -r["HL"]))
    path = os.path.join(out_dir, "convergence.csv")
    write_rows(path, CONVERGENCE_COLUMNS, rows)
    _finish_meta(path, cfg, errors)
    return path, errors


def run_stabilization(cfg: ExperimentConfig, out_dir):
    variants = ["stabilized", "normal"] if cfg.variant == "both" else [cfg.variant]
    groups = [(cfg, kappa, H1, variant, m)
              for kappa in cfg.kappa
              for H1 in sorted(cfg.HL, reverse=True)
              for variant in variants
              for m in cfg.m]
    rows, errors = _run_groups(
        cfg, groups, _stabilization_group,
        lambda r: (r["kappa"], r["variant"], -r["H1"], r["m"]))
    path = os.path.join(out_dir, "stabilization.csv")
    write_rows(path, CONVERGENCE_COLUMNS, rows)
    _finish_meta(path, cfg, errors)
    return path, errors


def run_varcoeff(cfg: ExperimentConfig, out_dir):
    groups = [(cfg, kappa, m) for kappa in cfg.kappa for m in cfg.m]
    rows, errors = _run_groups(
        cfg, groups, _convergence_group,
        lambda r: (r["kappa"], r["m"], -r["HL"]))
    path = os.path.join(out_dir, "varcoeff.csv")
    write_rows(path, VARCOEFF_COLUMNS, rows)
    # The realized coefficient field, for the heatmap figure.
    Lmax = cfg.levels_for(min(cfg.HL))
    prob = _Problem(cfg, cfg.kappa[0], cfg.H1, Lmax)
    field_path = os.path.join(out_dir, "varcoeff_field.csv")
    nf = prob.space.nf
    with open(field_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ix", "iy", "value"])
        vals = prob.coeff.values
        for iy in range(nf):
            for ix in range(nf):
                writer.writerow([ix, iy, _fmt(float(vals[iy, ix]))])
    _finish_meta(path, cfg, errors, {"coeff_field": field_path})
    return path, errors


def run_scattering(cfg: ExperimentConfig, out_dir):
    kappa = cfg.kappa[0]
    m = cfg.m[0]
    HL = min(cfg.HL)
    L = cfg.levels_for(HL)
    errors = []
    rows = []
    extra = {}
    try:
        prob = _Problem(cfg, kappa, cfg.H1, L)
        bases = []
        wall_bases = []
        for level in range(1, L + 1):
            t0 = time.perf_counter()
            bases.append(multires.build_level_basis(
                prob.workspace, level, cfg.m_for_level(level, m), cfg.variant))
            wall_bases.append(int(1000 * (time.perf_counter() - t0)))
        system = multires.assemble_blocks(bases, prob.ops, prob.load)
        t0 = time.perf_counter()
        solution = multires.solve_blocks(system, cfg.strategy, cfg.restart,
                                         cfg.rtol, cfg.maxiter)
        solve_ms = int(1000 * (time.perf_counter() - t0))
        err = fem.v_norm(prob.u_ref - solution.combined, prob.ops)
        ref_norm = fem.v_norm(prob.u_ref, prob.ops)
        extra = {
            "err_V": _fmt(err),
            "ref_norm": _fmt(ref_norm),
            "err_rel": _fmt(err / ref_norm if ref_norm else np.nan),
            "kappa2_h": _fmt(kappa ** 2 * cfg.hfine),
            "H1_kappa": _fmt(cfg.H1 * kappa),
        }
        for basis, block, stats in zip(bases, system.blocks, solution.stats):
            diag = diagnostics(block, samples=cfg.fov_samples,
                               seed=cfg.seed + basis.level)
            row = _base_row(cfg, kappa, cfg.H1, HL, L, m)
            row.update({
                "level": basis.level,
                "block_dim": basis.n,
                "solver_kind": stats.method,
                "gmres_iterations": stats.iterations,
                "gmres_restarts": stats.restarts,
                "gmres_converged": stats.converged,
                "gmres_final_residual": float(stats.final_residual),
                "direct_fallback": stats.direct_fallback,
                "condition": diag.condition,
                "norm2": diag.norm2,
                "smin_proxy": diag.smin,
                "fov_min_real": diag.fov_min_real,
                "fov_min_abs": diag.fov_min_abs,
                "wall_ms_bases": wall_bases[basis.level - 1],
                "wall_ms_solve": solve_ms,
            })
            rows.append(row)
    except Exception as exc:
        errors.append((("scattering",), f"{type(exc).__name__}: {exc}"))
    path = os.path.join(out_dir, "scattering.csv")
    write_rows(path, SCATTERING_COLUMNS, rows)
    _finish_meta(path, cfg, errors, extra)
    return path, errors


def run_decay(cfg: ExperimentConfig, out_dir):
    groups = [(cfg, kappa) for kappa in cfg.kappa]
    rows, errors = _run_groups(cfg, groups, _decay_group,
                               lambda r: (r["kappa"], r["level"]))
    path = os.path.join(out_dir, "decay.csv")
    write_rows(path, DECAY_COLUMNS, rows)
    _finish_meta(path, cfg, errors)
    return path, errors


def _finish_meta(csv_path, cfg, errors, extra=None):
    info = dict(extra or {})
    kappa0 = cfg.kappa[0] if cfg.kappa else 0.0
    info.setdefault("kappa2_h", _fmt(kappa0 ** 2 * cfg.hfine))
    info.setdefault("H1_kappa", _fmt(cfg.H1 * kappa0))
    info["n_row_errors"] = len(errors)
    for i, (group, msg) in enumerate(errors):
        info[f"row_error_{i}"] = f"{group[1:]}: {msg}"
    write_meta(csv_path + ".meta", cfg, info)


RUNNERS = {
    "convergence": run_convergence,
    "stabilization": run_stabilization,
    "varcoeff": run_varcoeff,
    "scattering": run_scattering,
    "decay": run_decay,
}


def run_experiment(cfg: ExperimentConfig, out_dir):
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    return RUNNERS[cfg.experiment](cfg, out_dir)
