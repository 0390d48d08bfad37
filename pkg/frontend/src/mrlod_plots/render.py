"""Render experiment CSV outputs into the standard figure set.

Rendering is a pure function of the CSV bytes and the figure spec: fixed
ordering, fixed DPI, no clocks, and pinned PNG metadata, so repeated runs
produce byte-identical files. Each figure comes with a caption text file
so figures stay diffable.
"""

import csv
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["FigureSpec", "RenderError", "render", "read_csv"]

KINDS = ("convergence", "stabilization", "varcoeff", "sparsity", "solver_table")
SCHEMA_VERSION = "1"
PNG_METADATA = {"Software": "mrlod-plots"}


class RenderError(ValueError):
    pass


@dataclass
class FigureSpec:
    kind: str
    csv: list
    out: str
    caption_out: str = ""
    field_csv: str = ""
    floor: float = -16.0
    dpi: int = 150
    caption_date: bool = False
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RenderError(f"unknown figure kind {self.kind!r}")
        if not self.csv:
            raise RenderError("no input files given")
        if not self.caption_out:
            self.caption_out = os.path.splitext(self.out)[0] + ".caption.txt"

    @classmethod
    def from_file(cls, path) -> "FigureSpec":
        values = {}
        try:
            with open(path) as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise RenderError(
                            f"{path}:{lineno}: expected key=value, got {line!r}")
                    key, val = (part.strip() for part in line.split("=", 1))
                    values[key] = val
        except OSError as exc:
            raise RenderError(f"cannot read spec file {path}: {exc}") from exc
        known = {}
        options = {}
        for key, val in values.items():
            if key == "csv":
                known[key] = [p.strip() for p in val.split(";") if p.strip()]
            elif key == "floor":
                known[key] = float(val)
            elif key == "dpi":
                known[key] = int(val)
            elif key == "caption_date":
                known[key] = val.lower() in ("1", "true", "yes")
            elif key in ("kind", "out", "caption_out", "field_csv"):
                known[key] = val
            else:
                options[key] = val
        if "kind" not in known or "out" not in known:
            raise RenderError("spec needs at least kind= and out=")
        if "csv" not in known:
            raise RenderError("spec needs csv= (';'-separated paths)")
        return cls(options=options, **known)


def read_csv(path, required=()):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise RenderError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise RenderError(f"{path} has no data rows")
    missing = [col for col in required if col not in rows[0]]
    if missing:
        raise RenderError(f"{path} lacks columns {missing}")
    if "schema_version" in rows[0]:
        versions = {row["schema_version"] for row in rows}
        if versions != {SCHEMA_VERSION}:
            raise RenderError(
                f"{path} has schema_version {versions}, expected {SCHEMA_VERSION}")
    return rows


def _series(rows, key_cols, x_col, y_col):
    """Group rows into sorted (key -> (x, y) arrays) mappings."""
    groups = {}
    for row in rows:
        key = tuple(row[c] for c in key_cols)
        groups.setdefault(key, []).append((float(row[x_col]), float(row[y_col])))
    out = {}
    for key in sorted(groups):
        pts = sorted(groups[key], reverse=True)
        xs = np.array([p[0] for p in pts])
        ys = np.array([p[1] for p in pts])
        out[key] = (xs, ys)
    return out


def _slope_guide(ax, xs, anchor_y, slope=2.0):
    ref = anchor_y * (xs / xs[0]) ** slope
    ax.loglog(xs, ref, "k--", linewidth=0.9, label=f"slope {slope:g}")


def _style(ax, xlabel, ylabel):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)


def _save(fig, spec, caption_lines):
    out_dir = os.path.dirname(os.path.abspath(spec.out))
    os.makedirs(out_dir, exist_ok=True)
    fig.savefig(spec.out, dpi=spec.dpi, metadata=PNG_METADATA)
    plt.close(fig)
    with open(spec.caption_out, "w") as fh:
        fh.write("\n".join(caption_lines) + "\n")


def _render_convergence(spec):
    rows = read_csv(spec.csv[0], required=("kappa", "m", "HL", "err_V"))
    kappas = sorted({row["kappa"] for row in rows}, key=float)
    fig, axes = plt.subplots(1, len(kappas),
                             figsize=(3.2 * len(kappas), 3.0), squeeze=False)
    for ax, kap in zip(axes[0], kappas):
        sub = [row for row in rows if row["kappa"] == kap]
        groups = _series(sub, ("m",), "HL", "err_V")
        for (mval,), (xs, ys) in groups.items():
            ax.loglog(xs, ys, marker="o", markersize=3, label=f"m={mval}")
        xs = next(iter(groups.values()))[0]
        best = min(ys[0] for xs_, ys in groups.values())
        _slope_guide(ax, xs, best * 0.8)
        ax.set_title(f"kappa = {float(kap):g}", fontsize=9)
        _style(ax, "H_L", "error (V-norm)")
    fig.tight_layout()
    _save(fig, spec, [
        "Multi-level error against the finest mesh size, one panel per wave "
        "number, one series per oversampling radius m.",
        "The dashed line indicates second order.",
        f"Source: {', '.join(os.path.basename(p) for p in spec.csv)}",
    ])


def _render_stabilization(spec):
    rows = read_csv(spec.csv[0], required=("variant", "m", "HL", "err_V"))
    variants = sorted({row["variant"] for row in rows})
    fig, axes = plt.subplots(1, len(variants),
                             figsize=(3.2 * len(variants), 3.0), squeeze=False)
    for ax, variant in zip(axes[0], variants):
        sub = [row for row in rows if row["variant"] == variant]
        groups = _series(sub, ("m",), "HL", "err_V")
        for (mval,), (xs, ys) in groups.items():
            ax.loglog(xs, ys, marker="o", markersize=3, label=f"m={mval}")
        xs = next(iter(groups.values()))[0]
        best = min(ys[0] for xs_, ys in groups.values())
        _slope_guide(ax, xs, best * 0.8)
        ax.set_title(variant, fontsize=9)
        _style(ax, "H_1", "error (V-norm)")
    fig.tight_layout()
    _save(fig, spec, [
        "Single-level error under coarse-mesh refinement for the two basis "
        "constructions; the average-preserving stable projection keeps the "
        "left panel flat while the plain lift degrades.",
        f"Source: {', '.join(os.path.basename(p) for p in spec.csv)}",
    ])


def _render_varcoeff(spec):
    rows = read_csv(spec.csv[0], required=("m", "HL", "err_V_weighted"))
    if not spec.field_csv:
        raise RenderError("varcoeff figure needs field_csv=")
    field_rows = read_csv(spec.field_csv, required=("ix", "iy", "value"))
    n = max(int(row["ix"]) for row in field_rows) + 1
    grid = np.ones((n, n))
    for row in field_rows:
        grid[int(row["iy"]), int(row["ix"])] = float(row["value"])
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7.0, 3.0))
    im = ax0.imshow(grid, origin="lower", cmap="viridis", extent=(0, 1, 0, 1))
    fig.colorbar(im, ax=ax0, shrink=0.85)
    ax0.set_title("coefficient field", fontsize=9)
    groups = _series(rows, ("m",), "HL", "err_V_weighted")
    for (mval,), (xs, ys) in groups.items():
        ax1.loglog(xs, ys, marker="o", markersize=3, label=f"m={mval}")
    xs = next(iter(groups.values()))[0]
    best = min(ys[0] for xs_, ys in groups.values())
    _slope_guide(ax1, xs, best * 0.8)
    _style(ax1, "H_L", "error (weighted V-norm)")
    fig.tight_layout()
    _save(fig, spec, [
        "Left: piecewise-constant coefficient realization with random "
        "inclusions. Right: error in the coefficient-weighted energy norm.",
        f"Source: {', '.join(os.path.basename(p) for p in [spec.csv[0], spec.field_csv])}",
    ])


def _render_sparsity(spec):
    path = spec.csv[0]
    try:
        with open(path) as fh:
            header = fh.readline().strip()
            triplets = [line.split() for line in fh if line.strip()]
    except OSError as exc:
        raise RenderError(f"cannot read {path}: {exc}") from exc
    if header.split() != ["row", "col", "log10abs"]:
        raise RenderError(f"{path} is not a sparsity pattern file")
    if not triplets:
        raise RenderError(f"{path} has no entries")
    rows = np.array([int(t[0]) for t in triplets])
    cols = np.array([int(t[1]) for t in triplets])
    vals = np.array([float(t[2]) for t in triplets])
    n = int(max(rows.max(), cols.max())) + 1
    grid = np.full((n, n), np.nan)
    keep = vals >= spec.floor
    grid[rows[keep], cols[keep]] = vals[keep]
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    cmap = matplotlib.colormaps["gray_r"].copy()
    cmap.set_bad("white")
    im = ax.imshow(grid, cmap=cmap, interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.8, label="log10 |entry|")
    ax.set_xlabel("column")
    ax.set_ylabel("row")
    fig.tight_layout()
    _save(fig, spec, [
        "Magnitude pattern of the coupled multi-level matrix on a "
        "logarithmic gray scale; zero entries are white.",
        f"Source: {os.path.basename(path)}",
    ])


def _render_solver_table(spec):
    rows = read_csv(spec.csv[0], required=(
        "level", "block_dim", "solver_kind", "gmres_iterations", "condition"))
    rows = sorted(rows, key=lambda r: int(r["level"]))
    lines = [
        "| level | dimension | solver | iterations | condition |",
        "|------:|----------:|:-------|-----------:|----------:|",
    ]
    for row in rows:
        iters = row["gmres_iterations"] if row["solver_kind"] == "gmres" else "-"
        cond = float(row["condition"])
        lines.append(
            f"| {row['level']} | {row['block_dim']} | {row['solver_kind']} "
            f"| {iters} | {cond:.3e} |")
    os.makedirs(os.path.dirname(os.path.abspath(spec.out)), exist_ok=True)
    with open(spec.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(spec.caption_out, "w") as fh:
        fh.write("Per-level linear system properties: block dimension, solver "
                 "choice, iteration count and condition number.\n"
                 f"Source: {os.path.basename(spec.csv[0])}\n")


_RENDERERS = {
    "convergence": _render_convergence,
    "stabilization": _render_stabilization,
    "varcoeff": _render_varcoeff,
    "sparsity": _render_sparsity,
    "solver_table": _render_solver_table,
}


def render(spec: FigureSpec) -> None:
    """Produce the figure (or table) and its caption file."""
    _RENDERERS[spec.kind](spec)
