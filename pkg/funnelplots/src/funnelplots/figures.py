"""Figures built from funnelkit CSV exports.

Everything here reads CSV files and draws; there is no dynamics or
certificate code. Two figures are supported:

* a per-step level series (columns ``k, t, rho, rho_mc``) showing the
  certified level next to the Monte Carlo envelope, and
* a stage slice for one step: sampled states projected onto two deviation
  coordinates, drawn over the zero contour of the decrease function on
  that plane.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


class FigureError(ValueError):
    """Raised when the inputs cannot produce the requested figure."""


@dataclass
class PlotSpec:
    """Bundle of figure inputs with the cheap invariants checked up front.

    ``series_csv`` feeds the level-series figure; ``samples_csv`` and
    ``grid_csv`` feed the stage slice for step ``step`` (1-based, matching
    the export files) projected onto deviation coordinates ``axes``.
    """

    out: str
    series_csv: str | None = None
    samples_csv: str | None = None
    grid_csv: str | None = None
    step: int | None = None
    axes: tuple[int, int] = (0, 1)

    def __post_init__(self):
        a, b = self.axes
        if a == b:
            raise FigureError("slice axes must be distinct")
        if a < 0 or b < 0:
            raise FigureError("slice axes must be non-negative")
        if self.step is not None and self.step < 1:
            raise FigureError("step is 1-based and must be >= 1")
        if not str(self.out):
            raise FigureError("output path must be non-empty")


def _read_table(path):
    """Read a CSV into (comments, header, str rows), skipping blank lines."""

    path = Path(path)
    if not path.exists():
        raise FigureError(f"{path}: file not found")
    comments = []
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            if row[0].lstrip().startswith("#"):
                comments.append(",".join(row))
                continue
            rows.append(row)
    if not rows:
        raise FigureError(f"{path}: no header row")
    return comments, [c.strip() for c in rows[0]], rows[1:]


def _columns(path, header, rows, names):
    """Extract named columns as float arrays, erroring on absent names."""

    missing = [n for n in names if n not in header]
    if missing:
        raise FigureError(f"{path}: missing columns {missing} (have {header})")
    idx = [header.index(n) for n in names]
    try:
        data = np.array([[float(r[i]) for i in idx] for r in rows])
    except (ValueError, IndexError) as exc:
        raise FigureError(f"{path}: malformed row ({exc})") from exc
    if data.size == 0:
        raise FigureError(f"{path}: no data rows")
    return [data[:, j] for j in range(len(names))]


def plot_rho_series(series_csv, out, title=None):
    """Draw the certified level and the Monte Carlo envelope per step.

    The input must carry columns ``k, t, rho, rho_mc``. The figure refuses
    to render if any certified level sits below the empirical envelope;
    that would mean the exporting run was broken, not a plotting matter.
    Returns the output path.
    """

    _, header, rows = _read_table(series_csv)
    k, t, rho, rho_mc = _columns(series_csv, header, rows, ["k", "t", "rho", "rho_mc"])
    bad = np.nonzero(rho < rho_mc)[0]
    if bad.size:
        j = int(bad[0])
        raise FigureError(
            f"{series_csv}: certified level below Monte Carlo envelope at "
            f"step {int(k[j])} ({rho[j]:.6g} < {rho_mc[j]:.6g})"
        )

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(k, rho, color="tab:blue", lw=1.8, label="certified level")
    ax.plot(k, rho_mc, color="tab:orange", lw=1.4, ls="--", label="Monte Carlo envelope")
    ax.set_xlabel("step k")
    ax.set_ylabel("level")
    ax.set_title(title or "Invariant level per step")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def _declared_step(comments, prefix):
    """Pull an integer out of a '# step: N' style comment, if present."""

    for c in comments:
        text = c.lstrip("#").strip()
        if text.startswith(prefix):
            try:
                return int(text.split(":", 1)[1].strip())
            except ValueError:
                return None
    return None


def plot_roots_slice(samples_csv, grid_csv, step, axes, out, title=None):
    """Scatter one step's sampled states over the zero set of the decrease rate.

    ``samples_csv`` holds rows ``k, x0.., w0.., provenance``; rows with
    ``k == step`` are kept. ``grid_csv`` holds ``u, v, vdot`` on a plane
    spanned by deviation coordinates ``axes``; the shaded region is where
    the rate is non-positive and the drawn contour is its zero level.
    Returns the output path.
    """

    spec = PlotSpec(out=str(out), samples_csv=str(samples_csv),
                    grid_csv=str(grid_csv), step=int(step), axes=tuple(axes))
    a, b = spec.axes

    comments, header, rows = _read_table(samples_csv)
    if "k" not in header or "provenance" not in header:
        raise FigureError(f"{samples_csv}: missing columns ['k', 'provenance'] (have {header})")
    state_cols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
    n = len(state_cols)
    if n == 0:
        raise FigureError(f"{samples_csv}: no state columns x0..")
    if a >= n or b >= n:
        raise FigureError(f"axes {spec.axes} out of range for {n} state columns")

    ki = header.index("k")
    pi = header.index("provenance")
    ai = header.index(f"x{a}")
    bi = header.index(f"x{b}")
    kept = [r for r in rows if int(float(r[ki])) == spec.step]
    if not kept:
        raise FigureError(f"{samples_csv}: no samples for step {spec.step}")
    xs = np.array([float(r[ai]) for r in kept])
    ys = np.array([float(r[bi]) for r in kept])
    tags = np.array([r[pi].strip() for r in kept])

    gcomments, gheader, grows = _read_table(grid_csv)
    u, v, vdot = _columns(grid_csv, gheader, grows, ["u", "v", "vdot"])
    if u.size < 3:
        raise FigureError(f"{grid_csv}: need at least 3 grid points")
    gstep = _declared_step(gcomments, "step")
    if gstep is not None and gstep != spec.step:
        raise FigureError(f"{grid_csv}: grid is for step {gstep}, requested {spec.step}")

    fig, ax = plt.subplots(figsize=(6.4, 5.4))
    try:
        ax.tricontourf(u, v, vdot, levels=[float(vdot.min()) - 1.0, 0.0],
                       colors=["tab:green"], alpha=0.15)
        cs = ax.tricontour(u, v, vdot, levels=[0.0], colors=["tab:green"], linewidths=1.6)
        if cs.levels.size:
            ax.plot([], [], color="tab:green", lw=1.6, label="zero decrease rate")
    except (ValueError, RuntimeError) as exc:
        raise FigureError(f"{grid_csv}: cannot contour grid ({exc})") from exc

    styles = {
        "boundary": dict(s=9, color="tab:blue", alpha=0.55, marker="o"),
        "critical": dict(s=42, color="tab:red", marker="x", linewidths=1.4),
    }
    for tag in dict.fromkeys(tags):
        sel = tags == tag
        style = styles.get(tag, dict(s=14, color="tab:gray", marker="^"))
        ax.scatter(xs[sel], ys[sel], label=f"{tag} samples", **style)

    ax.set_xlabel(f"deviation x{a}")
    ax.set_ylabel(f"deviation x{b}")
    ax.set_title(title or f"Stage samples and decrease boundary, step {spec.step}")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    outp = Path(spec.out)
    fig.savefig(outp, dpi=150)
    plt.close(fig)
    return outp
