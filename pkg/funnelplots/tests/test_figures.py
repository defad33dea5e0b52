"""Tests for the CSV-driven figure helpers."""

from pathlib import Path

import numpy as np
import pytest

from funnelplots import FigureError, PlotSpec, plot_rho_series, plot_roots_slice
from funnelplots.cli import main

REPO = Path(__file__).resolve().parents[2]
ENTRY_RUN = REPO / "runs" / "entry_demo"


def write_series(path, rows, header="k,t,rho,rho_mc,violations"):
    lines = ["# schema: funnelkit.rho_series/1", header]
    lines += [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def series_rows(n=6, gap=0.8):
    return [(k + 1, 2.0 * k, 1.0 + 0.1 * k, gap * (1.0 + 0.1 * k), 0) for k in range(n)]


def write_samples(path, rows, n_states=3, n_dists=1):
    cols = ["k"] + [f"x{i}" for i in range(n_states)]
    cols += [f"w{i}" for i in range(n_dists)] + ["provenance"]
    lines = [",".join(cols)]
    lines += [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def circle_samples(step=4, count=24):
    # boundary points on the unit circle in the (x0, x2) plane, plus two
    # tagged critical points; x1 and the disturbance stay zero
    rows = []
    for i in range(count):
        th = 2.0 * np.pi * i / count
        rows.append((step, np.cos(th), 0.0, np.sin(th), 0.0, "boundary"))
    rows.append((step, 1.0, 0.0, 0.0, 0.0, "critical"))
    rows.append((step, 0.0, 0.0, 1.0, 0.0, "critical"))
    return rows


def write_grid(path, step=4, axes=(0, 2), extent=1.5, n=21):
    # rate field u^2 + v^2 - 1: zero level is exactly the sample circle
    u = np.linspace(-extent, extent, n)
    uu, vv = np.meshgrid(u, u)
    lines = [f"# step: {step}", f"# axes: {axes[0]},{axes[1]}", "u,v,vdot"]
    for a, b in zip(uu.ravel(), vv.ravel()):
        lines.append(f"{a},{b},{a * a + b * b - 1.0}")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_rho_series_renders(tmp_path):
    csv_path = write_series(tmp_path / "series.csv", series_rows())
    out = plot_rho_series(csv_path, tmp_path / "rho.png")
    assert out.exists() and out.stat().st_size > 0


def test_rho_series_svg_output(tmp_path):
    csv_path = write_series(tmp_path / "series.csv", series_rows())
    out = plot_rho_series(csv_path, tmp_path / "rho.svg")
    assert out.exists() and out.read_text().lstrip().startswith("<?xml")


def test_rho_series_requires_columns(tmp_path):
    csv_path = write_series(tmp_path / "series.csv",
                            [(1, 0.0, 1.0), (2, 2.0, 1.1)], header="k,t,rho")
    with pytest.raises(FigureError, match="rho_mc"):
        plot_rho_series(csv_path, tmp_path / "rho.png")


def test_rho_series_rejects_envelope_violation(tmp_path):
    rows = series_rows()
    rows[3] = (4, 6.0, 1.0, 1.5, 0)
    csv_path = write_series(tmp_path / "series.csv", rows)
    with pytest.raises(FigureError, match="step 4"):
        plot_rho_series(csv_path, tmp_path / "rho.png")


def test_rho_series_equal_levels_allowed(tmp_path):
    csv_path = write_series(tmp_path / "series.csv", series_rows(gap=1.0))
    out = plot_rho_series(csv_path, tmp_path / "rho.png")
    assert out.exists()


def test_rho_series_empty_file(tmp_path):
    path = tmp_path / "series.csv"
    path.write_text("# schema: funnelkit.rho_series/1\n")
    with pytest.raises(FigureError, match="no header"):
        plot_rho_series(path, tmp_path / "rho.png")


def test_rho_series_header_only(tmp_path):
    csv_path = write_series(tmp_path / "series.csv", [])
    with pytest.raises(FigureError, match="no data rows"):
        plot_rho_series(csv_path, tmp_path / "rho.png")


def test_rho_series_missing_file(tmp_path):
    with pytest.raises(FigureError, match="not found"):
        plot_rho_series(tmp_path / "absent.csv", tmp_path / "rho.png")


def test_roots_slice_renders(tmp_path):
    samples = write_samples(tmp_path / "samples.csv", circle_samples())
    grid = write_grid(tmp_path / "grid.csv")
    out = plot_roots_slice(samples, grid, 4, (0, 2), tmp_path / "roots.png")
    assert out.exists() and out.stat().st_size > 0


def test_roots_slice_no_samples_for_step(tmp_path):
    samples = write_samples(tmp_path / "samples.csv", circle_samples(step=4))
    grid = write_grid(tmp_path / "grid.csv", step=9)
    with pytest.raises(FigureError, match="no samples for step 9"):
        plot_roots_slice(samples, grid, 9, (0, 2), tmp_path / "roots.png")


def test_roots_slice_axes_out_of_range(tmp_path):
    samples = write_samples(tmp_path / "samples.csv", circle_samples())
    grid = write_grid(tmp_path / "grid.csv")
    with pytest.raises(FigureError, match="out of range"):
        plot_roots_slice(samples, grid, 4, (0, 7), tmp_path / "roots.png")


def test_roots_slice_step_mismatch(tmp_path):
    rows = circle_samples(step=2)
    samples = write_samples(tmp_path / "samples.csv", rows)
    grid = write_grid(tmp_path / "grid.csv", step=4)
    with pytest.raises(FigureError, match="grid is for step 4"):
        plot_roots_slice(samples, grid, 2, (0, 2), tmp_path / "roots.png")


def test_roots_slice_requires_grid_columns(tmp_path):
    samples = write_samples(tmp_path / "samples.csv", circle_samples())
    grid = tmp_path / "grid.csv"
    grid.write_text("u,v\n0,0\n1,1\n2,2\n")
    with pytest.raises(FigureError, match="vdot"):
        plot_roots_slice(samples, grid, 4, (0, 2), tmp_path / "roots.png")


def test_plotspec_rejects_equal_axes():
    with pytest.raises(FigureError, match="distinct"):
        PlotSpec(out="fig.png", axes=(3, 3))


def test_plotspec_rejects_negative_axes():
    with pytest.raises(FigureError, match="non-negative"):
        PlotSpec(out="fig.png", axes=(-1, 2))


def test_plotspec_rejects_zero_step():
    with pytest.raises(FigureError, match="1-based"):
        PlotSpec(out="fig.png", step=0)


def test_cli_rho(tmp_path, capsys):
    csv_path = write_series(tmp_path / "series.csv", series_rows())
    out = tmp_path / "rho.png"
    assert main(["rho", "--csv", str(csv_path), "--out", str(out)]) == 0
    assert out.exists()
    assert str(out) in capsys.readouterr().out


def test_cli_roots(tmp_path):
    samples = write_samples(tmp_path / "samples.csv", circle_samples())
    grid = write_grid(tmp_path / "grid.csv")
    out = tmp_path / "roots.png"
    code = main(["roots", "--samples", str(samples), "--grid", str(grid),
                 "--step", "4", "--axes", "0,2", "--out", str(out)])
    assert code == 0 and out.exists()


def test_cli_reports_errors(tmp_path, capsys):
    code = main(["rho", "--csv", str(tmp_path / "absent.csv"),
                 "--out", str(tmp_path / "rho.png")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_cli_rejects_bad_axes(tmp_path, capsys):
    samples = write_samples(tmp_path / "samples.csv", circle_samples())
    grid = write_grid(tmp_path / "grid.csv")
    code = main(["roots", "--samples", str(samples), "--grid", str(grid),
                 "--step", "4", "--axes", "1", "--out", str(tmp_path / "r.png")])
    assert code == 2
    assert "--axes" in capsys.readouterr().err


def test_entry_run_series_figure(tmp_path):
    out = plot_rho_series(ENTRY_RUN / "rho_series.csv", tmp_path / "entry_rho.png")
    assert out.exists() and out.stat().st_size > 0


def test_entry_run_roots_figure(tmp_path):
    out = plot_roots_slice(ENTRY_RUN / "samples_k7.csv",
                           ENTRY_RUN / "vdot_slice_k7.csv",
                           7, (3, 4), tmp_path / "entry_roots.png")
    assert out.exists() and out.stat().st_size > 0
