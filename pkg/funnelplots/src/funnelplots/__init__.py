"""Plotting companion for funnelkit CSV exports."""

from .figures import FigureError, PlotSpec, plot_rho_series, plot_roots_slice

__all__ = ["FigureError", "PlotSpec", "plot_rho_series", "plot_roots_slice"]
