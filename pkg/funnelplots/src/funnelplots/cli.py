"""Command line front end for the funnelkit figure helpers."""

import argparse
import sys

from .figures import FigureError, plot_rho_series, plot_roots_slice


def build_parser():
    parser = argparse.ArgumentParser(
        prog="funnelplots",
        description="Render figures from funnelkit CSV exports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    rho = sub.add_parser("rho", help="certified level vs Monte Carlo envelope")
    rho.add_argument("--csv", required=True, help="rho series CSV (k,t,rho,rho_mc,...)")
    rho.add_argument("--out", required=True, help="output image path (.png or .svg)")
    rho.add_argument("--title", default=None)

    roots = sub.add_parser("roots", help="stage samples over the zero decrease contour")
    roots.add_argument("--samples", required=True, help="stage samples CSV (k,x*,w*,provenance)")
    roots.add_argument("--grid", required=True, help="decrease-rate slice CSV (u,v,vdot)")
    roots.add_argument("--step", required=True, type=int, help="1-based step to draw")
    roots.add_argument("--axes", default="0,1", help="two deviation coordinates, e.g. 3,4")
    roots.add_argument("--out", required=True, help="output image path (.png or .svg)")
    roots.add_argument("--title", default=None)
    return parser


def _parse_axes(text):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) != 2:
        raise FigureError(f"--axes expects two comma-separated indices, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise FigureError(f"--axes indices must be integers, got {text!r}") from exc


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rho":
            out = plot_rho_series(args.csv, args.out, title=args.title)
        else:
            axes = _parse_axes(args.axes)
            out = plot_roots_slice(args.samples, args.grid, args.step, axes,
                                   args.out, title=args.title)
    except FigureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
