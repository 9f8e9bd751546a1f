"""Perpetual put exercise boundary of a calibrated VG model as the rate varies.

Writes ``rate,x_star,v_at_strike`` rows to stdout.
"""
import argparse

import numpy as np

from levyobstacle import OperatorSpec, free_boundary, perpetual_put, solve_stationary_grid, vg_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", type=float, nargs="+", default=[0.01, 0.02, 0.05, 0.1, 0.2])
    ap.add_argument("--grid", type=int, default=801)
    args = ap.parse_args()
    print("rate,x_star,v_at_strike")
    for r in args.rates:
        m = vg_model(0.3, 0.2, -0.1).calibrated(r)
        v = solve_stationary_grid(perpetual_put(1.0, r, (-4, 4)), OperatorSpec.from_model(m), args.grid)
        print(f"{r!r},{free_boundary(v).single()!r},{float(v.at(np.array([0.0]))[0])!r}")


if __name__ == "__main__":
    main()
