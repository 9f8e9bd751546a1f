"""Fitted Hoelder exponents of the VG put value across grid sizes and rates."""
import argparse

from levyobstacle import (OperatorSpec, american_put, perpetual_put, regularity_report,
                          solve_evolution_grid, solve_stationary_grid, vg_model)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grids", type=int, nargs="+", default=[401, 801, 1601])
    ap.add_argument("--rates", type=float, nargs="+", default=[0.02, 0.05, 0.1])
    args = ap.parse_args()
    print(f"{'r':>6}{'n':>7}{'alpha_x':>10}{'r2':>9}{'lip_x':>8}{'alpha_t':>10}")
    for r in args.rates:
        op = OperatorSpec.from_model(vg_model(0.3, 0.2, -0.1).calibrated(r))
        for n in args.grids:
            spec = perpetual_put(1.0, r, (-4, 4))
            rep = regularity_report(solve_stationary_grid(spec, op, n), spec)
            ev = american_put(1.0, r, 0.5, (-4, 4))
            rt = regularity_report(solve_evolution_grid(ev, op, 100, n), ev)
            print(f"{r:>6.2f}{n:>7d}{rep.alpha_x:>10.3f}{rep.r2:>9.4f}{rep.lip_x:>8.3f}{rt.alpha_t:>10.3f}")


if __name__ == "__main__":
    main()
