"""Relative symbol error of the discretised generator under grid refinement.

Usage: python scripts/symbol_convergence.py [--sizes 512 1024 2048 4096]
"""
import argparse

from levyobstacle import OperatorSpec, stable_model, symbol_check, vg_model

XIS = [0.5, 1.0, 2.0, 4.0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[512, 1024, 2048, 4096])
    args = ap.parse_args()
    models = [(f"stable s={s}", stable_model(s)) for s in (0.25, 0.5, 0.75)]
    models.append(("vg", vg_model(0.3, 0.2, -0.1, 0.02)))
    print(f"{'model':<16}" + "".join(f"{n:>12d}" for n in args.sizes) + "   last ratio")
    for name, m in models:
        op = OperatorSpec.from_model(m)
        errs = [symbol_check(op, m.psi, XIS, n=n).max_error for n in args.sizes]
        print(f"{name:<16}" + "".join(f"{e:>12.3e}" for e in errs) + f"   {errs[-2] / errs[-1]:.2f}")


if __name__ == "__main__":
    main()
