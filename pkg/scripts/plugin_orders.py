"""Print plug-in (closed-form) convergence slopes for every catalogued problem.

    python3 scripts/plugin_orders.py --grid-n 10,20,40,80 --paths 4096
"""

import argparse

from bsvie import evaluation, problems


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--grid-n", default="10,20,40,80")
    parser.add_argument("--paths", type=int, default=2**12)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    Ns = [int(n) for n in args.grid_n.split(",")]
    # metrics at rounding level (exact plug-in) have no meaningful slope
    for name in sorted(problems.CATALOG):
        study = evaluation.convergence_study(problems.get_problem(name), Ns, "plugin", M=args.paths, seed=args.seed)
        fits = "  ".join(f"{m}={f.slope:+.3f}" for m, f in study.fits.items() if min(f.values) > 1e-12)
        losses = " ".join(f"{r.err_t:.2e}" for r in study.reports)
        print(f"{name:10s} loss[{losses}]  {fits}")


if __name__ == "__main__":
    main()
