"""Show why a shared mass target beats a shared keep-ratio across layers.

Part 1 sizes the budget for a peaked and a diffuse score workload at the
same tau: the peaked one gets away with far fewer tokens.

Part 2 splices both kinds into one heterogeneous workload and compares the
adaptive policy against a fixed policy matched to the same average budget:
the fixed policy overspends on easy layers and misses the mass target on
hard ones.

Usage:
    python3 scripts/adaptivity_demo.py [--n 512] [--tau 0.95] [--seed 7]
"""

import argparse

import numpy as np

from zipvl import budget, cli, workload


def profile(kind: str, n: int, layers: int, conc: float, tau: float, seed: int):
    scores = workload.generate_workload(kind, n, layers, conc, seed)
    ps = []
    for row in scores:
        mass = float(np.sum(row.astype(np.float64)))
        ps.append(budget.adaptive_budget(row, tau, mass).p)
    return ps


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--layers", type=int, default=8)
    ap.add_argument("--tau", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    print(f"budget p at tau={args.tau} for n={args.n} tokens, {args.layers} layers\n")
    for kind, conc in (("peaked", 16.0), ("diffuse", 8.0)):
        ps = profile(kind, args.n, args.layers, conc, args.tau, args.seed)
        ratios = [p / args.n for p in ps]
        print(f"  {kind:>8}: p per layer = {ps}")
        print(f"  {'':>8}  mean keep ratio = {np.mean(ratios):.3f}\n")

    # part 2: alternate peaked and diffuse layers, compare policies
    peaked = workload.generate_workload("peaked", args.n, args.layers, 16.0, args.seed)
    diffuse = workload.generate_workload("diffuse", args.n, args.layers, 8.0, args.seed + 1)
    hetero = np.empty((2 * args.layers, args.n), dtype=np.float32)
    hetero[0::2] = peaked
    hetero[1::2] = diffuse

    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".csv", delete=False, newline="") as fh:
        workload.write_workload_csv(fh, hetero)
        path = fh.name

    cfg = cli.build_config({"workload": "file", "workload_file": path, "tau": str(args.tau)})
    res = cli.cmd_compare(cfg)
    print(f"heterogeneous workload ({2 * args.layers} layers, alternating kinds):")
    print(f"  fixed ratio matched to adaptive mean: {res['fixed_ratio_used']:.4f}")
    for entry in res["modes"]:
        print(
            f"  {entry['mode']:>12}: mean_ratio={entry['mean_ratio']:.4f}"
            f"  min_retained_mass={entry['min_retained_mass']:.4f}"
            f"  layers_below_tau={entry['layers_below_tau']}"
        )
    print("\nthe adaptive policy meets tau on every layer; the ratio-matched")
    print("fixed policy misses it wherever the scores are diffuse.")


if __name__ == "__main__":
    main()
