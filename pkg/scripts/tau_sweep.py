"""Sweep the retention target tau on a model workload and print the tradeoff.

Runs the tiny transformer once per tau, then tabulates kept-token ratio,
flops reduction, and cache reduction. The same numbers are available from
`zipvl sweep-tau`; this script is the quick human-readable view.

Usage:
    python3 scripts/tau_sweep.py [--n 256] [--layers 4] [--seed 1234]
                                 [--mode zipvl-exact] [--csv out.csv]
"""

import argparse

from zipvl import cli


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--mode", default="zipvl-exact",
                    choices=("zipvl-exact", "zipvl-probe"))
    ap.add_argument("--taus", default="0.5,0.8,0.9,0.95,0.975,0.99,1.0")
    ap.add_argument("--csv", help="also write the rows as plot-ready CSV")
    args = ap.parse_args()

    cfg = cli.build_config(
        {
            "n": str(args.n),
            "steps": "0",
            "layers": str(args.layers),
            "d_model": str(args.d_model),
            "heads": str(args.heads),
            "mode": args.mode,
            "taus": args.taus,
        },
        {"seed": args.seed},
    )
    rows = cli.cmd_sweep_tau(cfg)

    print(f"mode={args.mode}  n={args.n}  layers={args.layers}  seed={args.seed}")
    print(f"{'tau':>6}  {'mean_ratio':>10}  {'flops_red':>9}  {'kv_red':>7}  {'min_mass':>8}")
    for r in rows:
        print(
            f"{r['tau']:>6.3f}  {r['mean_ratio']:>10.4f}  {r['flops_reduction']:>9.4f}"
            f"  {r['kv_reduction']:>7.4f}  {r['min_retained_mass']:>8.4f}"
        )

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write(cli._emit_csv(rows))
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
