"""Regenerate the golden CLI outputs in tests/golden/.

The input fixture tests/golden/workload.csv is handcrafted and never
regenerated; everything else is the CLI's own output for pinned arguments.
Run this after an intentional output-schema change, then inspect the diff.

Usage:
    python3 scripts/update_golden.py
"""

import pathlib

from zipvl import cli

GOLDEN = pathlib.Path(__file__).resolve().parent.parent / "tests" / "golden"
WORKLOAD = str(GOLDEN / "workload.csv")

COMMANDS = {
    "run.json": ["run", "--workload-file", WORKLOAD, "--tau", "0.9"],
    "run.csv": ["--format", "csv", "run", "--workload-file", WORKLOAD, "--tau", "0.9"],
    "sweep.json": [
        "sweep-tau", "--workload-file", WORKLOAD, "--taus", "0.5,0.75,0.9,0.975,1.0",
    ],
    "compare.json": ["compare", "--workload-file", WORKLOAD, "--tau", "0.9"],
    "gen_workload.csv": ["gen-workload", "--kind", "peaked", "--n", "16", "--layers", "2"],
}


def main() -> None:
    for name, argv in COMMANDS.items():
        path = GOLDEN / name
        rc = cli.main(["--out", str(path)] + argv)
        if rc != 0:
            raise SystemExit(f"{name}: exit code {rc}")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
