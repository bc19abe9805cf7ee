"""NPE vs MF-NPE on the 2-parameter OU task across HF budgets.

Both methods see the same HF simulations; MF-NPE additionally pretrains
on a fixed LF set. The gap should be largest at small HF budgets and
close as the budget grows. Prints the combined C2ST pivot when done.

Desk-scale by default; pass --hf-budgets/--seeds to run the full grid.
"""

import argparse

from mfsbi import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ou2-sweep")
    ap.add_argument("--lf-budget", type=int, default=10_000)
    ap.add_argument("--hf-budgets", default="50,100,1000")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--n-observations", type=int, default=5)
    args = ap.parse_args()

    common = [
        "--set", "task=ou2",
        "--set", f"lf_budget={args.lf_budget}",
        "--set", f"hf_budgets=[{args.hf_budgets}]",
        "--set", f"seeds=[{args.seeds}]",
        "--set", f"n_observations={args.n_observations}",
        "--set", 'metrics=["c2st"]',
        "--set", f"out_dir={args.out}",
    ]
    for alg in ("npe", "mf-npe"):
        cli.main(["run", "--set", f"algorithm={alg}", *common])
    cli.main(["report", "--results", args.out, "--metric", "c2st"])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
