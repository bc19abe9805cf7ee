"""Amortized vs sequential multifidelity estimators at a fixed HF budget.

Compares MF-NPE against its truncated-proposal variant (MF-TSNPE) and
the ensemble-acquisition variant (A-MF-TSNPE) on one task. Sequential
methods spend the budget over --rounds rounds per observation, so the
budget must divide evenly.
"""

import argparse

from mfsbi import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--task", default="ou2")
    ap.add_argument("--out", default="runs/sequential")
    ap.add_argument("--hf-budget", type=int, default=100)
    ap.add_argument("--rounds", type=int, default=5)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--n-observations", type=int, default=5)
    ap.add_argument("--ensemble", type=int, default=5)
    args = ap.parse_args()

    common = [
        "--set", f"task={args.task}",
        "--set", f"hf_budgets=[{args.hf_budget}]",
        "--set", f"rounds={args.rounds}",
        "--set", f"seeds=[{args.seeds}]",
        "--set", f"n_observations={args.n_observations}",
        "--set", f"ensemble={args.ensemble}",
        "--set", 'metrics=["c2st"]',
        "--set", f"out_dir={args.out}",
    ]
    for alg in ("mf-npe", "mf-tsnpe", "a-mf-tsnpe"):
        cli.main(["run", "--set", f"algorithm={alg}", *common])
    cli.main(["report", "--results", args.out, "--metric", "c2st"])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
