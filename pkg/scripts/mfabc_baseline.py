"""Multifidelity ABC baseline vs MF-NPE on one task.

MF-ABC screens particles with the LF simulator and corrects the HF
acceptance by inverse continuation probabilities; its budget column
counts particles, with the honest HF call count in the manifest. At
matched nominal budgets the neural estimator should be far more sample
efficient.
"""

import argparse

from mfsbi import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--task", default="ou2")
    ap.add_argument("--out", default="runs/mfabc")
    ap.add_argument("--particles", default="10000")
    ap.add_argument("--hf-budgets", default="100,1000")
    ap.add_argument("--lf-budget", type=int, default=10_000)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--n-observations", type=int, default=5)
    args = ap.parse_args()

    common = [
        "--set", f"task={args.task}",
        "--set", f"seeds=[{args.seeds}]",
        "--set", f"n_observations={args.n_observations}",
        "--set", 'metrics=["c2st"]',
        "--set", f"out_dir={args.out}",
    ]
    cli.main(["run",
              "--set", "algorithm=mf-abc",
              "--set", f"hf_budgets=[{args.particles}]",
              *common])
    cli.main(["run",
              "--set", "algorithm=mf-npe",
              "--set", f"lf_budget={args.lf_budget}",
              "--set", f"hf_budgets=[{args.hf_budgets}]",
              *common])
    cli.main(["report", "--results", args.out, "--metric", "c2st"])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
