"""How LF quality affects MF-NPE: sweep the perturbed OU low-fidelity model.

The perturbed LF simulator shifts its drift by --deltas and can invert
the association between parameters and output (--invert adds that
variant). Larger perturbations should erode the value of pretraining,
and the inverted LF should do worst. Each variant gets its own results
directory; a summary table across variants is printed at the end.
"""

import argparse
import statistics

from mfsbi import cli
from mfsbi.results import ResultsStore


def _mean_c2st(out_dir: str, hf_budget: int) -> tuple[float, int]:
    rows = ResultsStore(out_dir).rows(metric="c2st", hf_budget=hf_budget)
    vals = [r["value"] for r in rows]
    return statistics.fmean(vals), len(vals)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/lf-quality")
    ap.add_argument("--deltas", default="0.0,0.25,0.5,1.0")
    ap.add_argument("--invert", action="store_true",
                    help="also run the inverted-association LF variant")
    ap.add_argument("--hf-budget", type=int, default=100)
    ap.add_argument("--lf-budget", type=int, default=10_000)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--n-observations", type=int, default=5)
    args = ap.parse_args()

    variants = [(float(d), False) for d in args.deltas.split(",")]
    if args.invert:
        variants.append((0.0, True))

    summary = []
    for delta, invert in variants:
        tag = "invert" if invert else f"delta-{delta:g}"
        out = f"{args.out}/{tag}"
        cli.main([
            "run",
            "--set", "task=ou2-perturbed",
            "--set", "algorithm=mf-npe",
            "--set", f"delta={delta}",
            "--set", f"invert={'true' if invert else 'false'}",
            "--set", f"lf_budget={args.lf_budget}",
            "--set", f"hf_budgets=[{args.hf_budget}]",
            "--set", f"seeds=[{args.seeds}]",
            "--set", f"n_observations={args.n_observations}",
            "--set", 'metrics=["c2st"]',
            "--set", f"out_dir={out}",
        ])
        mean, n = _mean_c2st(out, args.hf_budget)
        summary.append((tag, mean, n))

    print("variant,c2st_mean,n")
    for tag, mean, n in summary:
        print(f"{tag},{mean:.4f},{n}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
