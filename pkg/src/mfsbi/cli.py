"""Config-driven command line.

Subcommands: `simulate` (dataset files), `run` (algorithms over a
budget x seed grid with metric rows appended to a results store),
`reference` (build/cache reference posteriors), `report` (pivot rows
into plot-ready CSV), `sbc` (calibration of an amortized run), and
`mfabc` (threshold sweep for the ABC baseline).

Every run is determined by (config, seed): datasets, observations, and
posterior draws all use seeds derived from the config by fixed
arithmetic, so re-running a cell reproduces identical rows.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time

import numpy as np

from .algorithms import (run_a_mf_tsnpe, run_mf_npe, run_mf_npe_chain,
                         run_mf_tsnpe, run_npe, run_tsnpe)
from .config import ExperimentConfig, load_config
from .data import save_dataset
from .mfabc import MfAbcConfig, resample_particles, run_mf_abc
from .metrics import c2st, mmd, nltp, nrmse, sbc_ranks
from .parallel import pool_map
from .reference import load_reference, save_reference
from .results import ResultsStore, report
from .simulators import simulate_batch
from .tasks import get_task, observation_id, observations, reference_posterior
from .training import TrainConfig

log = logging.getLogger(__name__)

AMORTIZED = ("npe", "mf-npe", "mf-npe-chain")
SEQUENTIAL = ("tsnpe", "mf-tsnpe", "a-mf-tsnpe")
_ROLE_LF, _ROLE_HF, _ROLE_SAMPLE = 1, 2, 3


def _data_seed(seed: int, role: int) -> int:
    """Distinct integer stream per (run seed, role)."""
    return seed * 1_000_003 + 100 + role


def _obs_seed(seed: int, i: int) -> int:
    """Per-observation stream for non-amortized runs; i < 1000."""
    return seed * 1000 + i


def _task_from_config(cfg: ExperimentConfig):
    return get_task(cfg.task, delta=cfg.delta, invert=cfg.invert)


def _train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate,
                       val_fraction=cfg.val_fraction, patience=cfg.patience,
                       max_epochs=cfg.max_epochs, seed=seed)


def _reference_samples(task, x_o, n: int, ref_dir: str) -> np.ndarray:
    """Cached reference posterior samples keyed by (task, x_o, method)."""
    if task.loglik is None:
        raise ValueError(
            f"task {task.name!r} has no reference posterior; evaluate with "
            "nltp/nrmse instead of c2st/mmd")
    os.makedirs(ref_dir, exist_ok=True)
    obs_id = observation_id(x_o)
    path = os.path.join(
        ref_dir, f"{task.name}-{obs_id}-{task.reference_method}.csv")
    if os.path.exists(path):
        ref = load_reference(path)
        if len(ref.samples) >= n:
            return ref.samples[:n]
    ref = reference_posterior(task, x_o, n, seed=int(obs_id[:8], 16))
    save_reference(ref, path)
    return ref.samples


def _amortized_posterior(task, cfg: ExperimentConfig, hf_budget: int,
                         seed: int):
    """Train one amortized posterior; returns (posterior, hf_calls)."""
    tc = _train_config(cfg, seed)
    hf_ds = simulate_batch(task.hf, task.prior, hf_budget,
                           _data_seed(seed, _ROLE_HF))
    if cfg.algorithm == "npe":
        post = run_npe(task.prior, hf_ds, tc, arch=task.arch)
    else:
        lf_ds = simulate_batch(task.lf, task.prior, cfg.lf_budget,
                               _data_seed(seed, _ROLE_LF))
        if cfg.algorithm == "mf-npe":
            post = run_mf_npe(task.prior, lf_ds, hf_ds, tc, arch=task.arch)
        else:
            post = run_mf_npe_chain(task.prior, [lf_ds, hf_ds], tc,
                                    arch=task.arch)
    return post, hf_ds.provenance["calls"]


def run_cell(cfg: ExperimentConfig, hf_budget: int, seed: int) -> dict:
    """One (hf_budget, seed) grid cell: train/run, evaluate every metric
    at every observation. Returns rows and the honest HF-call count."""
    task = _task_from_config(cfg)
    if ("c2st" in cfg.metrics or "mmd" in cfg.metrics) and task.loglik is None:
        raise ValueError(
            f"task {task.name!r} has no reference posterior for c2st/mmd; "
            "use nltp/nrmse")
    theta_o, x_o = observations(task, cfg.n_observations, cfg.observation_seed)
    ref_dir = os.path.join(cfg.out_dir, "references")
    alg = cfg.algorithm
    uses_lf = alg.startswith(("mf-npe", "mf-tsnpe", "a-mf"))
    hf_calls = 0
    per_obs = []  # (samples, posterior-or-None) per observation

    if alg in AMORTIZED:
        post, hf_calls = _amortized_posterior(task, cfg, hf_budget, seed)
        for i in range(len(x_o)):
            samples = post.sample(cfg.n_posterior_samples, x=x_o[i],
                                  seed=[_data_seed(seed, _ROLE_SAMPLE), i])
            per_obs.append((samples, post))
    elif alg in SEQUENTIAL:
        R = cfg.rounds
        if hf_budget % R:
            raise ValueError(
                f"hf_budget {hf_budget} not divisible by rounds {R}; the "
                "per-round size M must be integral")
        M = hf_budget // R
        lf_ds = None
        if alg != "tsnpe":
            lf_ds = simulate_batch(task.lf, task.prior, cfg.lf_budget,
                                   _data_seed(seed, _ROLE_LF))
        for i in range(len(x_o)):
            tc = _train_config(cfg, _obs_seed(seed, i))
            if alg == "tsnpe":
                post = run_tsnpe(task.prior, task.hf, x_o[i], tc, R=R,
                                 epsilon=cfg.epsilon, M=M, arch=task.arch,
                                 round_data=cfg.round_data)
            elif alg == "mf-tsnpe":
                post = run_mf_tsnpe(task.prior, lf_ds, task.hf, x_o[i], tc,
                                    R=R, epsilon=cfg.epsilon, M=M,
                                    arch=task.arch, round_data=cfg.round_data)
            else:
                post = run_a_mf_tsnpe(task.prior, lf_ds, task.hf, x_o[i], tc,
                                      R=R, epsilon=cfg.epsilon, M=M,
                                      B_fraction=cfg.b_fraction,
                                      E=cfg.ensemble, arch=task.arch)
            hf_calls += post.meta["hf_calls"]
            samples = post.sample(cfg.n_posterior_samples,
                                  seed=[_data_seed(seed, _ROLE_SAMPLE), i])
            per_obs.append((samples, post))
    elif alg == "mf-abc":
        abc_cfg = MfAbcConfig(eps=cfg.eps_abc, eta=cfg.eta)
        for i in range(len(x_o)):
            particles = run_mf_abc(task.prior, task.lf, task.hf, x_o[i],
                                   hf_budget, abc_cfg,
                                   seed=_obs_seed(seed, i))
            hf_calls += particles.meta["n_hf"]
            samples = resample_particles(
                particles, cfg.n_posterior_samples,
                seed=[_data_seed(seed, _ROLE_SAMPLE), i])
            per_obs.append((samples, None))
    else:  # pragma: no cover - config validation rejects unknown names
        raise ValueError(f"unknown algorithm {alg!r}")

    rows = []
    prior_range = task.prior.upper - task.prior.lower
    for i, (samples, post) in enumerate(per_obs):
        obs_id = observation_id(x_o[i])
        for metric in cfg.metrics:
            if metric == "c2st":
                ref = _reference_samples(task, x_o[i], cfg.n_reference, ref_dir)
                value = c2st(ref, samples, seed=_obs_seed(seed, i)).value
            elif metric == "mmd":
                ref = _reference_samples(task, x_o[i], cfg.n_reference, ref_dir)
                value = mmd(ref, samples).value
            elif metric == "nltp":
                if post is None:
                    raise ValueError(
                        "mf-abc yields samples only; nltp needs a posterior "
                        "density, use c2st/mmd/nrmse")
                value = nltp(post, [(theta_o[i], x_o[i])]).value
            else:
                value = nrmse(samples, theta_o[i], prior_range).value
            rows.append({"task": cfg.task, "algorithm": alg,
                         "lf_budget": cfg.lf_budget if uses_lf else 0,
                         "hf_budget": hf_budget, "seed": seed,
                         "observation_id": obs_id, "metric": metric,
                         "value": float(value)})
    return {"rows": rows, "hf_calls": int(hf_calls)}


def _cell_worker(payload):
    cfg_kwargs, hf_budget, seed = payload
    return run_cell(ExperimentConfig(**cfg_kwargs), hf_budget, seed)


def cmd_run(args) -> int:
    cfg = _load(args)
    store = ResultsStore(cfg.out_dir)
    cells = [(b, s) for b in cfg.hf_budgets for s in cfg.seeds]
    pending = []
    for b, s in cells:
        run_id = cfg.hash(hf_budget=b, seed=s)
        if store.completed(run_id):
            print(f"cell hf_budget={b} seed={s}: cached ({run_id})")
        else:
            pending.append((b, s, run_id))

    cfg_kwargs = dataclasses.asdict(cfg)
    n_rows = len(cfg.metrics) * cfg.n_observations
    t0 = time.time()
    outs = pool_map(_cell_worker,
                    [(cfg_kwargs, b, s) for b, s, _ in pending],
                    workers=args.workers)
    for (b, s, run_id), out in zip(pending, outs):
        store.write_manifest(run_id, {
            "config": cfg.to_text(), "task": cfg.task,
            "algorithm": cfg.algorithm, "hf_budget": b, "seed": s,
            "n_rows": n_rows, "hf_calls": out["hf_calls"]})
        for row in out["rows"]:
            row["run_id"] = run_id
            store.append(row)
        print(f"cell hf_budget={b} seed={s}: {len(out['rows'])} rows, "
              f"{out['hf_calls']} HF calls ({run_id})")
    if pending:
        print(f"{len(pending)} cells in {time.time() - t0:.1f}s")
    for metric in cfg.metrics:
        rows = store.rows(task=cfg.task, algorithm=cfg.algorithm)
        print(f"\n== {metric} ==")
        print(report(rows, metric), end="")
    return 0


def cmd_simulate(args) -> int:
    if args.n < 1:
        raise SystemExit("simulate: -n must be >= 1")
    task = get_task(args.task, delta=args.delta, invert=args.invert)
    sim = task.lf if args.fidelity == "low" else task.hf
    t0 = time.time()
    ds = simulate_batch(sim, task.prior, args.n, args.seed)
    out = args.out
    if out is None:
        ext = "npz" if len(sim.x_shape) > 1 else "csv"
        os.makedirs("datasets", exist_ok=True)
        out = os.path.join(
            "datasets",
            f"{args.task}-{args.fidelity}-n{args.n}-seed{args.seed}.{ext}")
    save_dataset(ds, out)
    print(f"{out}: {len(ds)} rows, {ds.provenance['replacements']} "
          f"replacements, {time.time() - t0:.1f}s")
    return 0


def cmd_reference(args) -> int:
    cfg = _load(args)
    task = _task_from_config(cfg)
    _, x_o = observations(task, cfg.n_observations, cfg.observation_seed)
    ref_dir = os.path.join(cfg.out_dir, "references")
    for i in range(len(x_o)):
        t0 = time.time()
        samples = _reference_samples(task, x_o[i], cfg.n_reference, ref_dir)
        obs_id = observation_id(x_o[i])
        print(f"{task.name} obs {obs_id}: {len(samples)} samples, "
              f"{time.time() - t0:.1f}s")
    return 0


def cmd_report(args) -> int:
    store = ResultsStore(args.results_dir)
    rows = store.rows()
    if not rows:
        raise SystemExit(f"no results in {store.results_path}")
    text = report(rows, args.metric, per_observation=args.per_observation)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(args.out)
    else:
        print(text, end="")
    return 0


def cmd_sbc(args) -> int:
    cfg = _load(args)
    if cfg.algorithm not in AMORTIZED:
        raise SystemExit(
            f"sbc needs an amortized algorithm {AMORTIZED}, "
            f"got {cfg.algorithm!r}")
    task = _task_from_config(cfg)
    seed = cfg.seeds[0]
    hf_budget = args.hf_budget or cfg.hf_budgets[0]
    post, _ = _amortized_posterior(task, cfg, hf_budget, seed)
    rep = sbc_ranks(post, task.prior, task.hf, n_pairs=args.n_pairs,
                    L=args.L, seed=cfg.observation_seed)
    for d in range(len(rep.p_values)):
        print(f"dim {d}: chi2 = {rep.statistics[d]:.2f}, "
              f"p = {rep.p_values[d]:.4f}")
    print(f"combined p = {rep.p_value:.4f} "
          f"({'PASS' if rep.p_value > 0.01 else 'FAIL'} at 0.01)")
    return 0 if rep.p_value > 0.01 else 1


def cmd_mfabc(args) -> int:
    cfg = _load(args)
    task = _task_from_config(cfg)
    _, x_o = observations(task, cfg.n_observations, cfg.observation_seed)
    if not 0 <= args.obs_index < len(x_o):
        raise SystemExit(f"--obs-index must be < {len(x_o)}")
    x = x_o[args.obs_index]
    ref = None
    if task.loglik is not None:
        ref = _reference_samples(task, x, cfg.n_reference,
                                 os.path.join(cfg.out_dir, "references"))
    for pair in args.eps_grid.split(";"):
        e1, e2 = (float(v) for v in pair.split(","))
        abc_cfg = MfAbcConfig(eps=(e1, e2), eta=cfg.eta)
        particles = run_mf_abc(task.prior, task.lf, task.hf, x,
                               args.particles, abc_cfg, seed=cfg.seeds[0])
        samples = resample_particles(particles, cfg.n_posterior_samples,
                                     seed=cfg.seeds[0])
        line = (f"eps=({e1:g},{e2:g}) hf_fraction="
                f"{particles.meta['hf_fraction']:.3f}")
        if ref is not None:
            line += f" c2st={c2st(ref, samples, seed=cfg.seeds[0]).value:.3f}"
        print(line)
    return 0


def _load(args) -> ExperimentConfig:
    overrides = args.set or []
    if args.config:
        return load_config(args.config, overrides)
    from .config import parse_config_text
    return parse_config_text("", overrides)


def _add_config_flags(p) -> None:
    p.add_argument("--config", help="plain-text key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfsbi",
        description="multifidelity simulation-based inference experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset file")
    p.add_argument("--task", required=True)
    p.add_argument("--fidelity", choices=("low", "high"), required=True)
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--invert", action="store_true")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("run", help="run the configured algorithm over the "
                                   "budget x seed grid")
    _add_config_flags(p)
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: MFSBI_WORKERS or cores)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("reference", help="build/cache reference posteriors")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_reference)

    p = sub.add_parser("report", help="pivot results into plot-ready CSV")
    p.add_argument("--results-dir", required=True)
    p.add_argument("--metric", default="c2st")
    p.add_argument("--per-observation", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("sbc", help="simulation-based calibration of an "
                                   "amortized run")
    _add_config_flags(p)
    p.add_argument("--hf-budget", type=int, default=None)
    p.add_argument("--n-pairs", type=int, default=200)
    p.add_argument("--L", type=int, default=99)
    p.set_defaults(fn=cmd_sbc)

    p = sub.add_parser("mfabc", help="ABC threshold sweep at one observation")
    _add_config_flags(p)
    p.add_argument("--particles", type=int, default=10_000)
    p.add_argument("--eps-grid", default="1,1",
                   help="semicolon-separated eps_l,eps_h pairs, "
                        "e.g. '0.5,0.5;1,1;2,2'")
    p.add_argument("--obs-index", type=int, default=0)
    p.set_defaults(fn=cmd_mfabc)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
