"""Experiment harness: trace generation, profiling, runs, sweeps, ablations.

Every command is deterministic given its flags and seeds. Outputs are CSV/JSON
files under --out; the run summary echoes the full configuration. Scheduling
overhead fields in summaries are wall-clock measurements and are the only
outputs that vary across reruns.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from importlib import resources
from pathlib import Path

from .errors import LLMSchedError
from .profiler import (
    ApplicationProfile,
    CalibrationProfile,
    load_profile,
    save_profile,
    train_profile,
)
from .schedulers import POLICIES, SchedulerConfig
from .simulator import ClusterConfig, run as run_simulation, write_job_records, write_summary
from .workload import (
    WorkloadSpec,
    collect_trace,
    generate_workload,
    load_catalog,
    read_trace,
    write_trace,
)

PRESETS = ("mixed", "predefined", "chainlike", "planning")


def _cluster_payload(args) -> dict:
    if getattr(args, "cluster", None):
        with open(args.cluster) as fh:
            return json.load(fh)
    text = resources.files("llmsched").joinpath("data/clusters.json").read_text()
    presets = json.loads(text)
    return presets[args.workload]


def _load_cluster(args) -> ClusterConfig:
    payload = _cluster_payload(args)
    return ClusterConfig(
        regular_executors=int(payload["regular_executors"]),
        llm_executors=int(payload["llm_executors"]),
        max_batch=int(payload["max_batch"]),
        calibration=CalibrationProfile(tuple(float(v) for v in payload["latencies_ms"])),
    )


def _load_profiles(profiles_dir: str) -> dict[str, ApplicationProfile]:
    out: dict[str, ApplicationProfile] = {}
    for path in sorted(Path(profiles_dir).glob("*.profile.json")):
        profile = load_profile(str(path))
        out[profile.app_id] = profile
    return out


def _workload_flags(p: argparse.ArgumentParser):
    p.add_argument("--workload", default="mixed", choices=PRESETS)
    p.add_argument("--num-jobs", type=int, default=300)
    p.add_argument("--lambda", dest="rate", type=float, default=0.9,
                   help="job arrival rate (jobs/second)")


def _scheduler_flags(p: argparse.ArgumentParser):
    p.add_argument("--scheduler", default="llmsched", choices=POLICIES)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--ratio", type=float, default=0.2)


def _make_jobs(args, catalog, seed: int):
    spec = WorkloadSpec(
        mix=catalog.mix_for(args.workload),
        num_jobs=args.num_jobs,
        rate=args.rate,
        seed=seed,
    )
    return generate_workload(spec, catalog)


def _run_cell(args, catalog, cluster, profiles, scheduler: SchedulerConfig, seed: int,
              score_sink=None):
    jobs = _make_jobs(args, catalog, seed)
    return run_simulation(cluster, jobs, scheduler, profiles, score_sink=score_sink)


def _config_echo(args, scheduler: SchedulerConfig, seed: int) -> dict:
    return {
        "workload": args.workload,
        "num_jobs": args.num_jobs,
        "rate": args.rate,
        "seed": seed,
        "policy": scheduler.policy,
        "epsilon": scheduler.epsilon,
        "ratio": scheduler.ratio,
        "use_posteriors": scheduler.use_posteriors,
        "cluster": _cluster_payload(args),
    }


def cmd_gen_traces(args) -> int:
    catalog = load_catalog()
    jobs = _make_jobs(args, catalog, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_trace(collect_trace(jobs), args.out)
    print(f"wrote {len(jobs)} trace records to {args.out}")
    return 0


def cmd_profile(args) -> int:
    catalog = load_catalog()
    records = read_trace(args.traces)
    calibration = _load_cluster(args).calibration
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    apps = sorted({r.app_id for r in records})
    for app_id in apps:
        template = catalog.templates.get(app_id)
        if template is None:
            raise LLMSchedError(f"trace mentions unknown application {app_id}")
        profile = train_profile(template, records, calibration)
        save_profile(profile, str(out_dir / f"{app_id}.profile.json"))
    print(f"trained {len(apps)} profiles into {out_dir}")
    return 0


def _score_writer(path: Path):
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(
        ["time", "job_id", "stage_id", "mutual_information", "range_sum",
         "dynamic_entropy", "dynamic_range", "reduction"]
    )

    def sink(now, job_id, stage_id, score):
        writer.writerow(
            [now, job_id, stage_id, score.mutual_information, score.range_sum,
             score.dynamic_entropy, score.dynamic_range, score.reduction]
        )

    return sink, fh


def cmd_run(args) -> int:
    catalog = load_catalog()
    cluster = _load_cluster(args)
    profiles = _load_profiles(args.profiles)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scheduler_base = SchedulerConfig(
        policy=args.scheduler, epsilon=args.epsilon, ratio=args.ratio
    )
    for seed in args.seeds:
        scheduler = SchedulerConfig(
            policy=scheduler_base.policy,
            epsilon=scheduler_base.epsilon,
            ratio=scheduler_base.ratio,
            seed=seed,
        )
        tag = f"{args.scheduler}_{seed}"
        sink = fh = None
        if args.dump_scores:
            sink, fh = _score_writer(out_dir / f"scores_{tag}.csv")
        metrics = _run_cell(args, catalog, cluster, profiles, scheduler, seed, sink)
        if fh is not None:
            fh.close()
        write_job_records(metrics, str(out_dir / f"jobs_{tag}.csv"))
        write_summary(metrics, _config_echo(args, scheduler, seed),
                      str(out_dir / f"summary_{tag}.json"))
        print(
            f"seed {seed}: avg JCT {metrics.average_jct:.3f} s, "
            f"overhead {metrics.overhead_ms_mean:.3f} ms/decision, "
            f"utilization regular {metrics.utilization['regular']:.2f} "
            f"llm {metrics.utilization['llm']:.2f}"
        )
    return 0


def cmd_sweep(args) -> int:
    catalog = load_catalog()
    cluster = _load_cluster(args)
    profiles = _load_profiles(args.profiles)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells: list[tuple[float, list[float]]] = []
    for value in args.values:
        jcts = []
        for seed in args.seeds:
            epsilon, ratio, rate = args.epsilon, args.ratio, args.rate
            if args.parameter == "epsilon":
                epsilon = value
            elif args.parameter == "ratio":
                ratio = value
            else:
                rate = value
            scheduler = SchedulerConfig(
                policy="llmsched", epsilon=epsilon, ratio=ratio, seed=seed
            )
            spec = WorkloadSpec(
                mix=catalog.mix_for(args.workload),
                num_jobs=args.num_jobs,
                rate=rate,
                seed=seed,
            )
            jobs = generate_workload(spec, catalog)
            metrics = run_simulation(cluster, jobs, scheduler, profiles)
            jcts.append(metrics.average_jct)
        cells.append((value, jcts))
    best = min(statistics.fmean(jcts) for _, jcts in cells)
    path = out_dir / f"sweep_{args.parameter}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.parameter, "mean_norm_jct", "std_norm_jct"])
        for value, jcts in cells:
            norm = [x / best for x in jcts]
            std = statistics.stdev(norm) if len(norm) > 1 else 0.0
            writer.writerow([value, statistics.fmean(norm), std])
    print(f"wrote {path}")
    return 0


ABLATION_VARIANTS = ("full", "no_bn_update", "no_uncertainty")


def cmd_ablate(args) -> int:
    catalog = load_catalog()
    cluster = _load_cluster(args)
    profiles = _load_profiles(args.profiles)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    means: dict[str, float] = {}
    for variant in ABLATION_VARIANTS:
        jcts = []
        for seed in args.seeds:
            scheduler = SchedulerConfig(
                policy="llmsched",
                epsilon=0.0 if variant == "no_uncertainty" else args.epsilon,
                ratio=args.ratio,
                seed=seed,
                use_posteriors=variant != "no_bn_update",
            )
            metrics = _run_cell(args, catalog, cluster, profiles, scheduler, seed)
            jcts.append(metrics.average_jct)
        means[variant] = statistics.fmean(jcts)
    path = out_dir / "ablate.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "mean_jct", "normalized"])
        for variant in ABLATION_VARIANTS:
            writer.writerow([variant, means[variant], means[variant] / means["full"]])
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="llmsched",
        description="Uncertainty-aware scheduling experiments on a simulated cluster",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traces", help="generate a synthetic historical trace")
    _workload_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output trace file (JSONL)")
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("profile", help="train application profiles from a trace")
    p.add_argument("--traces", required=True)
    p.add_argument("--workload", default="mixed", choices=PRESETS,
                   help="cluster preset supplying the calibration table")
    p.add_argument("--cluster", help="cluster config file overriding the preset")
    p.add_argument("--out", required=True, help="output directory for profiles")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("run", help="simulate a workload under one scheduler")
    _workload_flags(p)
    _scheduler_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--cluster")
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-scores", action="store_true",
                   help="write per-epoch uncertainty score tables")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep epsilon, ratio, or lambda")
    _workload_flags(p)
    p.add_argument("--parameter", required=True, choices=("epsilon", "ratio", "lambda"))
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--cluster")
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="compare LLMSched against its ablations")
    _workload_flags(p)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--cluster")
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LLMSchedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
