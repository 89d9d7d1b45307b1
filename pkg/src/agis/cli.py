"""Command line: ``agis simulate | solve | worker | report | status``.

Exit codes: 0 success, 2 validation error, 3 not converged, 4 storage or
integrity error.
"""

import argparse
import json
import sys

from .errors import (
    ChecksumMismatch,
    ConfigError,
    FiniteCheckFailed,
    NonFiniteInput,
    NotConverged,
    StorageError,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NOT_CONVERGED = 3
EXIT_STORAGE = 4


def _config(args):
    from .pipeline import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    return cfg.validate()


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def cmd_simulate(args):
    from .pipeline import simulate

    manifest = simulate(_config(args), args.run_dir)
    _print({k: manifest[k] for k in ("n_obs", "mean_obs_per_source", "seeds")})
    return EXIT_OK


def cmd_solve(args):
    from .pipeline import solve

    summary = solve(args.run_dir, workers=args.workers)
    _print(summary)
    if summary.get("reason") == "interrupted":
        return EXIT_NOT_CONVERGED
    return EXIT_OK if summary["converged"] else EXIT_NOT_CONVERGED


def cmd_worker(args):
    from .datatrain import WorkerConfig, run_datatrain

    cfg = WorkerConfig(args.worker_id, args.run_dir, args.lease, args.heartbeat,
                       args.max_batch_memory, args.idle_timeout,
                       crash_after_claims=args.crash_after_claims)
    run_datatrain(cfg)
    return EXIT_OK


def cmd_report(args):
    from .pipeline import report

    out = report(args.run_dir)
    for row in out["throughput"]:
        print(json.dumps({"throughput": row}, sort_keys=True))
    _print({k: out[k] for k in ("summary", "errors_all", "mean_obs_per_source")})
    return EXIT_OK


def cmd_status(args):
    from .pipeline import status

    _print(status(args.run_dir))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="agis", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--run-dir", required=True, help="run directory")
        if config:
            p.add_argument("--config", help="JSON run configuration")
            p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        return p

    common(sub.add_parser("simulate", help="write truth, observations and start state"))
    p = common(sub.add_parser("solve", help="iterate to convergence"), config=False)
    p.add_argument("--workers", type=int, help="worker processes (0 = in-process)")
    p = common(sub.add_parser("worker", help="run one DataTrain worker"), config=False)
    p.add_argument("--worker-id", default="w0")
    p.add_argument("--lease", type=float, default=60.0)
    p.add_argument("--heartbeat", type=float, default=10.0)
    p.add_argument("--idle-timeout", type=float, default=0.0)
    p.add_argument("--max-batch-memory", type=int, default=256 * 2**20)
    p.add_argument("--crash-after-claims", type=int, default=None, help=argparse.SUPPRESS)
    common(sub.add_parser("report", help="accuracy and throughput summary"), config=False)
    common(sub.add_parser("status", help="job and iteration counts"), config=False)
    return ap


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "worker": cmd_worker,
            "report": cmd_report, "status": cmd_status}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, NonFiniteInput) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NotConverged as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (StorageError, ChecksumMismatch, FiniteCheckFailed) as exc:
        print(f"storage/integrity error: {exc}", file=sys.stderr)
        return EXIT_STORAGE


if __name__ == "__main__":
    sys.exit(main())
