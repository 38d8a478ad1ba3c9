"""Command-line front door.

Commands: ``gen-synth`` (write synthetic datasets in the binary on-disk
format), ``run`` (full protocol runs with optional ablation arms and seed
sweeps), ``gradcheck`` (finite-difference verification suites) and
``report`` (re-render CSV/figure from a stored report). Exit codes: 0
success, 1 validation/config error, 2 runtime/numeric error.

Only stdlib is imported at module level so that ``--threads`` can pin the
BLAS thread count before numpy loads; the default of 1 keeps runs bitwise
reproducible.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from pathlib import Path

from .errors import CdfscilError, ValidationError

log = logging.getLogger("cdfscil")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse usage errors are validation errors
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdfscil", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synth", help="generate a synthetic multi-domain dataset")
    gen.add_argument("--domains", type=int, required=True)
    gen.add_argument("--classes", type=str, required=True,
                     help="per-domain class counts, e.g. 4,4,4 (a single value replicates)")
    gen.add_argument("--train", type=int, default=40, help="train samples per class")
    gen.add_argument("--test", type=int, default=20, help="test samples per class")
    gen.add_argument("--height", type=int, default=16)
    gen.add_argument("--width", type=int, default=16)
    gen.add_argument("--channels", type=int, default=1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--name", type=str, default="synth")
    gen.add_argument("-o", "--out", type=str, required=True, help="output directory")

    run = sub.add_parser("run", help="run the incremental protocol from a config file")
    run.add_argument("--config", type=str, required=True, help="experiment TOML file")
    run.add_argument("--seeds", type=str, default=None, help="comma list overriding run.seeds")
    run.add_argument("--ablate", type=str, default=None,
                     help="comma list of extra arms: no-ld, no-pseudo, baseline")
    run.add_argument("--out", type=str, default=None, help="output root (overrides CDFSCIL_OUT and config)")
    run.add_argument("--threads", type=int, default=1, help="BLAS thread cap (1 = bitwise reproducible)")

    grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    grad.add_argument("--trials", type=int, default=None, help="trials per component (default: per-component)")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--component", type=str, default=None,
                      help="restrict to one component (e.g. loss_ld, pipeline)")
    grad.add_argument("--tolerance", type=float, default=None)
    grad.add_argument("--threads", type=int, default=1)

    rep = sub.add_parser("report", help="re-render CSV and figure from a stored report")
    rep.add_argument("--report", type=str, required=True, help="path to report.json")
    rep.add_argument("--out", type=str, default=None, help="directory for re-rendered files")
    return parser


def _set_thread_env(argv) -> None:
    threads = 1
    for i, token in enumerate(argv):
        if token == "--threads" and i + 1 < len(argv):
            try:
                threads = max(1, int(argv[i + 1]))
            except ValueError:
                pass
        elif token.startswith("--threads="):
            try:
                threads = max(1, int(token.split("=", 1)[1]))
            except ValueError:
                pass
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_gen_synth(args) -> int:
    from .datasets import DomainSpec, SyntheticSpec, generate_synthetic, save_dataset

    if args.domains < 1:
        raise ValidationError("--domains must be >= 1")
    counts = [int(v) for v in args.classes.split(",") if v.strip() != ""]
    if len(counts) == 1 and args.domains > 1:
        counts = counts * args.domains
    if len(counts) != args.domains:
        raise ValidationError(f"--classes lists {len(counts)} counts for {args.domains} domains")
    spec = SyntheticSpec(
        domains=tuple(DomainSpec(f"domain{i}", k) for i, k in enumerate(counts)),
        train_per_class=args.train,
        test_per_class=args.test,
        height=args.height,
        width=args.width,
        channels=args.channels,
    )
    train, test = generate_synthetic(spec, args.seed)
    names = [d.name for d in spec.domains]
    for split_ds in (train, test):
        manifest = save_dataset(split_ds, args.out, args.name, names)
        print(manifest)
    return 0


def _percent_row(label: str, averages, pd_value) -> str:
    cells = [f"{100.0 * a:7.2f}" for a in averages] + [f"{100.0 * pd_value:7.2f}"]
    return f"{label:<12}" + " ".join(cells)


def _print_session_table(rows) -> None:
    """rows: list of (label, average_accuracy list, pd)."""
    num_sessions = max(len(a) for _, a, _ in rows)
    header = f"{'Session':<12}" + " ".join(f"{i:>7}" for i in range(num_sessions)) + f" {'PD':>7}"
    print(header)
    for label, averages, pd_value in rows:
        print(_percent_row(label, averages, pd_value))


def _cmd_run(args) -> int:
    from .config import (
        apply_arm,
        build_datasets,
        build_schedule,
        config_sections,
        load_config,
        write_lock,
    )
    from .plots import render_accuracy_curves, render_seed_band
    from .protocol import run_protocol

    cfg = load_config(args.config)
    if args.seeds is not None:
        try:
            seeds = tuple(int(s) for s in args.seeds.split(","))
        except ValueError as e:
            raise ValidationError(f"--seeds must be a comma list of integers: {e}") from e
    else:
        seeds = cfg.run.seeds
    arms = ["full"]
    if args.ablate:
        for arm in args.ablate.split(","):
            arm = arm.strip()
            if arm and arm not in arms:
                arms.append(arm)
    out_root = Path(args.out or os.environ.get("CDFSCIL_OUT") or cfg.run.output_dir)

    table_rows = []
    for arm in arms:
        arm_cfg = apply_arm(cfg, arm)
        sections = config_sections(arm_cfg)
        reports = []
        for seed in seeds:
            log.info("running arm=%s seed=%d", arm, seed)
            train_ds, test_ds = build_datasets(arm_cfg, data_seed=seed, config_path=args.config)
            schedule = build_schedule(arm_cfg, train_ds, config_path=args.config)
            echo = {**{k: dict(v) for k, v in sections.items()}, "arm": arm, "seed": seed}
            report = run_protocol(
                train_ds, test_ds, schedule,
                loss_cfg=arm_cfg.loss, opts=arm_cfg.train, aug=arm_cfg.augment,
                arch=arm_cfg.model.architecture, embedding_dim=arm_cfg.model.embedding_dim,
                seed=seed, config_echo=echo,
            )
            run_dir = out_root / arm / f"seed{seed}"
            report.save_json(run_dir / "report.json")
            report.save_csv(run_dir / "report.csv")
            render_accuracy_curves([(f"{arm} seed {seed}", report)], run_dir / "accuracy_curve.png")
            write_lock(sections, run_dir / "config.lock")
            reports.append(report)

        curves = [r.average_accuracy for r in reports]
        mean_curve = [statistics.fmean(col) for col in zip(*curves)]
        mean_pd = statistics.fmean(r.pd for r in reports)
        table_rows.append((arm, mean_curve, mean_pd))
        if len(reports) > 1:
            summary = {
                "arm": arm,
                "seeds": list(seeds),
                "average_accuracy_mean": mean_curve,
                "average_accuracy_std": [statistics.pstdev(col) for col in zip(*curves)],
                "pd_mean": mean_pd,
                "pd_std": statistics.pstdev(r.pd for r in reports),
                "pd_per_seed": [r.pd for r in reports],
            }
            summary_path = out_root / arm / "summary.json"
            summary_path.parent.mkdir(parents=True, exist_ok=True)
            summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
            render_seed_band(arm, reports, out_root / arm / "summary_curve.png")
            print(f"{arm}: PD mean {mean_pd:.4f} std {summary['pd_std']:.4f} over seeds {list(seeds)}")

    _print_session_table(table_rows)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import DEFAULT_TOLERANCE, run_suite

    tolerance = DEFAULT_TOLERANCE if args.tolerance is None else args.tolerance
    components = [args.component] if args.component else None
    results = run_suite(seed=args.seed, trials=args.trials, components=components)
    all_pass = True
    for res in results:
        ok = res.passed(tolerance)
        all_pass &= ok
        print(f"{res.component:<14} max rel err {res.max_rel_error:.3e}  ({res.trials} trials)  "
              f"{'PASS' if ok else 'FAIL'}")
    print(f"overall: {'PASS' if all_pass else 'FAIL'} (tolerance {tolerance:g})")
    return 0 if all_pass else 2


def _cmd_report(args) -> int:
    from .plots import render_accuracy_curves
    from .protocol import ProtocolReport

    report_path = Path(args.report)
    report = ProtocolReport.load_json(report_path)
    out_dir = Path(args.out) if args.out else report_path.parent
    csv_path = report.save_csv(out_dir / "report.csv")
    png_path = render_accuracy_curves([(report.config.get("arm", "run"), report)],
                                      out_dir / "accuracy_curve.png")
    print(csv_path)
    print(png_path)
    _print_session_table([(report.config.get("arm", "run"), report.average_accuracy, report.pd)])
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _set_thread_env(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        if args.command == "gen-synth":
            return _cmd_gen_synth(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "report":
            return _cmd_report(args)
        raise ValidationError(f"unknown command {args.command!r}")
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CdfscilError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
