"""``maskbf`` command line: run, properties, synth, sdr."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, properties
from . import signal as sig
from .errors import MaskBFError, PlanError
from .metrics import sdr

EXIT_OK, EXIT_PROPERTY, EXIT_PLAN = 0, 1, 2


def _cmd_run(args):
    try:
        if args.plan:
            plan = harness.ExperimentPlan.load(args.plan)
            data = plan.to_dict()
        else:
            data = {"scenes": {"synthetic": {"seed": args.seed, "count": args.count,
                                             "mics": args.mics, "duration": args.duration}},
                    "variations": args.variations or ["INV-NS"],
                    "g": args.g or [1.0, 2.0, 4.0], "scaling": args.scaling or ["ideal"]}
        if args.out:
            data["output_dir"] = args.out
        if args.iterations:
            data.setdefault("config", {})["iterations"] = args.iterations
        plan = harness.ExperimentPlan.from_dict(data)
    except (PlanError, ValueError) as exc:
        print(f"plan error: {exc}", file=sys.stderr)
        return EXIT_PLAN
    try:
        table = harness.run_experiment(plan, jobs=args.jobs)
    except PlanError as exc:
        print(f"plan error: {exc}", file=sys.stderr)
        return EXIT_PLAN
    for row in table.rows:
        value = "failed" if row["sdr_db"] is None else f"{row['sdr_db']:.2f}"
        print(f"{row['variation']:>20} g={row['g']:<4g} {row['scaling']:>20} {value}")
    if args.curves:
        records = [json.loads(Path(c["record"]).read_text())
                   for c in table.cells if c.get("record")]
        harness.emit_curves(records, Path(plan.output_dir) / "curves.csv")
    return EXIT_OK


def _cmd_properties(args):
    suites = args.suite.split(",") if args.suite != "all" else "all"
    try:
        report = properties.run_properties(suites)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_PLAN
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_PROPERTY


def _cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target, noise = sig.synth_scene(args.seed, n_mics=args.mics, duration=args.duration,
                                    n_sources=args.sources)
    sig.write_wav(out / "target.wav", target)
    sig.write_wav(out / "noise.wav", noise)
    manifest = {"target": "target.wav", "noise": "noise.wav", "g": 1.0, "reference_mic": 1}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(out / "manifest.json")
    return EXIT_OK


def _cmd_sdr(args):
    try:
        ref = sig.read_wav(args.ref)
        est = sig.read_wav(args.est)
        result = sdr(ref, est.samples[0], channel=args.channel - 1)
    except (MaskBFError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PLAN
    flag = " (capped)" if result.capped else ""
    print(f"{result.sdr_db:.4f}{flag}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="maskbf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment plan")
    run.add_argument("--plan", help="plan JSON; flags below override its fields")
    run.add_argument("--out", help="output directory")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--variations", nargs="+")
    run.add_argument("--g", type=float, nargs="+")
    run.add_argument("--scaling", nargs="+")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--count", type=int, default=1)
    run.add_argument("--mics", type=int, default=3)
    run.add_argument("--duration", type=float, default=2.0)
    run.add_argument("--iterations", type=int)
    run.add_argument("--curves", action="store_true", help="also write curves.csv")
    run.set_defaults(func=_cmd_run)

    props = sub.add_parser("properties", help="run property suites")
    props.add_argument("--suite", default="all",
                       help=f"all or comma list of {', '.join(properties.SUITES)}")
    props.set_defaults(func=_cmd_properties)

    synth = sub.add_parser("synth", help="write a synthetic scene and its manifest")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--mics", type=int, default=3)
    synth.add_argument("--sources", type=int, default=3)
    synth.add_argument("--duration", type=float, default=2.0)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=_cmd_synth)

    sd = sub.add_parser("sdr", help="SDR of an estimate against one reference channel")
    sd.add_argument("--ref", required=True)
    sd.add_argument("--est", required=True)
    sd.add_argument("--channel", type=int, default=1, help="1-based reference channel")
    sd.set_defaults(func=_cmd_sdr)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
