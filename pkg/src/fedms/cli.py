"""Command line: ``fedms run|partition-report|summarize|default-config``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ExperimentConfig, load_config
from .errors import FedMSError
from .federation import BANDWIDTHS_MB
from .runner import partition_report, run_experiment, summarize_metrics


def _format_summary(s: dict) -> str:
    lines = [f"mode {s['mode']}  seed {s['seed']}  clients {s['num_clients']}  "
             f"malicious {s['malicious_clients'] or 'none'}"]
    for stage, st in s["stages"].items():
        accs = " ".join("-" if a is None else f"{a:.3f}" for a in st["per_client_accuracy"])
        lines.append(f"{stage}: rounds {st['rounds']}  mean acc {st['mean_accuracy']:.4f}  "
                     f"uploaded {st['uploaded_bytes']} B")
        lines.append(f"  per-client: {accs}")
    lines.append(f"transmitted bytes {s['payload_total_bytes']}")
    lines.append("comm time:  " + "  ".join(f"{bw:g} MB/s = {s['comm_time_seconds'][f'{bw:g}MB/s']:.3f} s"
                                            for bw in BANDWIDTHS_MB))
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="fedms", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("config", nargs="?", help="INI config file (defaults apply when omitted)")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    p = sub.add_parser("partition-report", help="print per-client class histograms")
    p.add_argument("config", nargs="?")
    p = sub.add_parser("summarize", help="aggregate table from a metrics CSV")
    p.add_argument("metrics")
    sub.add_parser("default-config", help="print the default configuration")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "run":
            cfg = load_config(args.config)
            summary = run_experiment(cfg, args.out, resume=args.resume or None)
            print(_format_summary(summary))
        elif args.cmd == "partition-report":
            print(partition_report(load_config(args.config)))
        elif args.cmd == "summarize":
            print(summarize_metrics(args.metrics))
        else:
            print(ExperimentConfig().to_ini(), end="")
    except FedMSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
