"""Command line entry point: eitlab <experiment> --config <path>."""

import argparse
import sys

from .lab import ConfigError, ExperimentConfig, RUNNERS, run_experiment


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="eitlab",
        description="Numerical experiments for Lipschitz stability of "
                    "piecewise-constant conformal-anisotropic conductivities.")
    parser.add_argument("experiment", choices=sorted(RUNNERS))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--resolution", type=int, default=None)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        cfg = ExperimentConfig.from_json(args.experiment, args.config,
                                         seed=args.seed, out=args.out,
                                         resolution=args.resolution)
        record = run_experiment(cfg)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2
    print("%s: %s" % (record.name, "pass" if record.passed else "FAIL"))
    for key in sorted(record.summary):
        print("  %s = %s" % (key, record.summary[key]))
    return 0 if record.passed else 1


if __name__ == "__main__":
    sys.exit(main())
