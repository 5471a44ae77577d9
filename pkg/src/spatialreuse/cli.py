"""Command-line entry point: ``spatialreuse --config FILE --mode MODE --out DIR``."""

from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

from .experiments import MODES, SweepSpec, run_scenario, sweep, write_sweep
from .netmodel import ScenarioConfig, TopologyError
from .reference import SolverError

EXIT_CONFIG = 2
EXIT_SOLVER = 3


def preset_names(sweeps: bool = False) -> list:
    names = [p.name[:-5] for p in resources.files("spatialreuse.scenarios").iterdir() if p.name.endswith(".json")]
    return sorted(n for n in names if n.endswith("_sweep") == sweeps)


def _resolve(ref: str, sweeps: bool, loader):
    path = Path(ref)
    if not path.exists() and ref in preset_names(sweeps):
        with resources.as_file(resources.files("spatialreuse.scenarios") / f"{ref}.json") as p:
            return loader(p)
    if not path.is_file():
        raise FileNotFoundError(f"{ref}: no such file or preset (presets: {', '.join(preset_names(sweeps))})")
    return loader(path)


def load_config(ref: str) -> ScenarioConfig:
    """Load a scenario file, or a bundled preset by name."""
    return _resolve(ref, False, ScenarioConfig.load)


def load_sweep(ref: str) -> SweepSpec:
    """Load a sweep file, or a bundled sweep by name."""
    return _resolve(ref, True, SweepSpec.load)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spatialreuse", description=__doc__)
    ap.add_argument("--config", required=True, help="scenario JSON file or preset name")
    ap.add_argument("--mode", choices=MODES, default="reference")
    ap.add_argument("--sweep", help="sweep JSON file or bundled sweep name; runs a sweep instead of one scenario")
    ap.add_argument("--out", help="output directory for CSV artifacts")
    ap.add_argument("--seed", type=int, help="override the scenario seed (sweep: seed base)")
    ap.add_argument("--replications", type=int, help="override the sweep replication count")
    ap.add_argument("--max-iters", type=int, help="ADMM iteration cap")
    ap.add_argument("--rho", type=float, help="ADMM penalty")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.max_iters is not None:
            config = config.replace(max_iters=args.max_iters)
        if args.rho is not None:
            config = config.replace(rho=args.rho)
        spec = load_sweep(args.sweep) if args.sweep else None
    except (OSError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if spec is None:
            if args.seed is not None:
                config = config.replace(rng_seed=args.seed)
            record, sol = run_scenario(config, args.mode, out_dir=args.out)
            print(f"mode={record.mode} seed={record.seed} min_rate={record.objective_kbps:.4f} Kbps "
                  f"power={record.power_dbm:.2f} dBm iterations={record.iterations} "
                  f"converged={record.converged} feasible={record.feasible} runtime={record.runtime:.2f}s")
        else:
            if args.seed is not None:
                spec.seed_base = args.seed
            if args.replications is not None:
                if args.replications < 1:
                    raise ValueError("replications must be at least 1")
                spec.replications = args.replications
            records, summary = sweep(spec, config, progress=lambda m: print(m, file=sys.stderr))
            if args.out:
                write_sweep(args.out, records, summary)
            for row in summary:
                print(f"{row['variable']}={row['value']} {row['mode']}: min_rate={row['objective_kbps_mean']:.4f} Kbps "
                      f"power={row['power_dbm_of_mean']:.2f} dBm runs={row['runs']} failures={row['failures']}")
    except (TopologyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return 0


if __name__ == "__main__":
    sys.exit(main())
