"""
Run one experiment config, or replay a manifest. Settings come from .env / env
(PARASITE_SIM_*), the JSON config, then the flags below:
  python run_experiment.py run configs/many-to-one-suite.json --workers 4
  python run_experiment.py replay runs/many-to-one-suite-<hash>/manifest.json

Exit codes: 0 success, 2 invalid config or manifest, 3 results flagged partial
because the population cap was hit.
"""
import argparse
import sys
from pathlib import Path

# Load .env from project root so PARASITE_SIM_* settings are visible to src/config.py
_root = Path(__file__).resolve().parent
_env = _root / ".env"
if _env.exists():
    try:
        from dotenv import load_dotenv

        load_dotenv(_env)
    except ImportError:
        pass
sys.path.insert(0, str(_root / "src"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Branching cell population / parasite load experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="experiment config (JSON)")
    p_run.add_argument("--out", help="artifact directory")
    p_run.add_argument("--workers", type=int, help="worker processes")
    p_run.add_argument("--seed", type=int, help="master seed override")

    p_replay = sub.add_parser("replay", help="re-run a manifest and compare checksums")
    p_replay.add_argument("manifest", help="manifest.json or the artifact directory holding it")
    p_replay.add_argument("--out", help="artifact directory for the replay")
    p_replay.add_argument("--workers", type=int, help="worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    from config import setup_logging
    from harness import EXIT_INVALID, ExperimentError, replay, run
    from model import ModelError

    setup_logging()
    try:
        if args.command == "run":
            outcome = run(args.config, args.out, workers=args.workers, seed=args.seed)
            print(f"Wrote {len(outcome.manifest['outputs'])} file(s) to {outcome.directory}")
        else:
            result = replay(args.manifest, args.out, workers=args.workers)
            outcome = result.outcome
            if result.identical:
                print(f"Replay identical: {len(outcome.manifest['outputs'])} checksum(s) match ({outcome.directory})")
            else:
                print(f"Replay differs in {', '.join(result.mismatches)}; treated as a fresh run in {outcome.directory}")
    except (ExperimentError, ModelError) as e:
        print(f"Invalid: {e}")
        return EXIT_INVALID
    if outcome.capped:
        print("Warning: population cap hit, results are partial (see manifest.json)")
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
