"""
Command-line entry point: python -m qwalk_lab.main <command> [flags]

Exit codes: 0 success, 1 I/O error or --verify mismatch, 2 configuration
error, 3 physics-degenerate request.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from .artifacts import compare_checksums, read_manifest
from .config import debug_enabled, load_environment
from .errors import ArtifactError, ConfigError, PhysicsDegenerateError, QwalkError
from .expcli import COMMANDS, MANIFEST_NAME, load_experiment_config

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qwalk_lab",
        description="Virtual two-photon quantum-walk experiments in a multimode fiber.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="Experiment to run")
    parser.add_argument("--config", type=str, default=None, help="Flat 'key = value' config file")
    parser.add_argument("--seed", type=int, default=None, help="Ground-truth fiber seed")
    parser.add_argument("--noise", choices=["off", "poisson"], default=None, help="Counting noise model")
    parser.add_argument("--out", type=str, default=None, help="Output directory")
    parser.add_argument(
        "--verify",
        action="store_true",
        help="Compare the new checksums against the manifest already in the output directory",
    )
    return parser


def _cli_overrides(args: argparse.Namespace) -> Dict[str, Optional[str]]:
    return {
        "seed": None if args.seed is None else str(args.seed),
        "noise": args.noise,
        "output_dir": args.out,
    }


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    load_environment()

    try:
        config = load_experiment_config(args.config, _cli_overrides(args))
        previous = None
        manifest_path = Path(config.output_dir) / MANIFEST_NAME
        if args.verify:
            if not manifest_path.is_file():
                print(f"[MAIN] ❌ --verify needs an existing manifest at {manifest_path}")
                return EXIT_IO
            previous = read_manifest(manifest_path)

        print(f"[MAIN] Running {args.command} (fiber seed {config.fiber.seed}, noise {config.detector.noise_mode})")
        COMMANDS[args.command](config)

        if previous is not None:
            mismatched = compare_checksums(previous, read_manifest(manifest_path))
            if mismatched:
                print(f"[MAIN] ❌ Checksum mismatch in {len(mismatched)} files: {', '.join(mismatched)}")
                return EXIT_IO
            print("[MAIN] ✅ All checksums match the previous run")
        return EXIT_OK

    except (ConfigError, ValidationError) as e:
        print(f"[MAIN] ❌ Configuration error: {e}")
        return EXIT_CONFIG
    except PhysicsDegenerateError as e:
        print(f"[MAIN] ❌ Physics-degenerate request: {e}")
        return EXIT_DEGENERATE
    except (ArtifactError, OSError) as e:
        print(f"[MAIN] ❌ I/O error: {e}")
        return EXIT_IO
    except QwalkError as e:
        if debug_enabled():
            raise
        print(f"[MAIN] ❌ {type(e).__name__}: {e}")
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
