"""Main entry point for the saqlab command line."""

import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _deterministic(argv: list[str]) -> bool:
    """``--deterministic false`` is the only way to leave BLAS threading alone."""
    for i, arg in enumerate(argv):
        if arg.startswith("--deterministic="):
            return arg.split("=", 1)[1].lower() not in ("0", "false", "no", "off")
        if arg == "--deterministic" and i + 1 < len(argv):
            return argv[i + 1].lower() not in ("0", "false", "no", "off")
    return True


def main() -> None:
    """Pin numeric libraries to one thread (before numpy loads), then dispatch."""
    if _deterministic(sys.argv[1:]):
        for var in THREAD_VARS:
            os.environ.setdefault(var, "1")

    from src.cli import main as cli_main

    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
