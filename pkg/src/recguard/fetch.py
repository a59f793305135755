"""Download ML-100K into a directory: ``python -m recguard.fetch data/ml-100k``."""

import argparse
import sys

from .data import fetch_ml100k


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m recguard.fetch", description=__doc__)
    parser.add_argument("dest", nargs="?", default="data/ml-100k")
    args = parser.parse_args(argv)
    try:
        path = fetch_ml100k(args.dest)
    except OSError as exc:
        print(f"error: download failed: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
