"""granubed-plot KIND INPUT.csv -o OUT.png"""

from __future__ import annotations

import argparse
import sys

from .figures import KINDS, FigureSpec, render
from .schema import SchemaError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="granubed-plot",
        description="render solver/benchmark CSVs into figures")
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("input", help="CSV file matching the kind's schema")
    parser.add_argument("-o", "--output", required=True, help="image path")
    parser.add_argument("--log-y", action="store_true")
    args = parser.parse_args(argv)
    try:
        export = render(FigureSpec([args.input], args.kind, args.output,
                                   log_y=args.log_y))
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.output} and {export}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
