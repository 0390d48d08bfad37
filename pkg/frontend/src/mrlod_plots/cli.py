"""Batch figure tool: ``mrlod-plots --spec <file>``.

The spec file is flat key=value mirroring FigureSpec; see the README for
the recognized keys per figure kind.
"""

import argparse
import sys

from .render import FigureSpec, RenderError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mrlod-plots",
                                     description="Render experiment figures")
    parser.add_argument("--spec", required=True, help="key=value figure spec")
    args = parser.parse_args(sys.argv[1:] if argv is None else argv)
    try:
        spec = FigureSpec.from_file(args.spec)
        render(spec)
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {spec.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
