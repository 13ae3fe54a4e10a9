#!/usr/bin/env python3
"""Convert IAM ``ascii/lines.txt`` into a convhtr manifest.

Usage::

    python3 tools/iam_manifest.py --lines-txt iam/ascii/lines.txt \
        --images-root iam/lines --ids splits/train.txt --out train.tsv

``--ids`` is a file with one line id (``a01-000u-00``) or form id
(``a01-000u``) per line; records whose line id or form id is listed are
kept. Without ``--ids`` every record is written. Words in lines.txt are
joined by ``|``, which becomes a space.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


def parse_lines_txt(text: str, skip_err: bool = False):
    """Yields ``(line_id, transcription)`` for each record."""
    for raw in text.splitlines():
        if not raw.strip() or raw.startswith("#"):
            continue
        fields = raw.split(" ")
        if len(fields) < 9:
            raise ValueError(f"malformed record: {raw!r}")
        if skip_err and fields[1] != "ok":
            continue
        yield fields[0], " ".join(fields[8:]).replace("|", " ")


def image_path(root: Path, line_id: str) -> Path:
    # a01-000u-00 -> a01/a01-000u/a01-000u-00.png
    parts = line_id.split("-")
    return root / parts[0] / f"{parts[0]}-{parts[1]}" / f"{line_id}.png"


def convert(text: str, root: Path, ids: set[str] | None = None, skip_err: bool = False) -> list[str]:
    rows = []
    for line_id, transcription in parse_lines_txt(text, skip_err):
        form_id = line_id.rsplit("-", 1)[0]
        if ids is not None and line_id not in ids and form_id not in ids:
            continue
        rows.append(f"{image_path(root, line_id)}\t{transcription}")
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lines-txt", required=True, type=Path)
    ap.add_argument("--images-root", required=True, type=Path)
    ap.add_argument("--ids", type=Path, help="file of line or form ids to keep")
    ap.add_argument("--skip-err", action="store_true", help="drop records whose segmentation is not 'ok'")
    ap.add_argument("--out", required=True, type=Path)
    args = ap.parse_args(argv)

    ids = None
    if args.ids is not None:
        ids = {s.strip() for s in args.ids.read_text(encoding="utf-8").splitlines() if s.strip()}
    rows = convert(args.lines_txt.read_text(encoding="utf-8"), args.images_root, ids, args.skip_err)
    args.out.write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    print(f"wrote {len(rows)} records to {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
