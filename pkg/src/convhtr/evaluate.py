"""Character error rate: Levenshtein alignment, corpus aggregation and
length-bucketed reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

# reference-length buckets (inclusive bounds); longer refs fall in the last one
BUCKETS: tuple[tuple[int, int], ...] = ((0, 40), (41, 45), (46, 50), (51, 55), (56, 60), (61, 100))


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def levenshtein(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost edit distance from ``ref`` to ``hyp`` with an op breakdown.

    The breakdown comes from a backtrace that prefers substitution (or
    match), then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        r = ref[i - 1]
        prev = d[-1]
        row = [i] + [0] * m
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
        d.append(row)

    sub = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    dist = d[n][m]
    assert sub + ins + dele == dist
    return EditCounts(dist, int(sub), ins, dele)


@dataclass
class CerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_chars: int = 0
    lines: int = 0
    buckets: dict[str, "CerReport"] = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def cer(self) -> float | None:
        if self.ref_chars == 0:
            return None
        return 100.0 * self.errors / self.ref_chars

    def add(self, counts: EditCounts, ref_len: int) -> None:
        self.substitutions += counts.substitutions
        self.insertions += counts.insertions
        self.deletions += counts.deletions
        self.ref_chars += ref_len
        self.lines += 1

    def merge(self, other: "CerReport") -> "CerReport":
        return CerReport(self.substitutions + other.substitutions, self.insertions + other.insertions,
                         self.deletions + other.deletions, self.ref_chars + other.ref_chars,
                         self.lines + other.lines)

    def to_dict(self) -> dict:
        out = {"substitutions": self.substitutions, "insertions": self.insertions,
               "deletions": self.deletions, "ref_chars": self.ref_chars, "lines": self.lines,
               "cer": self.cer}
        if self.buckets:
            out["buckets"] = {k: v.to_dict() for k, v in self.buckets.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def corpus_cer(pairs: Iterable[tuple[str, str]]) -> CerReport:
    """Micro-averaged CER: total edits over total reference characters."""
    report = CerReport()
    for ref, hyp in pairs:
        report.add(levenshtein(ref, hyp), len(ref))
    if report.lines == 0:
        raise ValueError("corpus_cer needs at least one pair")
    if report.ref_chars == 0:
        raise ValueError("corpus_cer: reference side has no characters")
    return report


def bucket_label(lo: int, hi: int) -> str:
    return f"[{lo}-{hi}]"


def bucket_of(length: int) -> str:
    for lo, hi in BUCKETS:
        if lo <= length <= hi:
            return bucket_label(lo, hi)
    return bucket_label(*BUCKETS[-1])


def bucketed_cer(pairs: Iterable[tuple[str, str]]) -> CerReport:
    """Corpus report whose ``buckets`` split lines by reference length."""
    total = CerReport(buckets={bucket_label(lo, hi): CerReport() for lo, hi in BUCKETS})
    for ref, hyp in pairs:
        counts = levenshtein(ref, hyp)
        total.add(counts, len(ref))
        total.buckets[bucket_of(len(ref))].add(counts, len(ref))
    return total


def format_table(report: CerReport) -> str:
    rows = [("set", "lines", "chars", "S", "I", "D", "CER%")]

    def row(name, r):
        cer = "-" if r.cer is None else f"{r.cer:.2f}"
        return (name, str(r.lines), str(r.ref_chars), str(r.substitutions),
                str(r.insertions), str(r.deletions), cer)

    rows.append(row("all", report))
    for name, sub in report.buckets.items():
        rows.append(row(name, sub))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    return "\n".join(lines)


def bucket_svg(report: CerReport, width: int = 480, height: int = 240) -> str:
    """Minimal bar chart of per-bucket CER as a standalone SVG document."""
    items = list(report.buckets.items())
    values = [r.cer or 0.0 for _, r in items]
    top = max(values + [1.0])
    margin = 30
    bar_w = (width - 2 * margin) / max(1, len(items))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
             f'y2="{height - margin}" stroke="black"/>']
    for k, ((name, r), v) in enumerate(zip(items, values)):
        h = (height - 2 * margin) * v / top
        x = margin + k * bar_w + 4
        y = height - margin - h
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w - 8:.1f}" height="{h:.1f}" fill="steelblue"/>')
        label = "-" if r.cer is None else f"{v:.2f}"
        parts.append(f'<text x="{x + (bar_w - 8) / 2:.1f}" y="{y - 4:.1f}" font-size="10" '
                     f'text-anchor="middle">{label}</text>')
        parts.append(f'<text x="{x + (bar_w - 8) / 2:.1f}" y="{height - margin + 14}" font-size="10" '
                     f'text-anchor="middle">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
