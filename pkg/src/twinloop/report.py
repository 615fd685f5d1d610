"""Run artifacts: CSV tables, gnuplot scripts and the checksum manifest."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.resolved.yaml"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: str                       # resolved config file, relative to the output dir
    seed: int
    out: str
    options: dict = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)  # file name -> sha256

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls(**json.loads(path.read_text()))


def collect_artifacts(out_dir: str | Path) -> dict[str, str]:
    """Checksums of every file in ``out_dir`` except the manifest, sorted by name."""
    out = Path(out_dir)
    return {p.name: sha256_file(p) for p in sorted(out.iterdir())
            if p.is_file() and p.name != MANIFEST_NAME}


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _cell(value: object) -> str:
    if hasattr(value, "item"):  # numpy scalar
        value = value.item()
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def format_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Plain fixed-width text table."""
    def fmt(v: object) -> str:
        if isinstance(v, float) or hasattr(v, "item"):
            f = float(v)  # type: ignore[arg-type]
            if f != f:
                return "nan"
            return f"{f:.2f}" if f == 0 or abs(f) >= 0.1 else f"{f:.3g}"
        return str(v)

    cells = [[str(h) for h in header]] + [[fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def gnuplot_lines(csv_name: str, x: str, columns: Sequence[str], all_columns: Sequence[str],
                  title: str, ylabel: str, png_name: str) -> str:
    """gnuplot script plotting ``columns`` against ``x`` from a CSV with a header row."""
    idx = {c: i + 1 for i, c in enumerate(all_columns)}
    plots = ", \\\n     ".join(f"'{csv_name}' using {idx[x]}:{idx[c]} with lines title '{c}'"
                               for c in columns)
    return (f"set datafile separator ','\nset key autotitle columnhead\n"
            f"set terminal pngcairo size 900,500\nset output '{png_name}'\n"
            f"set title '{title}'\nset xlabel '{x}'\nset ylabel '{ylabel}'\nset grid\n"
            f"plot {plots}\n")


def gnuplot_sweep(csv_name: str, axis: str, png_name: str) -> str:
    """Scatter of rms% against the swept value (columns: axis,value,seed,param,rms_percent,...)."""
    return (f"set datafile separator ','\nset terminal pngcairo size 900,500\n"
            f"set output '{png_name}'\nset title 'rms% vs {axis}'\nset xlabel '{axis}'\n"
            f"set ylabel 'rms [%]'\nset grid\n"
            f"plot '{csv_name}' every ::1 using 2:5 with points pt 7 title 'rms%'\n")
