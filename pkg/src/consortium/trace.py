"""Time-indexed run records and their CSV form.

A trace CSV starts with ``# key=value`` metadata lines followed by a headered,
fixed-order table. Numbers are written with 9 significant digits.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = (
    "t", "x1", "x2", "s1", "x2r", "s2", "y1", "y2", "x1_hat", "x2_hat",
    "d1", "d2", "dr", "r_d", "od_d", "x2r_d",
)


def fmt(v: float) -> str:
    return f"{v:.9g}"


def wire(v: float) -> float:
    """Round-trip a float through the 9-significant-digit text encoding."""
    return float(fmt(v))


@dataclass
class ScenarioTrace:
    data: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        missing = [c for c in COLUMNS if c not in self.data]
        if missing:
            raise ValueError(f"trace is missing columns {missing}")
        self.data = {c: np.asarray(self.data[c], dtype=float) for c in COLUMNS}
        n = {len(v) for v in self.data.values()}
        if len(n) != 1:
            raise ValueError("trace columns have unequal lengths")
        if len(self) > 1 and not np.all(np.diff(self.data["t"]) > 0):
            raise ValueError("trace times must be strictly increasing")

    def __len__(self):
        return len(self.data["t"])

    def __getitem__(self, col: str) -> np.ndarray:
        return self.data[col]

    @classmethod
    def from_rows(cls, rows: list[dict], meta: dict | None = None) -> "ScenarioTrace":
        return cls({c: [r[c] for r in rows] for c in COLUMNS}, dict(meta or {}))

    def equals(self, other: "ScenarioTrace") -> bool:
        """Bit-identity of every column."""
        return len(self) == len(other) and all(
            np.array_equal(self.data[c], other.data[c]) for c in COLUMNS
        )

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        for k, v in self.meta.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(self)):
            w.writerow([fmt(self.data[c][i]) for c in COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_long_csv(self, path=None) -> str:
        """Plot-ready long format: t, variable, value."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "variable", "value"))
        for i in range(len(self)):
            t = fmt(self.data["t"][i])
            for c in COLUMNS[1:]:
                w.writerow((t, c, fmt(self.data[c][i])))
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text) -> "ScenarioTrace":
        if isinstance(path_or_text, Path) or (
            isinstance(path_or_text, str) and "\n" not in path_or_text
        ):
            text = Path(path_or_text).read_text()
        else:
            text = path_or_text
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line.strip():
                body.append(line)
        reader = csv.reader(body)
        header = next(reader)
        cols = {h: [] for h in header}
        for row in reader:
            for h, v in zip(header, row):
                cols[h].append(float(v))
        return cls(cols, meta)
