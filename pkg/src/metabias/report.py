"""Tabular reports with lossless TSV and JSON round-trips."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

__all__ = ["ReportTable", "FIT_COLUMNS", "SIM_COLUMNS", "ReportError"]

NA = "NA"

# column name -> type tag
FIT_COLUMNS: Tuple[Tuple[str, str], ...] = (
    ("description", "str"),
    ("method", "str"),
    ("expected_m", "float"),
    ("estimate", "float"),
    ("ci_lower", "float"),
    ("ci_upper", "float"),
    ("p_value", "float"),
)

SIM_COLUMNS: Tuple[Tuple[str, str], ...] = (
    ("method", "str"),
    ("ave", "float"),
    ("sd", "float"),
    ("cp", "float"),
    ("loci", "float"),
    ("noc", "int"),
    ("replications", "int"),
)


class ReportError(ValueError):
    pass


def _parse(text: str, kind: str):
    if text == NA:
        return None
    if kind == "float":
        return float(text)
    if kind == "int":
        return int(text)
    return text


def _format(value, kind: str) -> str:
    if value is None:
        return NA
    if kind == "float":
        return repr(float(value))
    if kind == "int":
        return str(int(value))
    text = str(value)
    if "\t" in text or "\n" in text:
        raise ReportError(f"text cell {text!r} contains a tab or newline")
    return text


def _clean(value, kind):
    if value is None:
        return None
    if kind == "float":
        value = float(value)
        return None if math.isnan(value) else value
    if kind == "int":
        return int(value)
    return str(value)


@dataclass
class ReportTable:
    """Rows of typed cells under a fixed column schema.

    Missing cells are ``None`` (``NA`` in TSV, ``null`` in JSON); NaN floats
    are stored as missing. ``scale`` records whether effect columns are odds
    ratios (``"or"``) or log odds ratios (``"log"``).
    """

    columns: Tuple[Tuple[str, str], ...] = FIT_COLUMNS
    rows: List[Tuple] = field(default_factory=list)
    scale: str = "or"

    @property
    def names(self) -> List[str]:
        return [c for c, _ in self.columns]

    def add(self, **cells) -> None:
        unknown = set(cells) - set(self.names)
        if unknown:
            raise ReportError(f"unknown columns {sorted(unknown)}")
        row = tuple(_clean(cells.get(name), kind) for name, kind in self.columns)
        self._check_row(row)
        self.rows.append(row)

    def _check_row(self, row):
        d = dict(zip(self.names, row))
        if {"estimate", "ci_lower", "ci_upper"} <= d.keys():
            lo, est, hi = d["ci_lower"], d["estimate"], d["ci_upper"]
            if None not in (lo, est, hi) and not lo <= est <= hi:
                raise ReportError(f"row {row!r}: need ci_lower <= estimate <= ci_upper")

    def records(self) -> List[Dict[str, object]]:
        return [dict(zip(self.names, row)) for row in self.rows]

    def find(self, **match) -> List[Dict[str, object]]:
        return [r for r in self.records() if all(r.get(k) == v for k, v in match.items())]

    # TSV

    def to_tsv(self) -> str:
        out = io.StringIO()
        out.write(f"# scale: {self.scale}\n")
        out.write("\t".join(self.names) + "\n")
        for row in self.rows:
            out.write("\t".join(_format(v, kind) for v, (_, kind) in zip(row, self.columns)) + "\n")
        return out.getvalue()

    @classmethod
    def from_tsv(cls, text: str, columns: Optional[Sequence[Tuple[str, str]]] = None) -> "ReportTable":
        lines = text.splitlines()
        scale = "or"
        while lines and lines[0].startswith("#"):
            key, _, val = lines.pop(0)[1:].partition(":")
            if key.strip() == "scale":
                scale = val.strip()
        if not lines:
            raise ReportError("report has no header line")
        header = lines[0].split("\t")
        cols = _resolve_columns(header, columns)
        table = cls(columns=cols, scale=scale)
        for lineno, line in enumerate(lines[1:], 2):
            cells = line.split("\t")
            if len(cells) != len(cols):
                raise ReportError(f"line {lineno}: expected {len(cols)} cells, got {len(cells)}")
            try:
                row = tuple(_parse(c, kind) for c, (_, kind) in zip(cells, cols))
            except ValueError as exc:
                raise ReportError(f"line {lineno}: {exc}") from None
            table._check_row(row)
            table.rows.append(row)
        return table

    # JSON

    def to_json(self) -> str:
        payload = {"scale": self.scale, "columns": self.names, "rows": self.records()}
        return json.dumps(payload, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str, columns: Optional[Sequence[Tuple[str, str]]] = None) -> "ReportTable":
        try:
            payload = json.loads(text)
            cols = _resolve_columns(payload["columns"], columns)
            table = cls(columns=cols, scale=payload.get("scale", "or"))
            for rec in payload["rows"]:
                table.add(**rec)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ReportError(f"malformed JSON report: {exc}") from None
        return table

    def serialize(self, fmt: str) -> str:
        if fmt == "tsv":
            return self.to_tsv()
        if fmt == "json":
            return self.to_json()
        raise ReportError(f"unknown format {fmt!r}")

    @classmethod
    def parse(cls, text: str, fmt: str) -> "ReportTable":
        return cls.from_tsv(text) if fmt == "tsv" else cls.from_json(text)


def _resolve_columns(header, columns):
    if columns is not None:
        cols = tuple(columns)
        if [c for c, _ in cols] != list(header):
            raise ReportError(f"header {header!r} does not match the expected columns")
        return cols
    for schema in (FIT_COLUMNS, SIM_COLUMNS):
        if [c for c, _ in schema] == list(header):
            return schema
    raise ReportError(f"unrecognised report header {header!r}")
