"""Study records, 2x2-table effect sizes and CSV ingestion.

The CSV layout is one flat table covering both journal-published studies and
registry-only entries::

    study,events_trt,total_trt,events_ctl,total_ctl,n,yi,sei,published

Empty cells mean "absent". ``published`` is 0 or 1.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

__all__ = [
    "CSV_COLUMNS",
    "DatasetError",
    "StudyRecord",
    "MetaDataset",
    "Violation",
    "two_by_two_effect",
    "parse_csv",
    "serialize_csv",
    "validate",
    "load_bundled",
    "BUNDLED",
]

CSV_COLUMNS = (
    "study",
    "events_trt",
    "total_trt",
    "events_ctl",
    "total_ctl",
    "n",
    "yi",
    "sei",
    "published",
)
BUNDLED = ("tiotropium", "clopidogrel")

_COUNT_FIELDS = ("events_trt", "total_trt", "events_ctl", "total_ctl")


class DatasetError(ValueError):
    """Raised when a dataset cannot be read or violates its invariants."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


def two_by_two_effect(events_trt: int, total_trt: int, events_ctl: int, total_ctl: int) -> Tuple[float, float]:
    """Log odds ratio and its standard error from a two-arm binary table.

    When any of the four cells is zero, 0.5 is added to all four cells
    (Haldane-Anscombe) before computing the estimate.

    Returns
    -------
    yi, sei : float
        log[(a d) / (b c)] and sqrt(1/a + 1/b + 1/c + 1/d).
    """
    for name, v in zip(_COUNT_FIELDS, (events_trt, total_trt, events_ctl, total_ctl)):
        if v is None or v < 0 or int(v) != v:
            raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")
    if total_trt < 1 or total_ctl < 1:
        raise ValueError("arm totals must be at least 1")
    if events_trt > total_trt or events_ctl > total_ctl:
        raise ValueError("events cannot exceed the arm total")
    a = float(events_trt)
    b = float(total_trt - events_trt)
    c = float(events_ctl)
    d = float(total_ctl - events_ctl)
    if min(a, b, c, d) == 0.0:
        a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
    yi = math.log(a) + math.log(d) - math.log(b) - math.log(c)
    # fsum is correctly rounded, so sei is exactly symmetric in the cells
    sei = math.sqrt(math.fsum((1.0 / a, 1.0 / b, 1.0 / c, 1.0 / d)))
    return yi, sei


@dataclass(frozen=True)
class StudyRecord:
    id: str
    published: bool
    n: Optional[int] = None
    yi: Optional[float] = None
    sei: Optional[float] = None
    events_trt: Optional[int] = None
    total_trt: Optional[int] = None
    events_ctl: Optional[int] = None
    total_ctl: Optional[int] = None

    @property
    def has_counts(self) -> bool:
        return all(getattr(self, f) is not None for f in _COUNT_FIELDS)

    def counts(self) -> Tuple[int, int, int, int]:
        return tuple(getattr(self, f) for f in _COUNT_FIELDS)

    def with_effect_from_counts(self) -> "StudyRecord":
        """Fill yi/sei from the 2x2 table when they are missing."""
        if self.yi is not None and self.sei is not None:
            return self
        if not self.has_counts:
            return self
        yi, sei = two_by_two_effect(*self.counts())
        return replace(self, yi=yi, sei=sei)


@dataclass(frozen=True)
class Violation:
    row: int
    study: str
    rule: str

    def __str__(self):
        return f"row {self.row} ({self.study}): {self.rule}"


def _check_record(row: int, r: StudyRecord) -> List[Violation]:
    out = []

    def bad(rule):
        out.append(Violation(row, r.id, rule))

    if r.n is not None and (not isinstance(r.n, (int, np.integer)) or r.n < 1):
        bad("n must be a positive integer")
    if r.has_counts:
        et, tt, ec, tc = r.counts()
        if min(et, tt, ec, tc) < 0:
            bad("arm counts must be nonnegative")
        if et > tt or ec > tc:
            bad("events must not exceed the arm total")
        if tt < 1 or tc < 1:
            bad("arm totals must be at least 1")
    elif any(getattr(r, f) is not None for f in _COUNT_FIELDS):
        bad("arm counts must be all present or all absent")
    if r.published:
        if r.yi is None or r.sei is None:
            bad("published study needs yi and sei (directly or from counts)")
        else:
            if not math.isfinite(r.yi):
                bad("yi must be finite")
            if not (math.isfinite(r.sei) and r.sei > 0):
                bad("sei (s_i) must be positive")
    else:
        if r.n is None:
            bad("unpublished study needs the registry sample size n")
        if r.yi is not None or r.sei is not None:
            bad("unpublished study must not carry yi/sei")
        if any(getattr(r, f) is not None for f in _COUNT_FIELDS):
            bad("unpublished study must not carry arm counts")
    return out


@dataclass(frozen=True)
class MetaDataset:
    """Ordered collection of published and registry-only studies.

    ``studies`` keeps the input order; ``published`` and ``unpublished``
    give the two strata. Construction validates and raises
    :class:`DatasetError` on any violation.
    """

    studies: Tuple[StudyRecord, ...]
    name: str = ""
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "studies", tuple(self.studies))
        problems = validate(self)
        if problems:
            raise DatasetError(
                "invalid dataset: " + "; ".join(str(p) for p in problems), problems
            )

    @classmethod
    def from_arrays(cls, yi, sei, n=None, n_unpublished=(), name="") -> "MetaDataset":
        yi = np.asarray(yi, dtype=float)
        sei = np.asarray(sei, dtype=float)
        ns = [None] * yi.size if n is None else [int(v) for v in n]
        recs = [
            StudyRecord(id=f"s{i + 1}", published=True, n=ns[i], yi=float(yi[i]), sei=float(sei[i]))
            for i in range(yi.size)
        ]
        recs += [
            StudyRecord(id=f"u{j + 1}", published=False, n=int(m))
            for j, m in enumerate(n_unpublished)
        ]
        return cls(tuple(recs), name=name)

    @property
    def published(self) -> Tuple[StudyRecord, ...]:
        return tuple(s for s in self.studies if s.published)

    @property
    def unpublished(self) -> Tuple[StudyRecord, ...]:
        return tuple(s for s in self.studies if not s.published)

    @property
    def n_published(self) -> int:
        return sum(1 for s in self.studies if s.published)

    @property
    def n_unpublished(self) -> int:
        return len(self.studies) - self.n_published

    def _arr(self, key, fn):
        if key not in self._cache:
            a = np.asarray(fn(), dtype=float)
            a.setflags(write=False)
            self._cache[key] = a
        return self._cache[key]

    @property
    def yi(self) -> np.ndarray:
        return self._arr("yi", lambda: [s.yi for s in self.published])

    @property
    def sei(self) -> np.ndarray:
        return self._arr("sei", lambda: [s.sei for s in self.published])

    @property
    def n_pub(self) -> np.ndarray:
        """Sample sizes of published studies (NaN where unknown)."""
        return self._arr("n_pub", lambda: [np.nan if s.n is None else s.n for s in self.published])

    @property
    def n_unpub(self) -> np.ndarray:
        return self._arr("n_unpub", lambda: [s.n for s in self.unpublished])

    def subset(self, indices: Iterable[int], name=None) -> "MetaDataset":
        """Dataset built from the given positions of ``studies``."""
        return MetaDataset(tuple(self.studies[i] for i in indices), name=self.name if name is None else name)

    def published_only(self) -> "MetaDataset":
        return MetaDataset(self.published, name=self.name)

    def shifted(self, c: float) -> "MetaDataset":
        """Copy with every published effect shifted by ``c``."""
        return MetaDataset(
            tuple(replace(s, yi=s.yi + c) if s.published else s for s in self.studies),
            name=self.name,
        )


def validate(dataset) -> List[Violation]:
    """List every invariant violation; empty when the dataset is valid.

    Accepts a :class:`MetaDataset` or any sequence of :class:`StudyRecord`
    so that invalid collections can be inspected without raising.
    """
    studies = dataset.studies if isinstance(dataset, MetaDataset) else tuple(dataset)
    out: List[Violation] = []
    for i, r in enumerate(studies, start=1):
        out.extend(_check_record(i, r))
    n_pub = sum(1 for s in studies if s.published)
    if n_pub < 2:
        out.append(Violation(0, "<dataset>", f"need at least 2 published studies (N >= 2), found {n_pub}"))
    return out


def _parse_int(text, col, row):
    text = text.strip()
    if text == "":
        return None
    try:
        v = float(text)
    except ValueError:
        raise DatasetError(f"row {row}: column {col!r} is not numeric: {text!r}") from None
    if not math.isfinite(v) or v != int(v):
        raise DatasetError(f"row {row}: column {col!r} must be an integer: {text!r}")
    return int(v)


def _parse_float(text, col, row):
    text = text.strip()
    if text == "":
        return None
    try:
        v = float(text)
    except ValueError:
        raise DatasetError(f"row {row}: column {col!r} is not numeric: {text!r}") from None
    if not math.isfinite(v):
        raise DatasetError(f"row {row}: column {col!r} is not finite: {text!r}")
    return v


def _parse_published(text, row):
    t = text.strip()
    if t in ("1", "1.0", "true", "True", "TRUE"):
        return True
    if t in ("0", "0.0", "false", "False", "FALSE"):
        return False
    raise DatasetError(f"row {row}: column 'published' must be 0 or 1, got {text!r}")


def _read_records(stream: TextIO) -> List[StudyRecord]:
    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        raise DatasetError("empty input: header row missing")
    header = [h.strip() for h in reader.fieldnames]
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise DatasetError(f"missing required columns: {', '.join(missing)}")
    records = []
    for row_no, raw in enumerate(reader, start=1):
        raw = {k.strip(): (v or "") for k, v in raw.items() if k is not None}
        counts = {c: _parse_int(raw[c], c, row_no) for c in _COUNT_FIELDS}
        n = _parse_int(raw["n"], "n", row_no)
        yi = _parse_float(raw["yi"], "yi", row_no)
        sei = _parse_float(raw["sei"], "sei", row_no)
        published = _parse_published(raw["published"], row_no)
        study = raw["study"].strip() or f"study{row_no}"
        has_counts = all(v is not None for v in counts.values())
        if published and (yi is None or sei is None) and not has_counts:
            raise DatasetError(
                f"row {row_no} ({study}): published study lacks both arm counts and (yi, sei)"
            )
        if n is None and has_counts:
            n = counts["total_trt"] + counts["total_ctl"]
        rec = StudyRecord(id=study, published=published, n=n, yi=yi, sei=sei, **counts)
        if published:
            try:
                rec = rec.with_effect_from_counts()
            except ValueError as exc:
                raise DatasetError(f"row {row_no} ({study}): {exc}") from None
        records.append(rec)
    if not records:
        raise DatasetError("dataset has no rows; at least 2 published studies are required")
    return records


def parse_csv(source: Union[str, os.PathLike, TextIO], name: Optional[str] = None) -> MetaDataset:
    """Read a dataset from a path or an open text stream.

    Published rows without ``yi``/``sei`` get them from their arm counts;
    explicitly supplied values always take precedence.

    Raises
    ------
    DatasetError
        On missing columns, non-numeric cells, published rows with neither
        counts nor effects, an empty file, or any invariant violation.
    """
    if hasattr(source, "read"):
        records = _read_records(source)
        label = name or getattr(source, "name", "")
    else:
        with open(source, newline="", encoding="utf-8") as fh:
            records = _read_records(fh)
        label = name or os.path.splitext(os.path.basename(os.fspath(source)))[0]
    return MetaDataset(tuple(records), name=str(label))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def serialize_csv(dataset: MetaDataset, stream: Optional[TextIO] = None) -> str:
    """Write ``dataset`` in the CSV layout; returns the text as well."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for s in dataset.studies:
        w.writerow(
            [
                s.id,
                _fmt(s.events_trt),
                _fmt(s.total_trt),
                _fmt(s.events_ctl),
                _fmt(s.total_ctl),
                _fmt(s.n),
                _fmt(s.yi),
                _fmt(s.sei),
                _fmt(s.published),
            ]
        )
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def bundled_path(name: str):
    if name not in BUNDLED:
        raise ValueError(f"unknown bundled dataset {name!r}; choose from {BUNDLED}")
    return resources.files("metabias").joinpath("data").joinpath(f"{name}.csv")


def load_bundled(name: str) -> MetaDataset:
    """Load one of the bundled case studies (``tiotropium`` or ``clopidogrel``)."""
    with bundled_path(name).open("r", encoding="utf-8", newline="") as fh:
        return parse_csv(fh, name=name)
