"""Data intake: daily CSV parsing, annual-maximum extraction, validation.

Two file schemas are understood, distinguished by their header row:

    daily   source,site_id,lon,lat,elevation_m,date,value_mm
    maxima  source,site_id,lon,lat,elevation_m,year,max_mm

``NA`` marks a missing daily value.  A site-year is dropped when five or
more of its calendar days are missing, where days absent from the file
count as missing alongside explicit ``NA`` rows; dropped years and sites
are tallied in the ingestion report rather than failing the load.
"""

from __future__ import annotations

import calendar
import csv
import datetime
from dataclasses import dataclass, field

import numpy as np

from gevfield.exceptions import IngestError
from gevfield.model import JointDataset, SiteRecord
from gevfield.spatial import Location, SourceTag, project_lonlat

MISSING_MARKER = "NA"
MISSING_DAY_LIMIT = 5

DAILY_HEADER = ("source", "site_id", "lon", "lat", "elevation_m", "date", "value_mm")
MAXIMA_HEADER = ("source", "site_id", "lon", "lat", "elevation_m", "year", "max_mm")


@dataclass(frozen=True)
class DailySeries:
    """One site's raw daily values; ``None`` marks an explicit missing day."""

    site_id: str
    source_tag: SourceTag
    lon: float
    lat: float
    elevation: float
    records: tuple[tuple[datetime.date, float | None], ...]

    def __post_init__(self):
        dates = [d for d, _ in self.records]
        if len(set(dates)) != len(dates):
            raise IngestError(f"site {self.site_id}: duplicate dates in daily series")
        for d, v in self.records:
            if v is not None and not (np.isfinite(v) and v >= 0.0):
                raise IngestError(f"site {self.site_id}: negative or non-finite value on {d}")


@dataclass
class IngestReport:
    """What the loader kept and what it dropped, per site."""

    rows_read: int = 0
    years_dropped: dict[str, int] = field(default_factory=dict)
    sites_dropped: tuple[str, ...] = ()

    @property
    def n_years_dropped(self) -> int:
        return sum(self.years_dropped.values())

    def summary_lines(self) -> list[str]:
        lines = [f"rows read: {self.rows_read}"]
        for sid in sorted(self.years_dropped):
            n = self.years_dropped[sid]
            if n:
                lines.append(f"site {sid}: {n} year(s) dropped (missing-day rule)")
        for sid in self.sites_dropped:
            lines.append(f"site {sid}: dropped entirely (no retained years)")
        return lines


def extract_annual_maxima(
    series: DailySeries, missing_day_limit: int = MISSING_DAY_LIMIT
) -> list[tuple[int, float]]:
    """Per-year maxima of the present values, omitting incomplete years.

    A year counts as incomplete when (days in the calendar year) minus
    (days with a present value) reaches ``missing_day_limit``.
    """
    present: dict[int, list[float]] = {}
    seen_days: dict[int, int] = {}
    for d, v in series.records:
        seen_days[d.year] = seen_days.get(d.year, 0) + 1
        if v is not None:
            present.setdefault(d.year, []).append(v)

    out = []
    for year in sorted(seen_days):
        year_length = 366 if calendar.isleap(year) else 365
        n_present = len(present.get(year, ()))
        if year_length - n_present >= missing_day_limit:
            continue
        out.append((year, max(present[year])))
    return out


def _parse_float(text: str, what: str, path: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"bad {what} value {text!r}", path=path, line=line) from None


def _parse_source(text: str, path: str, line: int) -> SourceTag:
    try:
        return SourceTag(text.strip().lower())
    except ValueError:
        raise IngestError(
            f"unknown source {text!r} (expected 'field' or 'simulator')", path=path, line=line
        ) from None


def _read_rows(path: str) -> tuple[tuple[str, ...], list[tuple[int, list[str]]]]:
    """Header plus (line number, cells) rows, comment lines skipped."""
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot open file: {exc}", path=path) from exc
    with handle:
        rows = []
        header = None
        for line_no, cells in enumerate(csv.reader(handle), start=1):
            if not cells or cells[0].startswith("#"):
                continue
            if header is None:
                header = tuple(c.strip().lower() for c in cells)
                continue
            rows.append((line_no, [c.strip() for c in cells]))
    if header is None:
        raise IngestError("empty file (no header row)", path=path)
    if header not in (DAILY_HEADER, MAXIMA_HEADER):
        raise IngestError(
            f"unrecognized header {','.join(header)!r}; expected the daily or "
            "annual-maxima schema", path=path, line=1,
        )
    return header, rows


@dataclass
class _SiteAccumulator:
    source: SourceTag
    lon: float
    lat: float
    elevation: float
    daily: list[tuple[datetime.date, float | None]] = field(default_factory=list)
    maxima: list[tuple[int, float]] = field(default_factory=list)
    years_in_file: set = field(default_factory=set)


def _check_metadata(acc: _SiteAccumulator, sid, source, lon, lat, elev, path, line):
    same = (
        acc.source is source
        and acc.lon == lon and acc.lat == lat and acc.elevation == elev
    )
    if not same:
        raise IngestError(
            f"site {sid!r} reappears with different metadata", path=path, line=line
        )


def _parse_file(path: str, sites: dict[str, _SiteAccumulator], report: IngestReport):
    header, rows = _read_rows(path)
    daily = header == DAILY_HEADER
    for line_no, cells in rows:
        if len(cells) != 7:
            raise IngestError(
                f"expected 7 columns, found {len(cells)}", path=path, line=line_no
            )
        source = _parse_source(cells[0], path, line_no)
        sid = cells[1]
        if not sid:
            raise IngestError("empty site_id", path=path, line=line_no)
        lon = _parse_float(cells[2], "lon", path, line_no)
        lat = _parse_float(cells[3], "lat", path, line_no)
        elev = _parse_float(cells[4], "elevation_m", path, line_no)

        acc = sites.get(sid)
        if acc is None:
            acc = sites[sid] = _SiteAccumulator(source, lon, lat, elev)
        else:
            _check_metadata(acc, sid, source, lon, lat, elev, path, line_no)

        if daily:
            try:
                day = datetime.date.fromisoformat(cells[5])
            except ValueError:
                raise IngestError(f"bad date {cells[5]!r}", path=path, line=line_no) from None
            value = None if cells[6] == MISSING_MARKER else _parse_float(
                cells[6], "value_mm", path, line_no
            )
            if value is not None and not (np.isfinite(value) and value >= 0.0):
                raise IngestError(
                    f"value_mm must be non-negative and finite, got {value}",
                    path=path, line=line_no,
                )
            acc.daily.append((day, value))
            acc.years_in_file.add(day.year)
        else:
            if cells[6] == MISSING_MARKER:
                raise IngestError(
                    "annual-maxima rows cannot be missing; omit the year instead",
                    path=path, line=line_no,
                )
            try:
                year = int(cells[5])
            except ValueError:
                raise IngestError(f"bad year {cells[5]!r}", path=path, line=line_no) from None
            acc.maxima.append((year, _parse_float(cells[6], "max_mm", path, line_no)))
            acc.years_in_file.add(year)
        report.rows_read += 1


def load_dataset(
    field_path: str,
    simulator_path: str | None = None,
    missing_day_limit: int = MISSING_DAY_LIMIT,
) -> tuple[JointDataset, IngestReport]:
    """Parse one or two CSV files into a validated dataset plus a report.

    Either file may use the daily or the pre-extracted annual-maxima
    schema.  Site ids must be unique across both files.
    """
    report = IngestReport()
    sites: dict[str, _SiteAccumulator] = {}
    _parse_file(field_path, sites, report)
    if simulator_path is not None:
        second: dict[str, _SiteAccumulator] = {}
        _parse_file(simulator_path, second, report)
        shared = sorted(set(sites) & set(second))
        if shared:
            raise IngestError(
                f"site_ids appear in both files: {', '.join(shared)}",
                path=simulator_path,
            )
        sites.update(second)

    for sid, acc in sites.items():
        if acc.daily:
            series = DailySeries(
                sid, acc.source, acc.lon, acc.lat, acc.elevation, tuple(acc.daily)
            )
            acc.maxima = extract_annual_maxima(series, missing_day_limit)
        else:
            years = [y for y, _ in acc.maxima]
            if len(set(years)) != len(years):
                raise IngestError(f"site {sid}: duplicate years in maxima")
        dropped = len(acc.years_in_file) - len(acc.maxima)
        report.years_dropped[sid] = dropped

    kept: dict[str, _SiteAccumulator] = {}
    dropped_sites = []
    for sid, acc in sites.items():
        if acc.maxima:
            kept[sid] = acc
        else:
            dropped_sites.append(sid)
    report.sites_dropped = tuple(sorted(dropped_sites))
    if not kept:
        raise IngestError("no site retains any year after the missing-day rule", path=field_path)

    lon0 = float(np.mean([a.lon for a in kept.values()]))
    lat0 = float(np.mean([a.lat for a in kept.values()]))
    records = []
    for sid in sorted(kept):
        acc = kept[sid]
        east, north = project_lonlat(acc.lon, acc.lat, (lon0, lat0))
        loc = Location(float(east), float(north), acc.lon, acc.lat, acc.elevation, acc.source)
        maxima = sorted(acc.maxima)
        records.append(
            SiteRecord(sid, loc, tuple(y for y, _ in maxima), tuple(v for _, v in maxima))
        )
    return JointDataset(tuple(records), (lon0, lat0)), report


def write_dataset(data: JointDataset, path: str, comment: str | None = None) -> None:
    """Write the annual-maxima CSV; ``comment`` becomes a leading # line."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        if comment:
            handle.write(f"# {comment}\n")
        writer = csv.writer(handle)
        writer.writerow(MAXIMA_HEADER)
        for rec in data.records:
            loc = rec.location
            for year, value in zip(rec.years, rec.values):
                writer.writerow(
                    [loc.source_tag.value, rec.site_id, repr(loc.lon), repr(loc.lat),
                     repr(loc.elevation), year, repr(value)]
                )
