"""Census/survey table ingestion and outcome-vector construction.

Census amenity tables are keyed by bracketed column indices (``[49]``,
``[128]``, ...). Village-level rows hold percentages of households; the
derived vectors store fractions in [0, 1]. Tehsil-level tables hold raw
household counts and are combined with year-specific ratio formulas; the
same variable can draw on different source tables per year, so tehsil rows
are grouped by source-table id.

Persisted CSV files keep the census's native units (percentages / counts);
conversion to fractions happens here, once, at ingestion.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, SchemaError

log = logging.getLogger(__name__)

ASSET_NAMES = (
    "rooms-under-3",
    "household-size-under-5",
    "water-treated",
    "water-untreated",
    "water-natural",
    "electric-like",
    "oil-like",
    "electronics",
    "has-phone",
    "transport-cycle",
    "transport-motorized",
    "no-assets",
    "banking-services-availability",
    "cook-fuel-processed",
    "bathroom-within",
    "permanent-house",
)

# Village-level aggregation: component = sum(columns) / divisor, percent.
# The electronics formula divides a four-column sum by 3 as printed in the
# source documentation; values are clamped to [0, 1] after conversion.
ASSET_FORMULAS: dict[str, tuple[tuple[int, ...], int]] = {
    "rooms-under-3": ((49, 50, 51), 1),
    "household-size-under-5": ((56, 57, 58, 59), 1),
    "water-treated": ((72, 74, 77), 1),
    "water-untreated": ((73, 75), 1),
    "water-natural": ((76, 78, 79, 80, 81), 1),
    "electric-like": ((85, 87), 1),
    "oil-like": ((86, 88, 89), 1),
    "electronics": ((128, 129, 130, 131), 3),
    "has-phone": ((132, 133, 134), 1),
    "transport-cycle": ((135,), 1),
    "transport-motorized": ((136, 137), 1),
    "no-assets": ((139,), 1),
    "banking-services-availability": ((127,), 1),
    "cook-fuel-processed": ((113, 114, 115), 1),
    "bathroom-within": ((103, 104), 1),
    "permanent-house": ((140,), 1),
}

TEHSIL_NAMES = (
    "electric-like",
    "oil-like",
    "electronics",
    "has-phone",
    "transport-cycle",
    "transport-motorized",
    "no-assets",
    "banking-services-availability",
    "cook-fuel-processed",
    "bathroom-within",
)

# Tehsil-level ratio formulas: (source table, numerator terms, denominator
# column). Each numerator term is (columns, divisor); terms are summed.
# The 2001 electronics entry follows the 2011 formula's grouping,
# ([4]+[5])/[2], resolving the source's ambiguous precedence.
TehsilFormula = tuple[str, tuple[tuple[tuple[int, ...], int], ...], int]

TEHSIL_FORMULAS: dict[int, dict[str, TehsilFormula]] = {
    2011: {
        "electric-like": ("HH-7", (((9, 11), 1),), 8),
        "oil-like": ("HH-7", (((10, 12), 1),), 8),
        "electronics": ("HH-12", (((10, 11, 12, 13), 3), ((20,), 1)), 8),
        "has-phone": ("HH-12", (((14, 15, 16), 1),), 8),
        "transport-cycle": ("HH-12", (((17,), 1),), 8),
        "transport-motorized": ("HH-12", (((18, 19), 1),), 8),
        "no-assets": ("HH-12", (((21,), 1),), 8),
        "banking-services-availability": ("HH-12", (((9,), 1),), 8),
        "cook-fuel-processed": ("HH-10", (((14, 15), 1),), 9),
        "bathroom-within": ("HH-10", (((9,), 1),), 8),
    },
    2001: {
        "electric-like": ("H-9", (((3, 5), 1),), 2),
        "oil-like": ("H-9", (((4, 6), 1),), 2),
        "electronics": ("H-13", (((4, 5), 1),), 2),
        "has-phone": ("H-13", (((6,), 1),), 2),
        "transport-cycle": ("H-13", (((7,), 1),), 2),
        "transport-motorized": ("H-13", (((8, 9), 1),), 2),
        "no-assets": ("H-13", (((10,), 1),), 2),
        "banking-services-availability": ("H-13", (((3,), 1),), 2),
        "cook-fuel-processed": ("H-10", (((8, 9), 1),), 3),
        "bathroom-within": ("H-11", (((3,), 1),), 2),
    },
}

TEHSIL_SOURCE_TABLES = {
    year: tuple(sorted({f[0] for f in formulas.values()}))
    for year, formulas in TEHSIL_FORMULAS.items()
}

HEALTH_FACTOR_COUNT = 93
# Ratio-per-1000 and currency factors are nonnegative but not percentages.
HEALTH_NON_PERCENT = frozenset({3, 4, 37})

DEMOGRAPHIC_NAMES = (
    "literacy_rate",
    "working_population_share",
    "scheduled_caste_share",
    "scheduled_tribe_share",
)


@dataclass(frozen=True)
class VillageRecord:
    village_id: str
    population: int
    tehsil_id: str
    district_id: str
    state_id: str
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if self.population < 0:
            raise DataError(f"village {self.village_id}: negative population")


@dataclass(frozen=True)
class AssetVector16:
    """16 village-level asset fractions in ASSET_NAMES order."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (16,):
            raise SchemaError(f"asset vector must have 16 entries, got {values.shape}")
        if np.any(values < 0) or np.any(values > 1):
            raise DataError("asset fractions must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __getitem__(self, name: str) -> float:
        return float(self.values[ASSET_NAMES.index(name)])


@dataclass(frozen=True)
class TehsilVector10:
    """10 tehsil-level fractions in TEHSIL_NAMES order, tagged with the year."""

    values: np.ndarray
    year: int

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (10,):
            raise SchemaError(f"tehsil vector must have 10 entries, got {values.shape}")
        if np.any(values < 0) or np.any(values > 1):
            raise DataError("tehsil fractions must lie in [0, 1]")
        if self.year not in TEHSIL_FORMULAS:
            raise SchemaError(f"unsupported census year {self.year}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __getitem__(self, name: str) -> float:
        return float(self.values[TEHSIL_NAMES.index(name)])


@dataclass(frozen=True)
class HealthVector93:
    """93 district-level survey outcomes; absent factors carry mask False."""

    values: np.ndarray    # (93,), NaN where absent
    present: np.ndarray   # (93,) bool
    survey_round: str     # "NFHS-4" or "NFHS-5"

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        present = np.asarray(self.present, dtype=bool)
        if values.shape != (HEALTH_FACTOR_COUNT,) or present.shape != (HEALTH_FACTOR_COUNT,):
            raise SchemaError("health vector must have 93 entries")
        if self.survey_round not in ("NFHS-4", "NFHS-5"):
            raise SchemaError(f"unknown survey round {self.survey_round}")
        for i in range(HEALTH_FACTOR_COUNT):
            if not present[i]:
                continue
            v = values[i]
            if not np.isfinite(v) or v < 0:
                raise DataError(f"factor-{i + 1}: value {v} out of range")
            if (i + 1) not in HEALTH_NON_PERCENT and v > 100:
                raise DataError(f"factor-{i + 1}: percentage {v} above 100")
        values.setflags(write=False)
        present.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "present", present)


@dataclass(frozen=True)
class DemographicVector:
    literacy_rate: float
    working_population_share: float
    scheduled_caste_share: float
    scheduled_tribe_share: float

    def __post_init__(self) -> None:
        for name in DEMOGRAPHIC_NAMES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} = {v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in DEMOGRAPHIC_NAMES])


def build_asset_vector(census_row: Mapping[int, float]) -> AssetVector16:
    """Apply the village-level aggregation formulas to one census row.

    Row values are percentages of households; the result is a fraction,
    clamped to [0, 1] (the electronics formula can exceed 100 by design).
    """
    out = np.empty(16)
    for i, name in enumerate(ASSET_NAMES):
        cols, divisor = ASSET_FORMULAS[name]
        try:
            total = sum(float(census_row[c]) for c in cols)
        except KeyError as exc:
            raise SchemaError(f"census row missing column [{exc.args[0]}] needed by {name}") from None
        out[i] = min(max(total / divisor / 100.0, 0.0), 1.0)
    return AssetVector16(values=out)


def build_tehsil_vector(
    rows: Mapping[str, Mapping[int, float]] | Mapping[int, float],
    year: int,
) -> TehsilVector10:
    """Combine the year's source-table rows into the 10 tehsil fractions.

    ``rows`` maps source-table id to its column row; a flat column->value
    mapping is accepted too and is then used for every table. A zero or
    missing denominator raises DataError so the caller can exclude the
    tehsil and log it.
    """
    if year not in TEHSIL_FORMULAS:
        raise SchemaError(f"unsupported census year {year}")
    flat = rows if rows and not isinstance(next(iter(rows.keys())), str) else None

    def table_row(table: str) -> Mapping[int, float]:
        if flat is not None:
            return flat  # type: ignore[return-value]
        try:
            return rows[table]  # type: ignore[index]
        except KeyError:
            raise SchemaError(f"missing source table {table} for year {year}") from None

    out = np.empty(10)
    for i, name in enumerate(TEHSIL_NAMES):
        table, terms, denom_col = TEHSIL_FORMULAS[year][name]
        row = table_row(table)
        denom = float(row.get(denom_col, 0.0))
        if denom <= 0:
            raise DataError(f"{name}: denominator column [{denom_col}] of {table} is not positive")
        try:
            numer = sum(sum(float(row[c]) for c in cols) / div for cols, div in terms)
        except KeyError as exc:
            raise SchemaError(f"{table} row missing column [{exc.args[0]}] needed by {name}") from None
        out[i] = min(max(numer / denom, 0.0), 1.0)
    return TehsilVector10(values=out, year=year)


def _parse_bracketed_header(fields: Sequence[str], id_field: str) -> dict[int, int]:
    """Map column index -> CSV position for headers like id,[2],[3],..."""
    if not fields or fields[0] != id_field:
        raise SchemaError(f"expected first column {id_field!r}, got {fields[:1]}")
    positions = {}
    for pos, name in enumerate(fields[1:], start=1):
        name = name.strip()
        if not (name.startswith("[") and name.endswith("]")):
            raise SchemaError(f"malformed column header {name!r}")
        positions[int(name[1:-1])] = pos
    return positions


def load_census_rows(path: str | Path, id_field: str) -> dict[str, dict[int, float]]:
    """Read a bracketed-column census CSV into id -> {column: value}."""
    rows: dict[str, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        positions = _parse_bracketed_header(header, id_field)
        for rec in reader:
            if not rec:
                continue
            rows[rec[0]] = {col: float(rec[pos]) for col, pos in positions.items()}
    return rows


def load_asset_vectors(path: str | Path) -> dict[str, AssetVector16]:
    """Village census CSV -> asset vectors keyed by village id."""
    return {vid: build_asset_vector(row) for vid, row in load_census_rows(path, "village_id").items()}


def load_tehsil_vectors(table_paths: Mapping[str, str | Path], year: int) -> dict[str, TehsilVector10]:
    """Ingest the year's per-table CSVs and build one vector per tehsil.

    Tehsils with a non-positive denominator in any formula are excluded and
    logged, as are tehsils missing from one of the source tables.
    """
    tables = {name: load_census_rows(p, "tehsil_id") for name, p in table_paths.items()}
    for required in TEHSIL_SOURCE_TABLES[year]:
        if required not in tables:
            raise SchemaError(f"missing source table {required} for year {year}")
    ids = set.intersection(*(set(t.keys()) for t in tables.values()))
    out: dict[str, TehsilVector10] = {}
    for tid in sorted(ids):
        rows = {name: table[tid] for name, table in tables.items()}
        try:
            out[tid] = build_tehsil_vector(rows, year)
        except DataError as exc:
            log.warning("tehsil %s excluded: %s", tid, exc)
    dropped = set.union(*(set(t.keys()) for t in tables.values())) - ids
    for tid in sorted(dropped):
        log.warning("tehsil %s excluded: absent from at least one source table", tid)
    return out


def load_health_vectors(path: str | Path, survey_round: str) -> dict[str, HealthVector93]:
    """Survey CSV (district_id, factor-1..factor-93) -> district vectors.

    Empty cells are recorded as absent, not zero. Rows with missing columns
    or out-of-range values are rejected and logged.
    """
    expected = ["district_id"] + [f"factor-{i}" for i in range(1, HEALTH_FACTOR_COUNT + 1)]
    out: dict[str, HealthVector93] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if [h.strip() for h in header] != expected:
            raise SchemaError(f"survey header does not match the {survey_round} schema")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) < HEALTH_FACTOR_COUNT + 1:
                log.warning("%s line %d: rejected row with %d columns", path, lineno, len(rec))
                continue
            values = np.full(HEALTH_FACTOR_COUNT, np.nan)
            present = np.zeros(HEALTH_FACTOR_COUNT, dtype=bool)
            for i in range(HEALTH_FACTOR_COUNT):
                cell = rec[i + 1].strip()
                if cell == "":
                    continue
                values[i] = float(cell)
                present[i] = True
            try:
                out[rec[0]] = HealthVector93(values=values, present=present, survey_round=survey_round)
            except DataError as exc:
                log.warning("%s line %d: rejected row: %s", path, lineno, exc)
    return out


def load_village_manifest(path: str | Path) -> dict[str, VillageRecord]:
    """Village manifest JSONL -> records keyed by village id."""
    out: dict[str, VillageRecord] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out[rec["village_id"]] = VillageRecord(
                village_id=rec["village_id"],
                population=int(rec["population"]),
                tehsil_id=rec["tehsil_id"],
                district_id=rec["district_id"],
                state_id=rec["state_id"],
                lat=float(rec["lat"]),
                lon=float(rec["lon"]),
            )
    return out


def save_village_manifest(path: str | Path, records: Sequence[VillageRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "village_id": r.village_id,
                "lat": r.lat,
                "lon": r.lon,
                "population": r.population,
                "tehsil_id": r.tehsil_id,
                "district_id": r.district_id,
                "state_id": r.state_id,
            }, sort_keys=True) + "\n")


def load_demographics(path: str | Path) -> dict[str, DemographicVector]:
    """Demographics CSV (village_id + four share columns) -> vectors."""
    out: dict[str, DemographicVector] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(("village_id",) + DEMOGRAPHIC_NAMES) - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"demographics file missing columns {sorted(missing)}")
        for rec in reader:
            out[rec["village_id"]] = DemographicVector(
                **{name: float(rec[name]) for name in DEMOGRAPHIC_NAMES}
            )
    return out
