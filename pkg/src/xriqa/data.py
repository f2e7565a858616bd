"""Canonical data model and persistence: images, tiers, ratings, aggregated scores.

Scores live internally on [1, 100]; legacy inputs declare their native scale
and are rescaled on demand. Catalogs and MOS tables are UTF-8 CSV with fixed
headers, rating logs are line-delimited JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

SCALE_MIN = 1.0
SCALE_MAX = 100.0

TIER_NAMES = ("S", "M", "L")
TIER_ORDER = {name: i for i, name in enumerate(TIER_NAMES)}

SOURCES = ("flickr_koniq", "pixabay", "synthetic")


@dataclass(frozen=True)
class ResolutionTier:
    name: str
    width: int
    height: int

    def __post_init__(self):
        if self.name not in TIER_NAMES:
            raise ValueError(f"unknown tier name {self.name!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("tier geometry must be positive")
        if 3 * self.width != 4 * self.height:
            raise ValueError(
                f"tier {self.name} is {self.width}x{self.height}, not 4:3")

    @property
    def geometry(self) -> tuple[int, int]:
        return (self.width, self.height)


def make_tier_set(base_width: int = 512, base_height: int = 384) -> dict[str, ResolutionTier]:
    """S/M/L tiers from the smallest geometry, doubling per axis per step."""
    tiers = {
        name: ResolutionTier(name, base_width * 2 ** i, base_height * 2 ** i)
        for i, name in enumerate(TIER_NAMES)
    }
    return tiers


DEFAULT_TIERS = make_tier_set()


@dataclass
class ImageRecord:
    id: str
    source: str
    native_width: int
    native_height: int
    attributes: dict[str, str] = field(default_factory=dict)
    legacy_mos: float | None = None
    legacy_scale: tuple[float, float] | None = None
    favorites: int = 0
    views: int = 0
    extras: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"record {self.id!r}: unknown source {self.source!r}")
        if self.favorites < 0 or self.views < 0:
            raise ValueError(f"record {self.id!r}: favorites/views must be >= 0")
        if self.legacy_mos is not None and self.legacy_scale is None:
            raise ValueError(f"record {self.id!r}: legacy_mos without legacy_scale")

    @property
    def aspect_ratio(self) -> float:
        return self.native_width / self.native_height

    def legacy_mos_rescaled(self) -> float | None:
        """Legacy score mapped linearly onto [1, 100]."""
        if self.legacy_mos is None:
            return None
        lo, hi = self.legacy_scale
        if hi <= lo:
            raise ValueError(f"record {self.id!r}: degenerate legacy scale {lo}:{hi}")
        t = (self.legacy_mos - lo) / (hi - lo)
        return SCALE_MIN + t * (SCALE_MAX - SCALE_MIN)


@dataclass
class Catalog:
    records: list[ImageRecord] = field(default_factory=list)
    extra_columns: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}


_CATALOG_FIXED = ["id", "source", "width", "height", "favorites", "views",
                  "legacy_mos", "legacy_scale"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv_escape(cell: str) -> str:
    if any(c in cell for c in ',"\n'):
        return '"' + cell.replace('"', '""') + '"'
    return cell


def _csv_split(line: str) -> list[str]:
    # minimal RFC-4180 field splitter; our writer never emits embedded newlines
    out, cur, quoted, i = [], [], False, 0
    while i < len(line):
        c = line[i]
        if quoted:
            if c == '"':
                if i + 1 < len(line) and line[i + 1] == '"':
                    cur.append('"')
                    i += 1
                else:
                    quoted = False
            else:
                cur.append(c)
        elif c == '"':
            quoted = True
        elif c == ",":
            out.append("".join(cur))
            cur = []
        else:
            cur.append(c)
        i += 1
    out.append("".join(cur))
    return out


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    """Write catalog.csv: fixed columns, then attr:*, then preserved extras."""
    attr_names = sorted({a for r in catalog.records for a in r.attributes})
    header = _CATALOG_FIXED + [f"attr:{a}" for a in attr_names] + list(catalog.extra_columns)
    lines = [",".join(header)]
    for r in catalog.records:
        scale = "" if r.legacy_scale is None else f"{_fmt(r.legacy_scale[0])}:{_fmt(r.legacy_scale[1])}"
        cells = [r.id, r.source, str(r.native_width), str(r.native_height),
                 str(r.favorites), str(r.views), _fmt(r.legacy_mos), scale]
        cells += [r.attributes.get(a, "") for a in attr_names]
        cells += [r.extras.get(c, "") for c in catalog.extra_columns]
        lines.append(",".join(_csv_escape(c) for c in cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_int(cell: str, row: int, name: str) -> int:
    try:
        return int(cell)
    except ValueError:
        raise ValueError(f"catalog row {row}: field '{name}' is not an integer: {cell!r}")


def load_catalog(path: str | Path) -> Catalog:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ValueError("catalog file is empty (missing header)")
    header = _csv_split(lines[0])
    missing = [c for c in _CATALOG_FIXED if c not in header]
    if missing:
        raise ValueError(f"catalog header is missing columns {missing}")
    attr_cols = [c for c in header if c.startswith("attr:")]
    extra_cols = [c for c in header if c not in _CATALOG_FIXED and not c.startswith("attr:")]
    col = {name: header.index(name) for name in header}

    records, seen = [], set()
    for i, line in enumerate(lines[1:], start=1):
        if not line:
            continue
        cells = _csv_split(line)
        if len(cells) != len(header):
            raise ValueError(f"catalog row {i}: expected {len(header)} fields, got {len(cells)}")
        get = lambda name: cells[col[name]]
        rid = get("id")
        if not rid:
            raise ValueError(f"catalog row {i}: field 'id' is empty")
        if rid in seen:
            raise ValueError(f"catalog row {i}: duplicate image_id {rid!r}")
        seen.add(rid)
        legacy_mos = None if get("legacy_mos") == "" else float(get("legacy_mos"))
        scale_cell = get("legacy_scale")
        legacy_scale = None
        if scale_cell:
            lo, _, hi = scale_cell.partition(":")
            legacy_scale = (float(lo), float(hi))
        try:
            rec = ImageRecord(
                id=rid,
                source=get("source"),
                native_width=_parse_int(get("width"), i, "width"),
                native_height=_parse_int(get("height"), i, "height"),
                attributes={c[len("attr:"):]: cells[col[c]] for c in attr_cols if cells[col[c]] != ""},
                legacy_mos=legacy_mos,
                legacy_scale=legacy_scale,
                favorites=_parse_int(get("favorites"), i, "favorites"),
                views=_parse_int(get("views"), i, "views"),
                extras={c: cells[col[c]] for c in extra_cols},
            )
        except ValueError as err:
            raise ValueError(f"catalog row {i}: {err}") from None
        records.append(rec)
    return Catalog(records=records, extra_columns=extra_cols)


@dataclass
class RatingEvent:
    participant_id: str
    image_id: str
    tier: str
    batch_id: str
    repetition: int
    value: float
    submitted_at: int  # ms epoch
    viewport_trace: list[tuple[float, float, float, float, float]] = field(default_factory=list)

    def validate(self, tier_geometry: tuple[int, int] | None = None) -> None:
        if self.tier not in TIER_NAMES:
            raise ValueError(f"field 'tier': unknown tier {self.tier!r}")
        if self.repetition not in (1, 2):
            raise ValueError(f"field 'repetition': must be 1 or 2, got {self.repetition}")
        if not (SCALE_MIN <= self.value <= SCALE_MAX) or not math.isfinite(self.value):
            raise ValueError(f"field 'value': {self.value} outside [1, 100]")
        if not isinstance(self.submitted_at, int) or self.submitted_at < 0:
            raise ValueError(f"field 'submitted_at': bad timestamp {self.submitted_at!r}")
        if tier_geometry is not None:
            w, h = tier_geometry
            for t, x0, y0, x1, y1 in self.viewport_trace:
                if not (0 <= x0 <= x1 <= w and 0 <= y0 <= y1 <= h):
                    raise ValueError(
                        f"field 'viewport_trace': rectangle ({x0},{y0},{x1},{y1}) "
                        f"outside tier geometry {w}x{h}")

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "image_id": self.image_id,
            "tier": self.tier,
            "batch_id": self.batch_id,
            "repetition": self.repetition,
            "value": self.value,
            "submitted_at": self.submitted_at,
            "viewport_trace": [list(r) for r in self.viewport_trace],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RatingEvent":
        ev = cls(
            participant_id=str(d["participant_id"]),
            image_id=str(d["image_id"]),
            tier=str(d["tier"]),
            batch_id=str(d.get("batch_id", "")),
            repetition=int(d["repetition"]),
            value=float(d["value"]),
            submitted_at=int(d["submitted_at"]),
            viewport_trace=[tuple(r) for r in d.get("viewport_trace", [])],
        )
        ev.validate()
        return ev


def append_ratings(events: list[RatingEvent], path: str | Path) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for ev in events:
            f.write(json.dumps(ev.to_dict(), separators=(",", ":")) + "\n")


def load_ratings(path: str | Path) -> list[RatingEvent]:
    events = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(RatingEvent.from_dict(json.loads(line)))
            except (ValueError, KeyError) as err:
                raise ValueError(f"ratings row {i}: {err}") from None
    return events


@dataclass
class MosRow:
    image_id: str
    tier: str
    mos: float
    var: float
    n: int

    def validate(self) -> None:
        if not (SCALE_MIN <= self.mos <= SCALE_MAX):
            raise ValueError(f"mos {self.mos} outside [1, 100]")
        if self.var < 0:
            raise ValueError(f"negative variance {self.var}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        # Bhatia-Davis bound, scaled for the unbiased (n-1) estimator
        bound = (self.mos - SCALE_MIN) * (SCALE_MAX - self.mos)
        if self.n > 1:
            bound *= self.n / (self.n - 1)
        if self.var > bound + 1e-9:
            raise ValueError(f"variance {self.var} exceeds range bound {bound}")


@dataclass
class MosTable:
    rows: list[MosRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def validate(self) -> None:
        for row in self.rows:
            row.validate()

    def by_tier(self) -> dict[str, dict[str, MosRow]]:
        out: dict[str, dict[str, MosRow]] = {}
        for row in self.rows:
            out.setdefault(row.tier, {})[row.image_id] = row
        return out

    def tiers(self) -> list[str]:
        present = {row.tier for row in self.rows}
        return [t for t in TIER_NAMES if t in present]


def compute_mos(events: list[RatingEvent]) -> MosTable:
    """Aggregate rating events: average the repetitions per participant first,
    then take the mean over participants. Variance is the unbiased sample
    variance of the per-participant scores (0 when a single participant)."""
    groups: dict[tuple[str, str], dict[str, list[float]]] = {}
    for ev in events:
        key = (ev.image_id, ev.tier)
        groups.setdefault(key, {}).setdefault(ev.participant_id, []).append(ev.value)

    rows = []
    for (image_id, tier), per_participant in sorted(
            groups.items(), key=lambda kv: (kv[0][0], TIER_ORDER[kv[0][1]])):
        scores = []
        for pid, values in sorted(per_participant.items()):
            if len(values) > 2:
                raise ValueError(
                    f"{len(values)} repetitions for participant {pid!r} on "
                    f"({image_id!r}, {tier}); at most 2 allowed")
            scores.append(sum(values) / len(values))
        n = len(scores)
        mos = sum(scores) / n
        var = sum((s - mos) ** 2 for s in scores) / (n - 1) if n > 1 else 0.0
        rows.append(MosRow(image_id=image_id, tier=tier, mos=mos, var=var, n=n))
    return MosTable(rows=rows)


_MOS_HEADER = "image_id,tier,mos,var,n"


def save_mos_table(table: MosTable, path: str | Path) -> None:
    lines = [_MOS_HEADER]
    for r in table.rows:
        lines.append(",".join([_csv_escape(r.image_id), r.tier, repr(r.mos), repr(r.var), str(r.n)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mos_table(path: str | Path) -> MosTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MOS_HEADER:
        raise ValueError(f"mos table must start with header {_MOS_HEADER!r}")
    rows = []
    for i, line in enumerate(lines[1:], start=1):
        if not line:
            continue
        cells = _csv_split(line)
        if len(cells) != 5:
            raise ValueError(f"mos row {i}: expected 5 fields, got {len(cells)}")
        try:
            row = MosRow(image_id=cells[0], tier=cells[1], mos=float(cells[2]),
                         var=float(cells[3]), n=int(cells[4]))
            row.validate()
        except ValueError as err:
            raise ValueError(f"mos row {i}: {err}") from None
        rows.append(row)
    return MosTable(rows=rows)
