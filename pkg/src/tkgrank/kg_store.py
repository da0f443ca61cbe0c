"""Temporal knowledge graph store.

Relations carry a day-resolution validity interval ``[valid_from, valid_to)``
and come in three shapes:

* static facts ("triples"): the sentinel interval 1970-01-01 .. open end,
* dated facts ("quadruples"): exactly one day of validity,
* interval facts ("quintuples"): anything else.

The shape is determined solely by the interval, never by how the record was
written. Graphs load from the upstream JSON export (node and relation files),
round-trip through a line-delimited archive, can be snapshotted at a date,
filtered by relation type, and expanded into one event per calendar month of
validity for point-process training.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator

from .errors import IntegrityError, ParseError

STATIC_FROM = date(1970, 1, 1)
OPEN_END = date(9999, 12, 31)

TRIPLE = "triple"
QUADRUPLE = "quadruple"
QUINTUPLE = "quintuple"

ARCHIVE_MAGIC = "#tkg v1"


@dataclass(frozen=True)
class Entity:
    """A graph node. ``labels`` is kept sorted so entities hash stably."""

    id: int
    labels: tuple[str, ...]
    name: str = ""
    element_id: str = ""
    external_id: int | str | None = None

    def __post_init__(self) -> None:
        if not self.labels:
            raise IntegrityError(f"entity {self.id}: empty label list")
        object.__setattr__(self, "labels", tuple(sorted(self.labels)))

    @property
    def entity_type(self) -> str:
        # Canonical single type: lexicographically smallest label.
        return self.labels[0]


@dataclass(frozen=True)
class RelationInstance:
    """One edge with a half-open validity interval."""

    head: int
    tail: int
    relation_type: int
    valid_from: date
    valid_to: date

    def __post_init__(self) -> None:
        if self.valid_to < self.valid_from:
            raise IntegrityError(
                f"relation ({self.head},{self.relation_type},{self.tail}): "
                f"valid_to {self.valid_to} precedes valid_from {self.valid_from}"
            )

    @property
    def kind(self) -> str:
        if self.valid_from == STATIC_FROM and self.valid_to == OPEN_END:
            return TRIPLE
        if self.valid_to == self.valid_from + timedelta(days=1):
            return QUADRUPLE
        return QUINTUPLE

    def active_at(self, at: date) -> bool:
        return self.valid_from <= at < self.valid_to


@dataclass(frozen=True)
class EventTuple:
    """One month-resolution event produced by :func:`expand_monthly`."""

    head: int
    relation_type: int
    tail: int
    timestamp: date
    head_type: str
    tail_type: str

    @property
    def month_index(self) -> int:
        return month_index(self.timestamp)


def month_index(d: date) -> int:
    """Months since January year 0; the point-process time coordinate."""
    return d.year * 12 + (d.month - 1)


def month_start(idx: int) -> date:
    return date(idx // 12, idx % 12 + 1, 1)


@dataclass(frozen=True)
class TemporalKG:
    """Immutable graph: entities, typed dated relations, type name table."""

    entities: dict[int, Entity]
    relations: tuple[RelationInstance, ...]
    relation_types: dict[int, str]
    # Optional per-type upstream property ids, kept only so JSON serialization
    # can reproduce its source records.
    relation_type_external: dict[int, int | str | None] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for rel in self.relations:
            if rel.head not in self.entities or rel.tail not in self.entities:
                raise IntegrityError(
                    f"relation ({rel.head},{rel.relation_type},{rel.tail}) "
                    "references an unknown entity"
                )
            if rel.relation_type not in self.relation_types:
                raise IntegrityError(
                    f"relation type id {rel.relation_type} has no name entry"
                )

    @property
    def relation_type_ids(self) -> dict[str, int]:
        return {name: rid for rid, name in self.relation_types.items()}

    def entity_type(self, entity_id: int) -> str:
        return self.entities[entity_id].entity_type

    def stats(self) -> dict:
        kinds = {TRIPLE: 0, QUADRUPLE: 0, QUINTUPLE: 0}
        for rel in self.relations:
            kinds[rel.kind] += 1
        entity_types: dict[str, int] = {}
        for e in self.entities.values():
            entity_types[e.entity_type] = entity_types.get(e.entity_type, 0) + 1
        relation_types: dict[str, int] = {name: 0 for name in self.relation_types.values()}
        for rel in self.relations:
            relation_types[self.relation_types[rel.relation_type]] += 1
        return {
            "entities": len(self.entities),
            "relations": len(self.relations),
            "triples": kinds[TRIPLE],
            "quadruples": kinds[QUADRUPLE],
            "quintuples": kinds[QUINTUPLE],
            "entity_types": entity_types,
            "relation_types": relation_types,
        }


@dataclass(frozen=True)
class Snapshot:
    """Relations visible at one date: static facts plus active dated facts."""

    at: date
    static: tuple[RelationInstance, ...]
    temporal: tuple[RelationInstance, ...]

    @property
    def relations(self) -> tuple[RelationInstance, ...]:
        return self.static + self.temporal


# ---------------------------------------------------------------------------
# JSON loading (upstream export format)
# ---------------------------------------------------------------------------


def _iter_json_records(path: str | Path, wrapper_key: str) -> Iterator[tuple[int, dict]]:
    """Yield (index, record) from a JSON array or JSON-lines file.

    Records may be bare objects or wrapped one level under ``wrapper_key``
    (the export wraps nodes under "n" and relations under "r").
    """
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        return
    if text.startswith("["):
        try:
            records = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON array: {exc}") from None
        if not isinstance(records, list):
            raise ParseError(f"{path}: expected a JSON array of records")
        candidates = list(enumerate(records))
    else:
        candidates = []
        for i, line in enumerate(s for s in text.splitlines() if s.strip()):
            try:
                candidates.append((i, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: record {i}: invalid JSON: {exc}") from None
    for i, rec in candidates:
        if not isinstance(rec, dict):
            raise ParseError(f"{path}: record {i}: not a JSON object")
        if wrapper_key in rec and isinstance(rec[wrapper_key], dict) and len(rec) == 1:
            rec = rec[wrapper_key]
        yield i, rec


def _parse_timestamp(value, where: str) -> date:
    """Accept ISO dates/datetimes or epoch seconds; reduce to a date."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return datetime.fromtimestamp(float(value), tz=timezone.utc).date()
    if isinstance(value, str):
        try:
            return datetime.fromisoformat(value.replace("Z", "+00:00")).date()
        except ValueError:
            pass
        try:
            return date.fromisoformat(value[:10])
        except ValueError:
            raise ParseError(f"{where}: unparseable timestamp {value!r}") from None
    raise ParseError(f"{where}: unparseable timestamp {value!r}")


def load_nodes_json(path: str | Path) -> dict[int, Entity]:
    """Load entities from the node export; duplicate identities are rejected."""
    entities: dict[int, Entity] = {}
    for i, rec in _iter_json_records(path, "n"):
        where = f"{path}: record {i}"
        if "identity" not in rec:
            raise ParseError(f"{where}: missing 'identity'")
        if not isinstance(rec["identity"], int) or isinstance(rec["identity"], bool):
            raise ParseError(f"{where}: 'identity' must be an integer")
        labels = rec.get("labels")
        if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
            raise ParseError(f"{where}: 'labels' must be a list of strings")
        if not labels:
            raise IntegrityError(f"{where}: empty 'labels'")
        props = rec.get("properties", {})
        if not isinstance(props, dict):
            raise ParseError(f"{where}: 'properties' must be an object")
        ent = Entity(
            id=rec["identity"],
            labels=tuple(labels),
            name=str(props.get("name", "")),
            element_id=str(rec.get("elementId", "")),
            external_id=props.get("id"),
        )
        if ent.id in entities:
            raise IntegrityError(f"{where}: duplicate identity {ent.id}")
        entities[ent.id] = ent
    return entities


def resolve_interval(props: dict, where: str) -> tuple[date, date]:
    """Apply the timestamp defaulting policy to a relation's properties.

    Expiry present -> [timestamp, expiry); timestamp only -> one day of
    validity; neither -> the static sentinel interval.
    """
    ts = props.get("timestamp")
    expiry = props.get("expiry", props.get("expiry_timestamp"))
    if ts is None and expiry is None:
        return STATIC_FROM, OPEN_END
    if ts is None:
        raise ParseError(f"{where}: expiry without timestamp")
    valid_from = _parse_timestamp(ts, where)
    if expiry is None:
        return valid_from, valid_from + timedelta(days=1)
    valid_to = _parse_timestamp(expiry, where)
    if valid_to < valid_from:
        raise IntegrityError(f"{where}: expiry {valid_to} precedes timestamp {valid_from}")
    return valid_from, valid_to


def load_relations_json(
    path: str | Path, entities: dict[int, Entity]
) -> tuple[tuple[RelationInstance, ...], dict[int, str], dict[int, int | str | None]]:
    """Load relations from the relation export.

    Relation type ids are assigned by sorted type name so they do not depend
    on record order. Output is sorted ascending by valid_from (stable).
    Returns (relations, type names by id, upstream property id by type id).
    """
    parsed: list[tuple[str, int, int, date, date, int | str | None]] = []
    for i, rec in _iter_json_records(path, "r"):
        where = f"{path}: record {i}"
        for key in ("start", "end", "type"):
            if key not in rec:
                raise ParseError(f"{where}: missing '{key}'")
        if not isinstance(rec["type"], str) or not rec["type"]:
            raise ParseError(f"{where}: 'type' must be a non-empty string")
        props = rec.get("properties", {})
        if not isinstance(props, dict):
            raise ParseError(f"{where}: 'properties' must be an object")
        head, tail = rec["start"], rec["end"]
        if not isinstance(head, int) or not isinstance(tail, int):
            raise ParseError(f"{where}: 'start'/'end' must be integers")
        if head not in entities:
            raise IntegrityError(f"{where}: start node {head} not in entity set")
        if tail not in entities:
            raise IntegrityError(f"{where}: end node {tail} not in entity set")
        valid_from, valid_to = resolve_interval(props, where)
        parsed.append((rec["type"], head, tail, valid_from, valid_to, props.get("id")))

    type_names = sorted({p[0] for p in parsed})
    type_ids = {name: i for i, name in enumerate(type_names)}
    external: dict[int, int | str | None] = {type_ids[name]: None for name in type_names}
    relations = []
    for name, head, tail, valid_from, valid_to, ext in parsed:
        rid = type_ids[name]
        if ext is not None and external[rid] is None:
            external[rid] = ext
        relations.append(
            RelationInstance(
                head=head, tail=tail, relation_type=rid,
                valid_from=valid_from, valid_to=valid_to,
            )
        )
    relations.sort(key=lambda r: r.valid_from)
    return tuple(relations), {i: n for n, i in type_ids.items()}, external


def build_kg(nodes_path: str | Path, relations_path: str | Path) -> TemporalKG:
    entities = load_nodes_json(nodes_path)
    relations, type_names, external = load_relations_json(relations_path, entities)
    return TemporalKG(
        entities=entities,
        relations=relations,
        relation_types=type_names,
        relation_type_external=external,
    )


# ---------------------------------------------------------------------------
# JSON serialization (reproduces the upstream export shape)
# ---------------------------------------------------------------------------


def save_nodes_json(entities: dict[int, Entity], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ent in sorted(entities.values(), key=lambda e: e.id):
            props: dict = {"name": ent.name}
            if ent.external_id is not None:
                props["id"] = ent.external_id
            rec = {
                "n": {
                    "identity": ent.id,
                    "labels": list(ent.labels),
                    "properties": props,
                    "elementId": ent.element_id or str(ent.id),
                }
            }
            fh.write(json.dumps(rec, separators=(", ", ": ")) + "\n")


def save_relations_json(kg: TemporalKG, path: str | Path) -> None:
    """Write relations in export shape; interval encoding inverts the
    timestamp defaulting policy so a reload reproduces the same intervals."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, rel in enumerate(kg.relations):
            props: dict = {}
            ext = kg.relation_type_external.get(rel.relation_type)
            if ext is not None:
                props["id"] = ext
            if rel.kind == QUADRUPLE:
                props["timestamp"] = rel.valid_from.isoformat()
            elif rel.kind == QUINTUPLE:
                props["timestamp"] = rel.valid_from.isoformat()
                props["expiry"] = rel.valid_to.isoformat()
            head_el = kg.entities[rel.head].element_id or str(rel.head)
            tail_el = kg.entities[rel.tail].element_id or str(rel.tail)
            rec = {
                "r": {
                    "identity": i,
                    "start": rel.head,
                    "end": rel.tail,
                    "type": kg.relation_types[rel.relation_type],
                    "properties": props,
                    "elementId": str(i),
                    "startNodeElementId": head_el,
                    "endNodeElementId": tail_el,
                }
            }
            fh.write(json.dumps(rec, separators=(", ", ": ")) + "\n")


# ---------------------------------------------------------------------------
# Portable archive: line-delimited, diffable, deterministic
# ---------------------------------------------------------------------------


def save_archive(kg: TemporalKG, path: str | Path) -> None:
    """Write the graph as sorted (head, tail, relation_id, valid_from,
    valid_to) rows behind '#' metadata lines for entities and type names."""
    buf = io.StringIO()
    buf.write(ARCHIVE_MAGIC + "\n")
    for rid in sorted(kg.relation_types):
        ext = kg.relation_type_external.get(rid)
        ext_json = json.dumps(ext) if ext is not None else ""
        buf.write(f"#T\t{rid}\t{kg.relation_types[rid]}\t{ext_json}\n")
    for ent in sorted(kg.entities.values(), key=lambda e: e.id):
        rec = {"id": ent.id, "labels": list(ent.labels), "name": ent.name}
        if ent.element_id:
            rec["element_id"] = ent.element_id
        if ent.external_id is not None:
            rec["external_id"] = ent.external_id
        buf.write("#E\t" + json.dumps(rec, separators=(",", ":")) + "\n")
    rows = sorted(
        kg.relations,
        key=lambda r: (r.valid_from, r.valid_to, r.head, r.tail, r.relation_type),
    )
    for r in rows:
        buf.write(
            f"{r.head}\t{r.tail}\t{r.relation_type}\t"
            f"{r.valid_from.isoformat()}\t{r.valid_to.isoformat()}\n"
        )
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_archive(path: str | Path) -> TemporalKG:
    entities: dict[int, Entity] = {}
    relation_types: dict[int, str] = {}
    external: dict[int, int | str | None] = {}
    relations: list[RelationInstance] = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ARCHIVE_MAGIC:
        raise ParseError(f"{path}: not a graph archive (missing '{ARCHIVE_MAGIC}')")
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path}:{n}"
        if line.startswith("#T\t"):
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{where}: malformed type line")
            rid = int(parts[1])
            relation_types[rid] = parts[2]
            external[rid] = json.loads(parts[3]) if parts[3] else None
        elif line.startswith("#E\t"):
            rec = json.loads(line.split("\t", 1)[1])
            ent = Entity(
                id=rec["id"],
                labels=tuple(rec["labels"]),
                name=rec.get("name", ""),
                element_id=rec.get("element_id", ""),
                external_id=rec.get("external_id"),
            )
            entities[ent.id] = ent
        elif line.startswith("#"):
            raise ParseError(f"{where}: unknown metadata line {line.split(chr(9))[0]!r}")
        else:
            parts = line.split("\t")
            if len(parts) != 5:
                raise ParseError(f"{where}: expected 5 tab-separated fields")
            relations.append(
                RelationInstance(
                    head=int(parts[0]),
                    tail=int(parts[1]),
                    relation_type=int(parts[2]),
                    valid_from=date.fromisoformat(parts[3]),
                    valid_to=date.fromisoformat(parts[4]),
                )
            )
    return TemporalKG(
        entities=entities,
        relations=tuple(relations),
        relation_types=relation_types,
        relation_type_external=external,
    )


# ---------------------------------------------------------------------------
# Queries and transforms
# ---------------------------------------------------------------------------


def snapshot(kg: TemporalKG, at: date) -> Snapshot:
    """Static facts plus dated facts whose interval covers ``at``."""
    static = tuple(r for r in kg.relations if r.kind == TRIPLE)
    temporal = tuple(
        r for r in kg.relations if r.kind != TRIPLE and r.active_at(at)
    )
    return Snapshot(at=at, static=static, temporal=temporal)


def filter_relations(kg: TemporalKG, removed_types: Iterable[str]) -> TemporalKG:
    """Drop every relation instance of the named types.

    Unknown names are rejected up front; entity set and the type name table
    are left untouched so type ids stay stable across filtering.
    """
    removed = set(removed_types)
    unknown = removed - set(kg.relation_type_ids)
    if unknown:
        raise IntegrityError(
            f"unknown relation type(s): {', '.join(sorted(unknown))}"
        )
    removed_ids = {kg.relation_type_ids[name] for name in removed}
    kept = tuple(r for r in kg.relations if r.relation_type not in removed_ids)
    return replace(kg, relations=kept)


def expand_monthly(kg: TemporalKG) -> list[EventTuple]:
    """One event per (dated relation, calendar month of validity).

    The event timestamp is the first in-interval day of the month, so it
    always lies inside the source interval. Static facts yield nothing.
    """
    out: list[EventTuple] = []
    for rel in kg.relations:
        if rel.kind == TRIPLE:
            continue
        last_day = rel.valid_to - timedelta(days=1)
        if last_day < rel.valid_from:
            continue
        for m in range(month_index(rel.valid_from), month_index(last_day) + 1):
            ts = max(month_start(m), rel.valid_from)
            out.append(
                EventTuple(
                    head=rel.head,
                    relation_type=rel.relation_type,
                    tail=rel.tail,
                    timestamp=ts,
                    head_type=kg.entity_type(rel.head),
                    tail_type=kg.entity_type(rel.tail),
                )
            )
    out.sort(key=lambda e: (e.timestamp, e.head, e.relation_type, e.tail))
    return out
