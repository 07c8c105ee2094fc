"""Metadata store: record types, datasets, feeds, ingestion policies, connections."""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field, fields as dc_fields, replace
from datetime import datetime
from typing import Any, Callable

from . import ddl
from .ddl import FieldDef, UdfRef


class CatalogError(ValueError):
    pass


class TypeMismatch(ValueError):
    pass


# ------------------------------------------------------------------ types

@dataclass(frozen=True)
class RecordType:
    name: str
    fields: tuple[FieldDef, ...]
    open: bool = True

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise CatalogError(f"duplicate field name in type {self.name}")
        if not any(not f.optional for f in self.fields):
            raise CatalogError(f"type {self.name} needs at least one non-optional field")

    def field(self, name: str) -> FieldDef | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_kind(value: Any, fdef: FieldDef, types: dict[str, RecordType], depth: int) -> None:
    kind = fdef.kind
    if kind == "string":
        ok = isinstance(value, str)
    elif kind == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind == "double":
        ok = _is_number(value)
    elif kind == "point":
        if isinstance(value, str):
            parts = value.split(",")
            ok = len(parts) == 2
            if ok:
                try:
                    float(parts[0]), float(parts[1])
                except ValueError:
                    ok = False
        else:
            ok = isinstance(value, (list, tuple)) and len(value) == 2 and all(map(_is_number, value))
    elif kind == "datetime":
        ok = isinstance(value, str)
        if ok:
            try:
                datetime.fromisoformat(value.replace("Z", "+00:00"))
            except ValueError:
                ok = False
    elif kind == "string-bag":
        ok = isinstance(value, list) and all(isinstance(x, str) for x in value)
    elif kind == "record":
        ok = isinstance(value, dict)
        if ok and depth == 0 and fdef.ref in types:
            conforms(value, types[fdef.ref], types, depth + 1)
    else:
        ok = False
    if not ok:
        raise TypeMismatch(f"field {fdef.name!r} is not a valid {kind}: {value!r}")


def conforms(record: dict, rtype: RecordType, types: dict[str, RecordType], depth: int = 0) -> None:
    """Structural check: required fields present with parseable kinds; extras pass."""
    for fdef in rtype.fields:
        if fdef.name not in record or record[fdef.name] is None:
            if fdef.optional:
                continue
            raise TypeMismatch(f"missing required field {fdef.name!r} of {rtype.name}")
        _check_kind(record[fdef.name], fdef, types, depth)


@dataclass(frozen=True)
class DatasetDef:
    name: str
    record_type: str
    primary_key: str
    nodegroup: tuple[str, ...]
    secondary_index: str | None = None


@dataclass(frozen=True)
class AdaptorSpec:
    name: str
    config: tuple[tuple[str, Any], ...] = ()

    @property
    def config_map(self) -> dict[str, Any]:
        return dict(self.config)


@dataclass(frozen=True)
class FeedDefinition:
    name: str
    kind: str  # primary | secondary
    adaptor: AdaptorSpec | None = None
    parent_feed: str | None = None
    udf: UdfRef | None = None

    def __post_init__(self):
        if self.kind == "primary" and (self.adaptor is None or self.parent_feed is not None):
            raise CatalogError("a primary feed needs an adaptor and no parent")
        if self.kind == "secondary" and (self.parent_feed is None or self.adaptor is not None):
            raise CatalogError("a secondary feed needs a parent and no adaptor")


# ---------------------------------------------------------------- policies

@dataclass(frozen=True)
class IngestionPolicy:
    name: str
    excess_records_spill: bool = False
    excess_records_discard: bool = True
    max_spill_bytes: int | None = None  # None means unlimited
    recover_soft_failure: bool = False
    recover_hard_failure: bool = False
    max_consecutive_skipped: int | None = None
    collect_statistics: bool = False
    base: str | None = None


POLICY_KEYS = {
    "excess.records.spill": "excess_records_spill",
    "excess.records.discard": "excess_records_discard",
    "excess.records.max.spill.bytes": "max_spill_bytes",
    "recover.soft.failure": "recover_soft_failure",
    "recover.hard.failure": "recover_hard_failure",
    "max.consecutive.skipped": "max_consecutive_skipped",
    "collect.statistics": "collect_statistics",
}

BASIC = IngestionPolicy("Basic")
MONITORED = IngestionPolicy("Monitored", collect_statistics=True)
FAULT_TOLERANT = IngestionPolicy(
    "Fault-Tolerant",
    excess_records_spill=True,
    excess_records_discard=False,
    recover_soft_failure=True,
    recover_hard_failure=True,
    collect_statistics=True,
)
BUILTIN_POLICIES = {p.name: p for p in (BASIC, MONITORED, FAULT_TOLERANT)}
POLICY_ALIASES = {"FaultTolerant": "Fault-Tolerant"}
DEFAULT_POLICY = "Monitored"


def _parse_policy_value(key: str, attr: str, text: str) -> Any:
    low = text.strip().lower()
    if attr in ("max_spill_bytes", "max_consecutive_skipped"):
        if low in ("unlimited", "none", "-1"):
            return None
        try:
            value = int(low)
        except ValueError:
            raise CatalogError(f"policy key {key!r} expects an integer or 'unlimited'") from None
        if value < 0:
            raise CatalogError(f"policy key {key!r} must be non-negative")
        return value
    if low in ("true", "false"):
        return low == "true"
    raise CatalogError(f"policy key {key!r} expects 'true' or 'false'")


def derive_policy(name: str, base: IngestionPolicy, overrides: dict[str, str]) -> IngestionPolicy:
    changes: dict[str, Any] = {}
    for key, text in overrides.items():
        attr = POLICY_KEYS.get(key)
        if attr is None:
            raise CatalogError(f"unknown policy key {key!r}")
        changes[attr] = _parse_policy_value(key, attr, text)
    return replace(base, name=name, base=base.name, **changes)


# ------------------------------------------------------------- functions

Udf = Callable[[dict], "dict | None"]
_HASHTAG = re.compile(r"#(\w[\w-]*)")


def add_hash_tags(record: dict) -> dict:
    out = dict(record)
    text = record["message-text"]
    user = record["user"]
    out["referred-topics"] = _HASHTAG.findall(text)
    out["userId"] = user["screen-name"]
    del out["user"]
    return out


def identity(record: dict) -> dict:
    return record


class FailEvery:
    """Raises on every ``n``-th record it sees; a poison function for tests."""

    def __init__(self, n: int):
        n = int(n)
        if n < 1:
            raise CatalogError("failEvery(n) needs n >= 1")
        self.n = n
        self.seen = 0

    def __call__(self, record: dict) -> dict:
        self.seen += 1
        if self.seen % self.n == 0:
            raise RuntimeError(f"failEvery({self.n}) poisoned record #{self.seen}")
        return record


class FunctionRegistry:
    """Named record functions; factories build a fresh callable per pipeline stage."""

    def __init__(self) -> None:
        self._factories: dict[str, Callable[..., Udf]] = {}

    def register(self, name: str, factory: Callable[..., Udf]) -> None:
        self._factories[name] = factory

    def register_function(self, name: str, fn: Udf) -> None:
        self._factories[name] = lambda: fn

    def __contains__(self, name: str) -> bool:
        return name in self._factories

    def names(self) -> list[str]:
        return sorted(self._factories)

    def build(self, ref: UdfRef) -> Udf:
        try:
            factory = self._factories[ref.name]
        except KeyError:
            raise CatalogError(f"unknown function {ref.name!r}") from None
        try:
            return factory(*ref.args)
        except TypeError as exc:
            raise CatalogError(f"bad arguments for {ref}: {exc}") from None


def default_functions() -> FunctionRegistry:
    reg = FunctionRegistry()
    reg.register_function("addHashTags", add_hash_tags)
    reg.register_function("identity", identity)
    reg.register("failEvery", FailEvery)
    return reg


# ------------------------------------------------------------------ catalog

@dataclass
class ConnectionEntry:
    feed: str
    dataset: str
    policy: str
    state: str = "connected"  # connected | disconnected
    reason: str | None = None


@dataclass(frozen=True)
class ConnectRequest:
    feed: str
    dataset: str
    policy: IngestionPolicy


@dataclass(frozen=True)
class DisconnectRequest:
    feed: str
    dataset: str


@dataclass(frozen=True)
class ShowRequest:
    what: str


class Catalog:
    def __init__(self, functions: FunctionRegistry | None = None) -> None:
        self.functions = functions or default_functions()
        self.types: dict[str, RecordType] = {}
        self.datasets: dict[str, DatasetDef] = {}
        self.feeds: dict[str, FeedDefinition] = {}
        self.policies: dict[str, IngestionPolicy] = dict(BUILTIN_POLICIES)
        self.connections: dict[tuple[str, str], ConnectionEntry] = {}
        self.default_nodegroup: tuple[str, ...] = ()

    # -- lookups
    def feed(self, name: str) -> FeedDefinition:
        try:
            return self.feeds[name]
        except KeyError:
            raise CatalogError(f"unknown feed {name!r}") from None

    def dataset(self, name: str) -> DatasetDef:
        try:
            return self.datasets[name]
        except KeyError:
            raise CatalogError(f"unknown dataset {name!r}") from None

    def resolve_policy(self, name: str | None = None) -> IngestionPolicy:
        """Named policy, or Monitored when no name is given."""
        if name is None:
            name = DEFAULT_POLICY
        name = POLICY_ALIASES.get(name, name)
        try:
            return self.policies[name]
        except KeyError:
            raise CatalogError(f"unknown policy {name!r}") from None

    def lineage(self, feed: str) -> list[FeedDefinition]:
        """Root primary feed first, ``feed`` last."""
        chain: list[FeedDefinition] = []
        seen: set[str] = set()
        cur: str | None = feed
        while cur is not None:
            if cur in seen:
                raise CatalogError(f"cyclic secondary-feed chain through {cur!r}")
            seen.add(cur)
            fdef = self.feed(cur)
            chain.append(fdef)
            cur = fdef.parent_feed
        chain.reverse()
        if chain[0].kind != "primary":
            raise CatalogError(f"feed {feed!r} has no primary ancestor")
        return chain

    def depth(self, feed: str) -> int:
        return len(self.lineage(feed)) - 1

    def connected(self) -> list[ConnectionEntry]:
        return [c for c in self.connections.values() if c.state == "connected"]

    def snapshot(self) -> "Catalog":
        return copy.deepcopy(self)

    # -- mutation
    def apply(self, stmt: ddl.Statement):
        """Mutate the catalog; connect/disconnect/show return an action request."""
        if isinstance(stmt, ddl.CreateType):
            self._fresh(stmt.name, self.types, "type")
            for f in stmt.fields:
                if f.kind == "record" and f.ref not in self.types:
                    raise CatalogError(f"unknown type {f.ref!r}")
            self.types[stmt.name] = RecordType(stmt.name, stmt.fields, stmt.open)
            return None
        if isinstance(stmt, ddl.CreateDataset):
            self._fresh(stmt.name, self.datasets, "dataset")
            rtype = self.types.get(stmt.type_name)
            if rtype is None:
                raise CatalogError(f"unknown type {stmt.type_name!r}")
            key = rtype.field(stmt.primary_key)
            if key is None or key.optional:
                raise CatalogError(
                    f"primary key {stmt.primary_key!r} must be a declared non-optional field")
            nodegroup = stmt.nodegroup or self.default_nodegroup
            if not nodegroup:
                raise CatalogError(f"dataset {stmt.name!r} has an empty nodegroup")
            self.datasets[stmt.name] = DatasetDef(stmt.name, stmt.type_name, stmt.primary_key,
                                                  tuple(nodegroup))
            return None
        if isinstance(stmt, ddl.CreateIndex):
            ds = self.dataset(stmt.dataset)
            if ds.secondary_index is not None:
                raise CatalogError(f"dataset {ds.name!r} already has a secondary index")
            self.datasets[ds.name] = replace(ds, secondary_index=stmt.field)
            return None
        if isinstance(stmt, ddl.CreateFeed):
            self._fresh(stmt.name, self.feeds, "feed")
            self._check_udf(stmt.udf)
            self.feeds[stmt.name] = FeedDefinition(
                stmt.name, "primary", adaptor=AdaptorSpec(stmt.adaptor, stmt.config), udf=stmt.udf)
            return None
        if isinstance(stmt, ddl.CreateSecondaryFeed):
            if stmt.parent == stmt.name:
                raise CatalogError(f"cyclic secondary-feed chain through {stmt.name!r}")
            self._fresh(stmt.name, self.feeds, "feed")
            self.feed(stmt.parent)
            self._check_udf(stmt.udf)
            fdef = FeedDefinition(stmt.name, "secondary", parent_feed=stmt.parent, udf=stmt.udf)
            self.feeds[stmt.name] = fdef
            try:
                self.lineage(stmt.name)
            except CatalogError:
                del self.feeds[stmt.name]
                raise
            return None
        if isinstance(stmt, ddl.CreatePolicy):
            if stmt.name in self.policies or stmt.name in POLICY_ALIASES:
                raise CatalogError(f"duplicate policy {stmt.name!r}")
            base = self.resolve_policy(stmt.base)
            self.policies[stmt.name] = derive_policy(stmt.name, base, dict(stmt.overrides))
            return None
        if isinstance(stmt, ddl.Connect):
            self.feed(stmt.feed)
            self.dataset(stmt.dataset)
            policy = self.resolve_policy(stmt.policy)
            entry = self.connections.get((stmt.feed, stmt.dataset))
            if entry is not None and entry.state == "connected":
                raise CatalogError(f"feed {stmt.feed!r} already connected to {stmt.dataset!r}")
            self.connections[(stmt.feed, stmt.dataset)] = ConnectionEntry(
                stmt.feed, stmt.dataset, policy.name)
            return ConnectRequest(stmt.feed, stmt.dataset, policy)
        if isinstance(stmt, ddl.Disconnect):
            self.feed(stmt.feed)
            self.dataset(stmt.dataset)
            entry = self.connections.get((stmt.feed, stmt.dataset))
            if entry is None or entry.state != "connected":
                raise CatalogError(f"feed {stmt.feed!r} is not connected to {stmt.dataset!r}")
            entry.state = "disconnected"
            entry.reason = "disconnect"
            return DisconnectRequest(stmt.feed, stmt.dataset)
        if isinstance(stmt, ddl.Show):
            return ShowRequest(stmt.what)
        raise CatalogError(f"unsupported statement {type(stmt).__name__}")

    def mark_disconnected(self, feed: str, dataset: str, reason: str) -> None:
        entry = self.connections.get((feed, dataset))
        if entry is not None:
            entry.state = "disconnected"
            entry.reason = reason

    def _fresh(self, name: str, table: dict, what: str) -> None:
        if name in table:
            raise CatalogError(f"duplicate {what} name {name!r}")

    def _check_udf(self, ref: UdfRef | None) -> None:
        if ref is not None and ref.name not in self.functions:
            raise CatalogError(f"function {ref.name!r} is not in the function registry")

    # -- rendering
    def dump(self) -> str:
        lines = ["types:"]
        for t in self.types.values():
            parts = []
            for f in t.fields:
                kind = f.ref if f.kind == "record" else f.kind
                parts.append(f"{f.name}: {kind}{'?' if f.optional else ''}")
            lines.append(f"  {t.name} (open) {{ {', '.join(parts)} }}")
        lines.append("datasets:")
        for d in self.datasets.values():
            idx = f" index={d.secondary_index}" if d.secondary_index else ""
            lines.append(f"  {d.name}({d.record_type}) key={d.primary_key} "
                         f"nodegroup={','.join(d.nodegroup)}{idx}")
        lines.append("feeds:")
        for f in self.feeds.values():
            udf = f" apply {f.udf}" if f.udf else ""
            if f.kind == "primary":
                cfg = ", ".join(f'"{k}"="{v}"' for k, v in f.adaptor.config)
                lines.append(f"  {f.name} primary using {f.adaptor.name} ({cfg}){udf}")
            else:
                lines.append(f"  {f.name} secondary from {f.parent_feed}{udf}")
        lines.append("policies:")
        for p in self.policies.values():
            vals = []
            for key, attr in POLICY_KEYS.items():
                v = getattr(p, attr)
                if v is None:
                    v = "unlimited"
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                vals.append(f"{key}={v}")
            origin = f" from {p.base}" if p.base else " (built-in)"
            lines.append(f"  {p.name}{origin}: {' '.join(vals)}")
        lines.append("connections:")
        for c in self.connections.values():
            extra = f" ({c.reason})" if c.reason and c.state != "connected" else ""
            lines.append(f"  {c.feed} -> {c.dataset} policy={c.policy} {c.state}{extra}")
        return "\n".join(lines)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Catalog):
            return NotImplemented
        return self.dump() == other.dump()
