"""Hash-partitioned primary-key datasets with an optional secondary index.

Each dataset is split into one partition per nodegroup member.  Partitions
are plain in-memory maps; there is no LSM tree and no write-ahead log.
"""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator


class PartitionRoutingError(AssertionError):
    """A key reached a partition it does not hash to (engine bug)."""


def hash_partition(key: Any, n_partitions: int) -> int:
    """Stable partition index for ``key`` in ``[0, n_partitions)``.

    Uses CRC-32 over the canonical JSON encoding of the key so the mapping
    is identical across processes (``hash()`` on ``str`` is salted).
    """
    if n_partitions <= 0:
        raise ValueError("n_partitions must be positive")
    if n_partitions == 1:
        return 0
    encoded = json.dumps(key, sort_keys=True, separators=(",", ":")).encode()
    return zlib.crc32(encoded) % n_partitions


@dataclass
class DatasetPartition:
    dataset: str
    index: int
    node: str
    n_partitions: int
    key_field: str
    index_field: str | None = None
    primary: dict[Any, dict] = field(default_factory=dict)
    secondary: dict[Any, set] = field(default_factory=dict)
    skipped_secondary: int = 0

    def insert(self, record: dict) -> None:
        key = record[self.key_field]
        if hash_partition(key, self.n_partitions) != self.index:
            raise PartitionRoutingError(
                f"key {key!r} does not belong to {self.dataset}[{self.index}]"
            )
        old = self.primary.get(key)
        if old is not None and self.index_field is not None:
            self._unlink(old, key)
        self.primary[key] = record
        if self.index_field is None:
            return
        if self.index_field in record and record[self.index_field] is not None:
            value = _index_value(record[self.index_field])
            self.secondary.setdefault(value, set()).add(key)
        else:
            self.skipped_secondary += 1

    def _unlink(self, old: dict, key: Any) -> None:
        if self.index_field not in old or old[self.index_field] is None:
            return
        value = _index_value(old[self.index_field])
        keys = self.secondary.get(value)
        if keys is None:
            return
        keys.discard(key)
        if not keys:
            del self.secondary[value]

    def secondary_size(self) -> int:
        return sum(len(keys) for keys in self.secondary.values())

    def rebuild_secondary(self) -> dict[Any, set]:
        """Recompute the secondary map from a primary scan."""
        rebuilt: dict[Any, set] = {}
        if self.index_field is None:
            return rebuilt
        for key, record in self.primary.items():
            if self.index_field in record and record[self.index_field] is not None:
                rebuilt.setdefault(_index_value(record[self.index_field]), set()).add(key)
        return rebuilt

    def __len__(self) -> int:
        return len(self.primary)


def _index_value(value: Any) -> Any:
    # lists/dicts are not hashable; index them by canonical JSON
    if isinstance(value, (list, dict)):
        return json.dumps(value, sort_keys=True)
    return value


class Storage:
    """All datasets of one engine, keyed by name."""

    def __init__(self) -> None:
        self.datasets: dict[str, list[DatasetPartition]] = {}

    def create(self, name: str, key_field: str, nodegroup: list[str],
               index_field: str | None = None) -> list[DatasetPartition]:
        if name in self.datasets:
            return self.datasets[name]
        n = len(nodegroup)
        parts = [DatasetPartition(name, i, node, n, key_field, index_field)
                 for i, node in enumerate(nodegroup)]
        self.datasets[name] = parts
        return parts

    def set_index(self, name: str, index_field: str) -> None:
        for part in self.partitions(name):
            part.index_field = index_field
            part.secondary = part.rebuild_secondary()

    def partitions(self, name: str) -> list[DatasetPartition]:
        try:
            return self.datasets[name]
        except KeyError:
            raise KeyError(f"unknown dataset {name!r}") from None

    def insert(self, name: str, record: dict) -> DatasetPartition:
        parts = self.partitions(name)
        part = parts[hash_partition(record[parts[0].key_field], len(parts))]
        part.insert(record)
        return part

    def count(self, name: str) -> int:
        return sum(len(p) for p in self.partitions(name))

    def scan(self, name: str, predicate: Callable[[dict], bool] | None = None) -> Iterator[dict]:
        for part in self.partitions(name):
            for record in part.primary.values():
                if predicate is None or predicate(record):
                    yield record

    def lookup(self, name: str, value: Any) -> list[dict]:
        """Records whose indexed field equals ``value``, via the secondary index."""
        out = []
        for part in self.partitions(name):
            if part.index_field is None:
                raise KeyError(f"dataset {name!r} has no secondary index")
            for key in sorted(part.secondary.get(_index_value(value), ()), key=str):
                out.append(part.primary[key])
        return out

    def keys(self, name: str) -> set:
        return {k for p in self.partitions(name) for k in p.primary}

    def snapshot(self, root: str) -> list[str]:
        """Dump every partition as ``<root>/<dataset>/<partition>.ndjson``."""
        written = []
        for name, parts in sorted(self.datasets.items()):
            os.makedirs(os.path.join(root, name), exist_ok=True)
            for part in parts:
                path = os.path.join(root, name, f"{part.index}.ndjson")
                with open(path, "w", encoding="utf-8") as fh:
                    for key in sorted(part.primary, key=str):
                        fh.write(json.dumps(part.primary[key], sort_keys=True) + "\n")
                written.append(path)
        return written
