"""Row types for the portfolio and simulation tables, plus the combined ELT.

Large tables (the year event table and the per-ELT loss tables) are held
column-wise in numpy arrays; the record dataclasses are the row view used by
loaders, validators and the sequential oracle.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np


class DataError(Exception):
    """Base class for malformed or inconsistent input data."""


class MalformedInputError(DataError):
    pass


def _positive_int(name, value):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise MalformedInputError(f"{name} must be a positive integer, got {value!r}")


def _unit_interval(name, value):
    if not (0.0 <= value < 1.0):
        raise MalformedInputError(f"{name} must lie in [0, 1), got {value!r}")


def _nonneg(name, value):
    if not (math.isfinite(value) and value >= 0.0):
        raise MalformedInputError(f"{name} must be finite and >= 0, got {value!r}")


@dataclass(frozen=True)
class YetRecord:
    trial_id: int
    event_id: int
    time_index: int
    z_pe: float

    def __post_init__(self):
        _positive_int("trial_id", self.trial_id)
        _positive_int("event_id", self.event_id)
        _positive_int("time_index", self.time_index)
        _unit_interval("z_pe", self.z_pe)


@dataclass(frozen=True)
class LayerTerms:
    occ_ret: float
    occ_lim: float
    agg_ret: float
    agg_lim: float
    share: float = 1.0

    def __post_init__(self):
        for name in ("occ_ret", "occ_lim", "agg_ret", "agg_lim"):
            v = getattr(self, name)
            if not (v >= 0.0):
                raise MalformedInputError(f"{name} must be >= 0, got {v!r}")
        if not (0.0 < self.share <= 1.0):
            raise MalformedInputError(f"share must lie in (0, 1], got {self.share!r}")


@dataclass(frozen=True)
class LayerRecord:
    layer_id: int
    program_id: int
    cob: str
    lob: str
    tob: str
    elt_ids: tuple[int, ...]
    terms: LayerTerms

    def __post_init__(self):
        _positive_int("layer_id", self.layer_id)
        _positive_int("program_id", self.program_id)
        object.__setattr__(self, "elt_ids", tuple(int(e) for e in self.elt_ids))


@dataclass(frozen=True)
class EltMeta:
    elt_id: int
    region: str
    peril: str


@dataclass(frozen=True)
class EeltEntry:
    event_id: int
    z_e: float
    mean_loss: float
    sigma_i: float
    sigma_c: float
    max_loss: float

    def __post_init__(self):
        _positive_int("event_id", self.event_id)
        _unit_interval("z_e", self.z_e)
        for name in ("mean_loss", "sigma_i", "sigma_c", "max_loss"):
            _nonneg(name, getattr(self, name))
        if self.mean_loss > self.max_loss:
            raise MalformedInputError(
                f"event {self.event_id}: mean_loss {self.mean_loss!r} exceeds max_loss {self.max_loss!r}"
            )


@dataclass(frozen=True)
class EventCatalogRecord:
    event_id: int
    region: str
    peril: str


@dataclass(frozen=True)
class YltEntry:
    trial_id: int
    event_id: int
    time_index: int
    loss: float


@dataclass(frozen=True, order=True)
class GroupKey:
    """Composite grouping key; unused components are ``None``."""

    region: str | None = None
    peril: str | None = None
    period_kind: str | None = None
    period: int | None = None

    @property
    def label(self) -> str:
        parts = []
        if self.region is not None:
            parts.append(f"region={self.region}")
        if self.peril is not None:
            parts.append(f"peril={self.peril}")
        if self.period is not None:
            parts.append(f"{self.period_kind}={self.period}")
        return ";".join(parts) if parts else "TOTAL"

    def sort_key(self):
        return (self.region or "", self.peril or "", self.period_kind or "", self.period or 0)


TOTAL = GroupKey()


@dataclass(frozen=True)
class GroupedLoss:
    group_key: GroupKey
    trial_id: int
    loss: float


# --------------------------------------------------------------------------
# columnar tables
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class YetTable:
    """Year event table, stored by trial with file order kept inside a trial."""

    trial_id: np.ndarray
    event_id: np.ndarray
    time_index: np.ndarray
    z_pe: np.ndarray
    trial_ids: np.ndarray = field(init=False)
    trial_starts: np.ndarray = field(init=False)

    def __post_init__(self):
        cols = {
            "trial_id": np.ascontiguousarray(self.trial_id, dtype=np.int64),
            "event_id": np.ascontiguousarray(self.event_id, dtype=np.int64),
            "time_index": np.ascontiguousarray(self.time_index, dtype=np.int64),
            "z_pe": np.ascontiguousarray(self.z_pe, dtype=np.float64),
        }
        n = len(cols["trial_id"])
        if any(len(c) != n for c in cols.values()):
            raise MalformedInputError("YET columns differ in length")
        order = np.argsort(cols["trial_id"], kind="stable")
        if n and np.any(order != np.arange(n)):
            cols = {k: v[order] for k, v in cols.items()}
        for k, v in cols.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)
        tid = cols["trial_id"]
        if n:
            for name in ("trial_id", "event_id", "time_index"):
                if cols[name].min() < 1:
                    raise MalformedInputError(f"YET {name} must be positive")
            z = cols["z_pe"]
            if not (np.all(z >= 0.0) and np.all(z < 1.0)):
                raise MalformedInputError("YET z_pe must lie in [0, 1)")
        boundary = np.flatnonzero(np.diff(tid)) + 1 if n else np.empty(0, np.int64)
        starts = np.concatenate(([0], boundary, [n])).astype(np.int64) if n else np.zeros(1, np.int64)
        ti = cols["time_index"]
        same_trial = tid[1:] == tid[:-1]
        if np.any(same_trial & (ti[1:] <= ti[:-1])):
            bad = int(tid[1:][same_trial & (ti[1:] <= ti[:-1])][0])
            raise MalformedInputError(f"trial {bad}: time_index not strictly increasing")
        trial_ids = tid[starts[:-1]] if n else np.empty(0, np.int64)
        trial_ids.setflags(write=False)
        starts.setflags(write=False)
        object.__setattr__(self, "trial_ids", trial_ids)
        object.__setattr__(self, "trial_starts", starts)

    @classmethod
    def from_records(cls, records: Iterable[YetRecord]) -> YetTable:
        rows = list(records)
        return cls(
            np.array([r.trial_id for r in rows], dtype=np.int64),
            np.array([r.event_id for r in rows], dtype=np.int64),
            np.array([r.time_index for r in rows], dtype=np.int64),
            np.array([r.z_pe for r in rows], dtype=np.float64),
        )

    @property
    def num_trials(self) -> int:
        return len(self.trial_ids)

    def __len__(self):
        return len(self.trial_id)

    def __iter__(self) -> Iterator[YetRecord]:
        cols = zip(self.trial_id.tolist(), self.event_id.tolist(), self.time_index.tolist(), self.z_pe.tolist())
        for t, e, i, z in cols:
            yield YetRecord(t, e, i, z)

    def trial(self, k: int) -> list[YetRecord]:
        """Rows of the ``k``-th trial (position, not trial id)."""
        lo, hi = self.trial_starts[k], self.trial_starts[k + 1]
        return [
            YetRecord(int(t), int(e), int(i), float(z))
            for t, e, i, z in zip(
                self.trial_id[lo:hi], self.event_id[lo:hi], self.time_index[lo:hi], self.z_pe[lo:hi]
            )
        ]


EELT_COLUMNS = ("event_id", "z_e", "mean_loss", "sigma_i", "sigma_c", "max_loss")


@dataclass(frozen=True, eq=False)
class EeltTable:
    event_id: np.ndarray
    z_e: np.ndarray
    mean_loss: np.ndarray
    sigma_i: np.ndarray
    sigma_c: np.ndarray
    max_loss: np.ndarray

    def __post_init__(self):
        for name in EELT_COLUMNS:
            dtype = np.int64 if name == "event_id" else np.float64
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_entries(cls, entries: Iterable[EeltEntry]) -> EeltTable:
        rows = list(entries)
        return cls(*(np.array([getattr(r, c) for r in rows]) for c in EELT_COLUMNS))

    def __len__(self):
        return len(self.event_id)

    def entries(self) -> list[EeltEntry]:
        cols = [getattr(self, c).tolist() for c in EELT_COLUMNS]
        return [EeltEntry(*row) for row in zip(*cols)]


@dataclass(frozen=True, eq=False)
class Dataset:
    yet: YetTable
    layers: tuple[LayerRecord, ...]
    pool: tuple[EltMeta, ...]
    eelts: Mapping[int, EeltTable]
    catalogue: tuple[EventCatalogRecord, ...]
    manifest: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(self.layers, key=lambda r: r.layer_id)))
        object.__setattr__(self, "pool", tuple(sorted(self.pool, key=lambda r: r.elt_id)))
        object.__setattr__(self, "catalogue", tuple(sorted(self.catalogue, key=lambda r: r.event_id)))
        object.__setattr__(self, "eelts", dict(sorted(self.eelts.items())))

    def layer_map(self) -> dict[int, LayerRecord]:
        return {layer.layer_id: layer for layer in self.layers}


# --------------------------------------------------------------------------
# combined ELT
# --------------------------------------------------------------------------


class CombinedElt(Mapping):
    """Event-indexed union of several ELTs.

    One lookup of an event returns every ``(elt_id, EeltEntry)`` covering it,
    sorted by ``elt_id``.  Internally a CSR layout: ``offsets[k]:offsets[k+1]``
    indexes the entries of ``event_ids[k]``.
    """

    def __init__(self, event_ids, offsets, elt_ids, z_e, mean_loss, sigma_i, sigma_c, max_loss):
        self.event_ids = event_ids
        self.offsets = offsets
        self.elt_ids = elt_ids
        self.z_e = z_e
        self.mean_loss = mean_loss
        self.sigma_i = sigma_i
        self.sigma_c = sigma_c
        self.max_loss = max_loss
        for arr in (event_ids, offsets, elt_ids, z_e, mean_loss, sigma_i, sigma_c, max_loss):
            arr.setflags(write=False)

    def position(self, event_id) -> int:
        k = int(np.searchsorted(self.event_ids, event_id))
        if k < len(self.event_ids) and self.event_ids[k] == event_id:
            return k
        return -1

    def positions(self, event_ids: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`position`; ``-1`` for events not covered."""
        k = np.searchsorted(self.event_ids, event_ids)
        k = np.minimum(k, max(len(self.event_ids) - 1, 0))
        if len(self.event_ids) == 0:
            return np.full(len(event_ids), -1, dtype=np.int64)
        return np.where(self.event_ids[k] == event_ids, k, -1).astype(np.int64)

    def __getitem__(self, event_id) -> list[tuple[int, EeltEntry]]:
        k = self.position(event_id)
        if k < 0:
            raise KeyError(event_id)
        lo, hi = self.offsets[k], self.offsets[k + 1]
        return [
            (
                int(self.elt_ids[j]),
                EeltEntry(
                    int(self.event_ids[k]),
                    float(self.z_e[j]),
                    float(self.mean_loss[j]),
                    float(self.sigma_i[j]),
                    float(self.sigma_c[j]),
                    float(self.max_loss[j]),
                ),
            )
            for j in range(lo, hi)
        ]

    def __iter__(self):
        return iter(self.event_ids.tolist())

    def __len__(self):
        return len(self.event_ids)

    @property
    def num_entries(self) -> int:
        return len(self.elt_ids)


def build_combined_elt(eelts: Sequence[tuple[int, EeltTable | Sequence[EeltEntry]]]) -> CombinedElt:
    """Index the given ELTs by event so a single lookup yields all their losses."""
    ids = [int(elt_id) for elt_id, _ in eelts]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise MalformedInputError(f"duplicate elt ids in combined ELT input: {dup}")
    tables = [t if isinstance(t, EeltTable) else EeltTable.from_entries(t) for _, t in eelts]
    sizes = [len(t) for t in tables]
    elt_col = np.repeat(np.array(ids, dtype=np.int64), sizes)
    cols = {}
    for name in EELT_COLUMNS:
        dtype = np.int64 if name == "event_id" else np.float64
        parts = [getattr(t, name) for t in tables]
        cols[name] = np.concatenate(parts).astype(dtype) if parts else np.empty(0, dtype)
    order = np.lexsort((elt_col, cols["event_id"]))
    ev = cols["event_id"][order]
    elt_col = elt_col[order]
    dup = (ev[1:] == ev[:-1]) & (elt_col[1:] == elt_col[:-1])
    if np.any(dup):
        k = int(np.flatnonzero(dup)[0])
        raise MalformedInputError(f"duplicate row for event {int(ev[k])} in ELT {int(elt_col[k])}")
    if len(ev):
        starts = np.flatnonzero(np.concatenate(([True], ev[1:] != ev[:-1])))
        event_ids = ev[starts]
        offsets = np.concatenate((starts, [len(ev)])).astype(np.int64)
    else:
        event_ids = np.empty(0, np.int64)
        offsets = np.zeros(1, np.int64)
    return CombinedElt(
        event_ids,
        offsets,
        elt_col,
        *(np.ascontiguousarray(cols[c][order]) for c in EELT_COLUMNS[1:]),
    )


# --------------------------------------------------------------------------
# portfolio validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    layer_id: int | None
    detail: str

    def __str__(self):
        where = f"layer {self.layer_id}: " if self.layer_id is not None else ""
        return f"{self.kind}: {where}{self.detail}"


def validate_portfolio(layers: Iterable[LayerRecord], pool: Iterable[EltMeta]) -> list[Violation]:
    """Report dangling ELT references, duplicate ids and empty coverage."""
    violations = []
    pool_ids = set()
    for meta in pool:
        if meta.elt_id in pool_ids:
            violations.append(Violation("duplicate_elt_id", None, f"elt {meta.elt_id} listed twice in pool"))
        pool_ids.add(meta.elt_id)
    seen = set()
    for layer in layers:
        if layer.layer_id in seen:
            violations.append(Violation("duplicate_layer_id", layer.layer_id, "layer id used more than once"))
        seen.add(layer.layer_id)
        if not layer.elt_ids:
            violations.append(Violation("empty_elt_ids", layer.layer_id, "layer covers no ELTs"))
        if len(set(layer.elt_ids)) != len(layer.elt_ids):
            violations.append(Violation("duplicate_elt_ref", layer.layer_id, f"repeated elt ids {layer.elt_ids}"))
        for elt_id in layer.elt_ids:
            if elt_id not in pool_ids:
                violations.append(Violation("dangling_elt_id", layer.layer_id, f"elt {elt_id} not in pool"))
    return violations
