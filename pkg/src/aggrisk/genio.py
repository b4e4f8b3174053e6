"""Synthetic dataset generation, CSV reading/writing and STEP year event tables.

All randomness comes from a counter-based SplitMix64 stream so any
implementation following the same draw order reproduces the data exactly:
``u_i = (mix64(seed + i * 0x9E3779B97F4A7C15) >> 11) * 2**-53`` for
``i = 1, 2, ...``.  Draws are consumed in the order catalogue, ELT pool
metadata, ELT rows, layers, YET.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tables import (
    EELT_COLUMNS,
    DataError,
    Dataset,
    EeltTable,
    EltMeta,
    EventCatalogRecord,
    LayerRecord,
    LayerTerms,
    MalformedInputError,
    YetTable,
    validate_portfolio,
)

logger = logging.getLogger(__name__)

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1

COB_TOKENS = ("casualty", "property", "specialty")
LOB_TOKENS = ("commercial", "engineering", "marine", "residential")
TOB_TOKENS = ("proportional", "xol")

YET_HEADER = ("trial_id", "event_id", "time_index", "z_pe")
LAYER_HEADER = ("layer_id", "program_id", "cob", "lob", "tob", "elt_ids", "occ_ret", "occ_lim", "agg_ret", "agg_lim", "share")
POOL_HEADER = ("elt_id", "region", "peril")
EVENTS_HEADER = ("event_id", "region", "peril")


class MissingFileError(DataError):
    def __init__(self, path):
        super().__init__(f"missing input file: {path}")
        self.path = Path(path)


class RowError(DataError):
    """A row-level problem, located by file name and 1-based line number."""

    def __init__(self, path, line, message):
        super().__init__(f"{Path(path).name}:{line}: {message}")
        self.path = Path(path)
        self.line = line


class ParseError(RowError):
    pass


class InvariantError(RowError):
    pass


# --------------------------------------------------------------------------
# random stream
# --------------------------------------------------------------------------


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & _MASK
        return mix64(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        """The next ``n`` uniforms in [0, 1), identical to ``n`` calls of :meth:`uniform`."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
            z = np.uint64(self.state) + steps
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & _MASK
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def choice_index(self, n: int, size: int) -> np.ndarray:
        return np.minimum((self.uniforms(size) * n).astype(np.int64), n - 1)

    def subset(self, n: int, k: int) -> np.ndarray:
        """Sorted uniform random ``k``-subset of ``range(n)``."""
        u = self.uniforms(n)
        return np.sort(np.argsort(u, kind="stable")[:k])


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 42
    num_trials: int = 1000
    events_per_trial: int = 100
    num_layers: int = 40
    elts_per_layer: int = 5
    catalogue_size: int = 2000
    regions: tuple[str, ...] = ("CA", "FL", "JP", "TX")
    perils: tuple[str, ...] = ("EQ", "FLD", "HU", "WS")
    num_elts: int | None = None  # ELT pool size; defaults to num_layers * elts_per_layer
    elt_coverage: float = 0.2

    def __post_init__(self):
        for name in ("num_trials", "events_per_trial", "num_layers", "elts_per_layer", "catalogue_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.regions or not self.perils:
            raise ValueError("regions and perils must be nonempty")
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "perils", tuple(self.perils))
        if self.pool_size < self.elts_per_layer:
            raise ValueError("ELT pool smaller than elts_per_layer")
        if not 0.0 < self.elt_coverage <= 1.0:
            raise ValueError("elt_coverage must lie in (0, 1]")

    @property
    def pool_size(self) -> int:
        return self.num_elts if self.num_elts is not None else self.num_layers * self.elts_per_layer

    def manifest_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(value)
            lines.append(f"{key}={value}")
        lines.append(f"pool_size={self.pool_size}")
        return "\n".join(lines) + "\n"


def synthesize(cfg: GeneratorConfig) -> Dataset:
    """Generate a complete in-memory dataset for ``cfg``."""
    rng = SplitMix64(cfg.seed)
    n_ev = cfg.catalogue_size

    ev_region = rng.choice_index(len(cfg.regions), n_ev)
    ev_peril = rng.choice_index(len(cfg.perils), n_ev)
    catalogue = tuple(
        EventCatalogRecord(i + 1, cfg.regions[r], cfg.perils[p])
        for i, (r, p) in enumerate(zip(ev_region.tolist(), ev_peril.tolist()))
    )

    n_elts = cfg.pool_size
    elt_region = rng.choice_index(len(cfg.regions), n_elts)
    elt_peril = rng.choice_index(len(cfg.perils), n_elts)
    pool = tuple(
        EltMeta(i + 1, cfg.regions[r], cfg.perils[p])
        for i, (r, p) in enumerate(zip(elt_region.tolist(), elt_peril.tolist()))
    )

    k_cover = max(1, int(round(cfg.elt_coverage * n_ev)))
    eelts = {}
    dense_mean = np.zeros((n_elts, n_ev))
    for j in range(n_elts):
        idx = rng.subset(n_ev, k_cover)
        u = rng.uniforms(5 * k_cover).reshape(k_cover, 5)
        mean = 10.0 ** (3.0 + 4.0 * u[:, 1])
        eelts[j + 1] = EeltTable(
            event_id=idx + 1,
            z_e=u[:, 0],
            mean_loss=mean,
            sigma_i=mean * (0.1 + 0.4 * u[:, 3]),
            sigma_c=mean * (0.1 + 0.4 * u[:, 4]),
            max_loss=mean * (2.0 + 3.0 * u[:, 2]),
        )
        dense_mean[j, idx] = mean

    layers = []
    n_programs = max(1, cfg.num_layers // 10)
    for i in range(cfg.num_layers):
        elt_idx = rng.subset(n_elts, cfg.elts_per_layer)
        u = rng.uniforms(9)
        gross = dense_mean[elt_idx].sum(axis=0)
        hit = gross[gross > 0]
        median = float(np.median(hit)) if len(hit) else 1.0
        hit_fraction = len(hit) / n_ev
        occ_ret = median * (0.8 + 0.4 * u[5])
        occ_lim = occ_ret * (0.5 + 1.5 * u[6])
        share = 1.0 - 0.9 * u[4]
        per_event = share * occ_lim
        n_pay = max(1.0, 0.5 * hit_fraction * cfg.events_per_trial)
        terms = LayerTerms(
            occ_ret=occ_ret,
            occ_lim=occ_lim,
            agg_ret=per_event * n_pay * 0.5 * u[7],
            agg_lim=per_event * n_pay * (0.25 + 0.75 * u[8]),
            share=share,
        )
        layers.append(
            LayerRecord(
                layer_id=i + 1,
                program_id=1 + min(int(u[0] * n_programs), n_programs - 1),
                cob=COB_TOKENS[min(int(u[1] * len(COB_TOKENS)), len(COB_TOKENS) - 1)],
                lob=LOB_TOKENS[min(int(u[2] * len(LOB_TOKENS)), len(LOB_TOKENS) - 1)],
                tob=TOB_TOKENS[min(int(u[3] * len(TOB_TOKENS)), len(TOB_TOKENS) - 1)],
                elt_ids=tuple((elt_idx + 1).tolist()),
                terms=terms,
            )
        )

    m = cfg.events_per_trial
    n_rows = cfg.num_trials * m
    u = rng.uniforms(2 * n_rows).reshape(n_rows, 2)
    yet = YetTable(
        trial_id=np.repeat(np.arange(1, cfg.num_trials + 1, dtype=np.int64), m),
        event_id=np.minimum((u[:, 0] * n_ev).astype(np.int64), n_ev - 1) + 1,
        time_index=np.tile(np.arange(1, m + 1, dtype=np.int64), cfg.num_trials),
        z_pe=u[:, 1],
    )
    return Dataset(yet, tuple(layers), pool, eelts, catalogue, cfg.manifest_text())


def generate_dataset(cfg: GeneratorConfig, out_dir) -> Dataset:
    """Generate ``cfg`` and write the five CSV kinds plus ``manifest.txt``."""
    ds = synthesize(cfg)
    write_dataset(ds, out_dir)
    return ds


# --------------------------------------------------------------------------
# CSV emission
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_lines(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        fh.writelines(rows)


def write_dataset(ds: Dataset, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    y = ds.yet
    yet_rows = (
        f"{t},{e},{i},{z!r}\n"
        for t, e, i, z in zip(y.trial_id.tolist(), y.event_id.tolist(), y.time_index.tolist(), y.z_pe.tolist())
    )
    _write_lines(out / "yet.csv", YET_HEADER, yet_rows)
    layer_rows = (
        f"{r.layer_id},{r.program_id},{r.cob},{r.lob},{r.tob},{';'.join(map(str, r.elt_ids))},"
        f"{_fmt(r.terms.occ_ret)},{_fmt(r.terms.occ_lim)},{_fmt(r.terms.agg_ret)},"
        f"{_fmt(r.terms.agg_lim)},{_fmt(r.terms.share)}\n"
        for r in ds.layers
    )
    _write_lines(out / "layers.csv", LAYER_HEADER, layer_rows)
    _write_lines(out / "eltpool.csv", POOL_HEADER, (f"{m.elt_id},{m.region},{m.peril}\n" for m in ds.pool))
    _write_lines(out / "events.csv", EVENTS_HEADER, (f"{c.event_id},{c.region},{c.peril}\n" for c in ds.catalogue))
    paths = [out / "yet.csv", out / "layers.csv", out / "eltpool.csv", out / "events.csv"]
    for elt_id, t in ds.eelts.items():
        cols = [getattr(t, c).tolist() for c in EELT_COLUMNS]
        rows = (f"{e},{z!r},{a!r},{b!r},{c!r},{d!r}\n" for e, z, a, b, c, d in zip(*cols))
        path = out / f"eelt_{elt_id}.csv"
        _write_lines(path, EELT_COLUMNS, rows)
        paths.append(path)
    if ds.manifest:
        (out / "manifest.txt").write_text(ds.manifest, encoding="utf-8", newline="\n")
        paths.append(out / "manifest.txt")
    return paths


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


def _read_rows(path: Path, header):
    if not path.is_file():
        raise MissingFileError(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(first) != tuple(header):
            raise ParseError(path, 1, f"expected header {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
            yield line, row


def _int(path, line, name, text):
    try:
        v = int(text)
    except ValueError:
        raise ParseError(path, line, f"{name}: not an integer: {text!r}") from None
    if v < 1:
        raise ParseError(path, line, f"{name} must be positive, got {v}")
    return v


def _float(path, line, name, text, lo=0.0, hi=None):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(path, line, f"{name}: not a number: {text!r}") from None
    if not np.isfinite(v) or v < lo or (hi is not None and v >= hi):
        bound = f"[{lo}, {hi})" if hi is not None else f">= {lo}"
        raise ParseError(path, line, f"{name} must be finite and {bound}, got {text}")
    return v


def _token(path, line, name, text):
    if not text or text != text.strip():
        raise ParseError(path, line, f"{name}: empty or padded token {text!r}")
    return text


def load_yet(path) -> YetTable:
    path = Path(path)
    trial, event, time_index, z = [], [], [], []
    last = {}
    for line, row in _read_rows(path, YET_HEADER):
        t = _int(path, line, "trial_id", row[0])
        ti = _int(path, line, "time_index", row[2])
        if t in last and ti <= last[t]:
            raise InvariantError(path, line, f"trial {t}: time_index {ti} not greater than {last[t]}")
        last[t] = ti
        trial.append(t)
        event.append(_int(path, line, "event_id", row[1]))
        time_index.append(ti)
        z.append(_float(path, line, "z_pe", row[3], 0.0, 1.0))
    return YetTable(np.array(trial, np.int64), np.array(event, np.int64), np.array(time_index, np.int64), np.array(z))


def load_layers(path) -> tuple[list[LayerRecord], dict[int, int]]:
    path = Path(path)
    layers, lines = [], {}
    for line, row in _read_rows(path, LAYER_HEADER):
        layer_id = _int(path, line, "layer_id", row[0])
        elt_text = row[5].strip()
        elt_ids = tuple(_int(path, line, "elt_ids", e) for e in elt_text.split(";")) if elt_text else ()
        share = _float(path, line, "share", row[10])
        try:
            terms = LayerTerms(*(_float(path, line, h, v) for h, v in zip(LAYER_HEADER[6:10], row[6:10])), share)
        except MalformedInputError as exc:
            raise InvariantError(path, line, str(exc)) from None
        layers.append(
            LayerRecord(
                layer_id,
                _int(path, line, "program_id", row[1]),
                _token(path, line, "cob", row[2]),
                _token(path, line, "lob", row[3]),
                _token(path, line, "tob", row[4]),
                elt_ids,
                terms,
            )
        )
        lines.setdefault(layer_id, line)
    return layers, lines


def load_pool(path) -> list[EltMeta]:
    path = Path(path)
    return [
        EltMeta(_int(path, line, "elt_id", r[0]), _token(path, line, "region", r[1]), _token(path, line, "peril", r[2]))
        for line, r in _read_rows(path, POOL_HEADER)
    ]


def load_catalogue(path) -> list[EventCatalogRecord]:
    path = Path(path)
    out, seen = [], set()
    for line, r in _read_rows(path, EVENTS_HEADER):
        rec = EventCatalogRecord(
            _int(path, line, "event_id", r[0]), _token(path, line, "region", r[1]), _token(path, line, "peril", r[2])
        )
        if rec.event_id in seen:
            raise InvariantError(path, line, f"duplicate event_id {rec.event_id}")
        seen.add(rec.event_id)
        out.append(rec)
    return out


def load_eelt(path) -> EeltTable:
    path = Path(path)
    cols = [[] for _ in EELT_COLUMNS]
    seen = set()
    for line, r in _read_rows(path, EELT_COLUMNS):
        event_id = _int(path, line, "event_id", r[0])
        if event_id in seen:
            raise InvariantError(path, line, f"duplicate event_id {event_id}")
        seen.add(event_id)
        vals = [event_id, _float(path, line, "z_e", r[1], 0.0, 1.0)]
        vals += [_float(path, line, name, v) for name, v in zip(EELT_COLUMNS[2:], r[2:])]
        if vals[2] > vals[5]:
            raise InvariantError(path, line, f"mean_loss {r[2]} exceeds max_loss {r[5]}")
        for c, v in zip(cols, vals):
            c.append(v)
    return EeltTable(*(np.array(c) if c else np.empty(0) for c in cols))


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise MissingFileError(d)
    catalogue = load_catalogue(d / "events.csv")
    pool = load_pool(d / "eltpool.csv")
    layers, layer_lines = load_layers(d / "layers.csv")
    problems = validate_portfolio(layers, pool)
    if problems:
        first = problems[0]
        line = layer_lines.get(first.layer_id, 1)
        raise InvariantError(d / "layers.csv", line, "; ".join(str(p) for p in problems))
    catalogue_ids = {c.event_id for c in catalogue}
    eelts = {}
    for meta in pool:
        path = d / f"eelt_{meta.elt_id}.csv"
        table = load_eelt(path)
        unknown = np.setdiff1d(table.event_id, np.fromiter(catalogue_ids, np.int64, len(catalogue_ids)))
        if len(unknown):
            raise InvariantError(path, 1, f"events not in catalogue: {unknown[:10].tolist()}")
        eelts[meta.elt_id] = table
    yet = load_yet(d / "yet.csv")
    manifest_path = d / "manifest.txt"
    manifest = manifest_path.read_text(encoding="utf-8") if manifest_path.is_file() else ""
    logger.info("loaded %d YET rows, %d layers, %d ELTs from %s", len(yet), len(layers), len(eelts), d)
    return Dataset(yet, tuple(layers), tuple(pool), eelts, tuple(catalogue), manifest)


def manifest_digest(ds: Dataset) -> str:
    return hashlib.sha256(ds.manifest.encode("utf-8")).hexdigest()[:16]


# --------------------------------------------------------------------------
# STEP analysis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StepSpec:
    weighted_events: tuple[tuple[int, float], ...]
    num_trials: int
    events: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        pairs = tuple((int(e), float(w)) for e, w in self.weighted_events)
        if not pairs:
            raise ValueError("STEP needs at least one weighted event")
        for e, w in pairs:
            if e < 1:
                raise ValueError(f"event id must be positive, got {e}")
            if not (np.isfinite(w) and w > 0):
                raise ValueError(f"weight of event {e} must be > 0, got {w}")
        if self.num_trials < 1:
            raise ValueError("num_trials must be >= 1")
        object.__setattr__(self, "weighted_events", pairs)
        object.__setattr__(self, "events", tuple(e for e, _ in pairs))

    def missing_events(self, catalogue: Sequence[EventCatalogRecord]) -> list[int]:
        known = {c.event_id for c in catalogue}
        return [e for e in self.events if e not in known]


def build_step_yet(spec: StepSpec, seed: int) -> YetTable:
    """One event per trial, drawn with probability proportional to its weight."""
    rng = SplitMix64(seed)
    weights = np.array([w for _, w in spec.weighted_events])
    cum = np.cumsum(weights)
    cum /= cum[-1]
    u = rng.uniforms(2 * spec.num_trials).reshape(spec.num_trials, 2)
    pick = np.minimum(np.searchsorted(cum, u[:, 0], side="right"), len(cum) - 1)
    events = np.array(spec.events, dtype=np.int64)[pick]
    n = spec.num_trials
    return YetTable(np.arange(1, n + 1, dtype=np.int64), events, np.ones(n, dtype=np.int64), u[:, 1])
