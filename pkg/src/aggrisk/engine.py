"""Map, combine and reduce execution of aggregate risk queries.

The portfolio's selected layers are cut into jobs of ``job_size`` layers.
Jobs run one after another; inside a job the year event table is cut into
contiguous blocks of whole trials, one per worker thread, and a nogil numba
kernel maps every event occurrence of a block to its portfolio loss.

Floating-point results do not depend on the worker count or the job size.
Every trial is computed by exactly one worker. The per-event portfolio loss
is carried from one job into the next, so each event's layer payouts are
always added in ascending layer id order. That is the order used by
:func:`sequential_oracle`.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from . import analytics
from .analytics import LossReport, StatRow, assemble_report, stat_rows
from .financial import (
    AggregateState,
    aggregate_clip,
    apply_aggregate_terms,
    apply_occurrence_terms,
    occurrence_payout,
    sample_event_loss,
    sample_loss,
)
from .genio import manifest_digest
from .querylang import (
    AnnotationError,
    GroupingSpec,
    QueryPlan,
    QuerySemanticError,
    StatSpec,
    format_query,
    period_bucket,
)
from .tables import (
    CombinedElt,
    Dataset,
    EeltEntry,
    GroupedLoss,
    GroupKey,
    LayerRecord,
    YetRecord,
    YltEntry,
    build_combined_elt,
)

logger = logging.getLogger(__name__)

DEFAULT_JOB_SIZE = 200


@dataclass(frozen=True)
class Job:
    job_id: int
    layer_ids: tuple[int, ...]
    elt_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class ExecConfig:
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    job_size: int = DEFAULT_JOB_SIZE
    yelt_path: str | os.PathLike | None = None

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.job_size < 1:
            raise ValueError("job_size must be >= 1")


def split_jobs(
    selected_layers: Sequence[LayerRecord], job_size: int = DEFAULT_JOB_SIZE, allowed_elts=None
) -> list[Job]:
    """Partition layers (ascending id) into consecutive jobs of at most ``job_size``."""
    if job_size < 1:
        raise ValueError("job_size must be >= 1")
    layers = sorted(selected_layers, key=lambda layer: layer.layer_id)
    allowed = None if allowed_elts is None else set(allowed_elts)
    jobs = []
    for k in range(0, len(layers), job_size):
        chunk = layers[k : k + job_size]
        elts = {e for layer in chunk for e in layer.elt_ids if allowed is None or e in allowed}
        jobs.append(Job(len(jobs), tuple(layer.layer_id for layer in chunk), tuple(sorted(elts))))
    return jobs


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _map_block(
    t0, t1, starts, row_pos, z_pe,
    celt_off, celt_local, z_e, mean_loss, sigma_i, sigma_c, max_loss,
    layer_off, layer_elts, occ_ret, occ_lim, agg_ret, agg_lim, share,
    n_local, secondary, lpf,
):  # fmt: skip
    n_layers = len(occ_ret)
    buf = np.zeros(n_local)
    cum = np.zeros(n_layers)
    for t in range(t0, t1):
        cum[:] = 0.0
        for r in range(starts[t], starts[t + 1]):
            p = row_pos[r]
            if p < 0:
                continue
            for k in range(celt_off[p], celt_off[p + 1]):
                buf[celt_local[k]] = sample_loss(
                    z_pe[r], z_e[k], mean_loss[k], sigma_i[k], sigma_c[k], max_loss[k], secondary
                )
            acc = lpf[r]
            for q in range(n_layers):
                layer_loss = 0.0
                for j in range(layer_off[q], layer_off[q + 1]):
                    layer_loss += buf[layer_elts[j]]
                occ = occurrence_payout(layer_loss, occ_ret[q], occ_lim[q], share[q])
                if occ > 0.0:
                    before = cum[q]
                    cum[q] = before + occ
                    acc += aggregate_clip(cum[q], agg_ret[q], agg_lim[q]) - aggregate_clip(
                        before, agg_ret[q], agg_lim[q]
                    )
            lpf[r] = acc
            for k in range(celt_off[p], celt_off[p + 1]):
                buf[celt_local[k]] = 0.0


@njit(cache=True, nogil=True)
def _combine_block(t0, t1, starts, lpf, group_idx, out):
    for t in range(t0, t1):
        for r in range(starts[t], starts[t + 1]):
            out[group_idx[r], t] += lpf[r]


# --------------------------------------------------------------------------
# job preparation
# --------------------------------------------------------------------------


@dataclass
class _JobArrays:
    job: Job
    celt: CombinedElt
    row_pos: np.ndarray
    celt_local: np.ndarray
    layer_off: np.ndarray
    layer_elts: np.ndarray
    terms: tuple[np.ndarray, ...]

    def kernel_args(self):
        c = self.celt
        return (
            c.offsets, self.celt_local, c.z_e, c.mean_loss, c.sigma_i, c.sigma_c, c.max_loss,
            self.layer_off, self.layer_elts, *self.terms, len(self.job.elt_ids),
        )  # fmt: skip


def _prepare_job(job: Job, dataset: Dataset, layer_map: Mapping[int, LayerRecord]) -> _JobArrays:
    elt_ids = np.array(job.elt_ids, dtype=np.int64)
    celt = build_combined_elt([(e, dataset.eelts[e]) for e in job.elt_ids])
    celt_local = np.searchsorted(elt_ids, celt.elt_ids).astype(np.int64)
    allowed = set(job.elt_ids)
    offsets, members = [0], []
    for lid in job.layer_ids:
        local = [int(np.searchsorted(elt_ids, e)) for e in sorted(layer_map[lid].elt_ids) if e in allowed]
        members.extend(local)
        offsets.append(len(members))
    layers = [layer_map[lid].terms for lid in job.layer_ids]
    terms = tuple(
        np.array([getattr(t, name) for t in layers], dtype=np.float64)
        for name in ("occ_ret", "occ_lim", "agg_ret", "agg_lim", "share")
    )
    return _JobArrays(
        job,
        celt,
        celt.positions(dataset.yet.event_id),
        celt_local,
        np.array(offsets, dtype=np.int64),
        np.array(members, dtype=np.int64),
        terms,
    )


def _trial_blocks(starts: np.ndarray, workers: int) -> list[tuple[int, int]]:
    """Cut trials into at most ``workers`` contiguous blocks of similar row count."""
    n_trials = len(starts) - 1
    if n_trials == 0:
        return []
    targets = np.linspace(0, starts[-1], workers + 1)[1:-1]
    cuts = np.searchsorted(starts[:-1], targets, side="left")
    bounds = sorted(set([0, *cuts.tolist(), n_trials]))
    return [(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]


# --------------------------------------------------------------------------
# grouping
# --------------------------------------------------------------------------


def _row_ranks(starts: np.ndarray):
    counts = np.diff(starts)
    n = int(starts[-1])
    rank = np.arange(n, dtype=np.int64) - np.repeat(starts[:-1], counts) + 1
    return rank, np.repeat(counts, counts)


def assign_groups(dataset: Dataset, plan: QueryPlan) -> tuple[list[GroupKey], np.ndarray]:
    """Group key of every YET row; groups sorted, rows mapped to group indices."""
    g = plan.grouping
    yet = dataset.yet
    n = len(yet)
    if n == 0:
        return [], np.empty(0, np.int64)
    if g.is_total:
        return [GroupKey()], np.zeros(n, dtype=np.int64)
    events = yet.event_id
    ann = plan.annotations
    if g.by_region or g.by_peril:
        missing = set(np.unique(events).tolist()) - ann.keys()
        if missing:
            raise AnnotationError(missing)
    regions = sorted({ann[e][0] for e in np.unique(events).tolist()}) if g.by_region else [None]
    perils = sorted({ann[e][1] for e in np.unique(events).tolist()}) if g.by_peril else [None]
    uniq, inv = np.unique(events, return_inverse=True)
    region_code = np.zeros(n, np.int64)
    peril_code = np.zeros(n, np.int64)
    if g.by_region:
        r_index = {r: i for i, r in enumerate(regions)}
        region_code = np.array([r_index[ann[e][0]] for e in uniq.tolist()], np.int64)[inv]
    if g.by_peril:
        p_index = {p: i for i, p in enumerate(perils)}
        peril_code = np.array([p_index[ann[e][1]] for e in uniq.tolist()], np.int64)[inv]
    k = g.buckets
    if g.period_kind:
        rank, m = _row_ranks(yet.trial_starts)
        bucket = np.clip((rank * k + m - 1) // m, 1, k) - 1
    else:
        bucket = np.zeros(n, np.int64)
    code = (region_code * len(perils) + peril_code) * k + bucket
    used, group_idx = np.unique(code, return_inverse=True)
    keys = []
    for c in used.tolist():
        b = c % k
        rp = c // k
        keys.append(
            GroupKey(
                region=regions[rp // len(perils)],
                peril=perils[rp % len(perils)],
                period_kind=g.period_kind,
                period=b + 1 if g.period_kind else None,
            )
        )
    return keys, group_idx.astype(np.int64)


# --------------------------------------------------------------------------
# per-trial API
# --------------------------------------------------------------------------


def map_trial(
    trial: Sequence[YetRecord], celt: CombinedElt, layers: Sequence[LayerRecord], secondary_uncertainty: bool
) -> list[YltEntry]:
    """Portfolio loss of every event of one trial (Algorithm-2 style mapper).

    Each layer uses the ELTs it covers that are present in ``celt``.
    """
    rows = sorted(trial, key=lambda r: r.time_index)
    if len({r.trial_id for r in rows}) > 1:
        raise ValueError("map_trial expects the rows of a single trial")
    if not rows:
        return []
    celt_elts = np.unique(celt.elt_ids)
    layer_list = sorted(layers, key=lambda layer: layer.layer_id)
    present = set(celt_elts.tolist())
    job_elts = tuple(sorted({e for layer in layer_list for e in layer.elt_ids if e in present}))
    elt_arr = np.array(job_elts, dtype=np.int64)
    keep = np.isin(celt.elt_ids, elt_arr)
    celt_local = np.where(keep, np.searchsorted(elt_arr, celt.elt_ids), 0).astype(np.int64)
    # entries of ELTs no layer covers are routed to a scratch slot
    scratch = len(job_elts)
    celt_local = np.where(keep, celt_local, scratch)
    offsets, members = [0], []
    for layer in layer_list:
        members.extend(int(np.searchsorted(elt_arr, e)) for e in sorted(layer.elt_ids) if e in present)
        offsets.append(len(members))
    terms = [
        np.array([getattr(layer.terms, name) for layer in layer_list], dtype=np.float64)
        for name in ("occ_ret", "occ_lim", "agg_ret", "agg_lim", "share")
    ]
    events = np.array([r.event_id for r in rows], dtype=np.int64)
    lpf = np.zeros(len(rows))
    _map_block(
        0, 1, np.array([0, len(rows)], dtype=np.int64), celt.positions(events),
        np.array([r.z_pe for r in rows], dtype=np.float64),
        celt.offsets, celt_local, celt.z_e, celt.mean_loss, celt.sigma_i, celt.sigma_c, celt.max_loss,
        np.array(offsets, dtype=np.int64), np.array(members, dtype=np.int64), *terms,
        scratch + 1, bool(secondary_uncertainty), lpf,
    )  # fmt: skip
    return [YltEntry(r.trial_id, r.event_id, r.time_index, float(v)) for r, v in zip(rows, lpf.tolist())]


def _group_of(event_id, rank, m, annotations, grouping: GroupingSpec) -> GroupKey:
    region = peril = None
    if grouping.by_region or grouping.by_peril:
        if event_id not in annotations:
            raise AnnotationError([event_id])
        region, peril = annotations[event_id]
        region = region if grouping.by_region else None
        peril = peril if grouping.by_peril else None
    period = period_bucket(rank, m, grouping.buckets) if grouping.period_kind else None
    return GroupKey(region, peril, grouping.period_kind, period)


def combine_trial(
    entries: Sequence[YltEntry], annotations: Mapping[int, tuple], grouping: GroupingSpec
) -> list[GroupedLoss]:
    """Sum one trial's event losses per group, in time order."""
    rows = sorted(entries, key=lambda e: e.time_index)
    if len({e.trial_id for e in rows}) > 1:
        raise ValueError("combine_trial expects the entries of a single trial")
    sums: dict[GroupKey, float] = {}
    m = len(rows)
    for rank, e in enumerate(rows, 1):
        key = _group_of(e.event_id, rank, m, annotations, grouping)
        sums[key] = sums.get(key, 0.0) + e.loss
    trial_id = rows[0].trial_id if rows else 0
    return [GroupedLoss(k, trial_id, v) for k, v in sorted(sums.items(), key=lambda kv: kv[0].sort_key())]


def reduce_group(group_key, losses, spec: StatSpec, trial_ids=None) -> list[StatRow]:
    """Statistics of one group's zero-filled per-trial losses."""
    values = np.asarray(losses, dtype=np.float64)
    ids = np.arange(len(values)) if trial_ids is None else np.asarray(trial_ids)
    order = np.lexsort((ids, values))
    return stat_rows(values[order].tolist(), spec, values.tolist())


# --------------------------------------------------------------------------
# query execution
# --------------------------------------------------------------------------


@dataclass
class TrialLossVector:
    """Per-group loss of every trial: ``losses[g, t]`` for ``groups[g]`` and ``trial_ids[t]``."""

    groups: list[GroupKey]
    trial_ids: np.ndarray
    losses: np.ndarray

    def as_dict(self) -> dict[GroupKey, dict[int, float]]:
        tids = self.trial_ids.tolist()
        return {g: dict(zip(tids, self.losses[i].tolist())) for i, g in enumerate(self.groups)}


@dataclass
class EngineRun:
    vectors: TrialLossVector
    report: LossReport
    timings: dict[str, float]
    yelt: np.ndarray | None = None


def report_metadata(plan: QueryPlan, dataset: Dataset) -> dict[str, str]:
    n = dataset.yet.num_trials
    meta = {
        "query": plan.query_text,
        "dataset_manifest_sha256": manifest_digest(dataset),
        "num_trials": str(n),
        "quantile_convention": analytics.QUANTILE_CONVENTION,
        "variance_convention": analytics.VARIANCE_CONVENTION,
    }
    if n == 1:
        meta["variance_degenerate"] = "true"
    return meta


def _reduce_all(vectors: TrialLossVector, plan: QueryPlan, dataset: Dataset) -> LossReport:
    per_group = [
        (g, reduce_group(g, vectors.losses[i], plan.stat, vectors.trial_ids)) for i, g in enumerate(vectors.groups)
    ]
    return assemble_report(per_group, report_metadata(plan, dataset))


def compute_group_losses(
    plan: QueryPlan, dataset: Dataset, cfg: ExecConfig | None = None, timings: dict | None = None
) -> tuple[TrialLossVector, np.ndarray]:
    """Run the map and combine phases; returns the loss vectors and the per-event losses."""
    cfg = cfg or ExecConfig()
    timings = {} if timings is None else timings
    t_start = time.perf_counter()
    yet = dataset.yet
    layer_map = dataset.layer_map()
    missing = [lid for lid in plan.layer_ids if lid not in layer_map]
    if missing:
        raise QuerySemanticError(f"plan references unknown layers {missing}")
    jobs = split_jobs([layer_map[i] for i in plan.layer_ids], cfg.job_size, plan.elt_ids)
    groups, group_idx = assign_groups(dataset, plan)
    starts = yet.trial_starts
    blocks = _trial_blocks(starts, cfg.workers)
    lpf = np.zeros(len(yet))
    out = np.zeros((len(groups), yet.num_trials))
    timings["setup"] = time.perf_counter() - t_start
    timings["map_combine"] = 0.0

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 and len(blocks) > 1 else None
    try:
        for k, job in enumerate(jobs or [None]):
            t0 = time.perf_counter()
            prepared = _prepare_job(job, dataset, layer_map) if job is not None else None
            timings["setup"] += time.perf_counter() - t0
            last = k == max(len(jobs), 1) - 1
            t0 = time.perf_counter()

            def work(block, prepared=prepared, last=last):
                a, b = block
                if prepared is not None:
                    _map_block(a, b, starts, prepared.row_pos, yet.z_pe, *prepared.kernel_args(),
                               plan.secondary_uncertainty, lpf)  # fmt: skip
                if last:
                    _combine_block(a, b, starts, lpf, group_idx, out)

            if pool is None:
                for block in blocks:
                    work(block)
            else:
                for fut in [pool.submit(work, block) for block in blocks]:
                    fut.result()
            timings["map_combine"] += time.perf_counter() - t0
            logger.debug("job %s done in %.3fs", None if job is None else job.job_id, time.perf_counter() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrialLossVector(groups, yet.trial_ids.copy(), out), lpf


def execute(plan: QueryPlan, dataset: Dataset, cfg: ExecConfig | None = None) -> EngineRun:
    cfg = cfg or ExecConfig()
    timings: dict[str, float] = {}
    vectors, lpf = compute_group_losses(plan, dataset, cfg, timings)
    t0 = time.perf_counter()
    report = _reduce_all(vectors, plan, dataset)
    timings["reduce"] = time.perf_counter() - t0
    if cfg.yelt_path is not None:
        t0 = time.perf_counter()
        write_yelt(cfg.yelt_path, dataset, lpf)
        timings["report"] = time.perf_counter() - t0
    return EngineRun(vectors, report, timings, lpf)


def run_query(plan: QueryPlan, dataset: Dataset, cfg: ExecConfig | None = None) -> LossReport:
    return execute(plan, dataset, cfg).report


def write_yelt(path, dataset: Dataset, lpf: np.ndarray) -> Path:
    """Dump the per-event portfolio losses as a YELT CSV."""
    y = dataset.yet
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("trial_id,event_id,time_index,estimated_loss\n")
        fh.writelines(
            f"{t},{e},{i},{v!r}\n"
            for t, e, i, v in zip(y.trial_id.tolist(), y.event_id.tolist(), y.time_index.tolist(), lpf.tolist())
        )
    return path


# --------------------------------------------------------------------------
# sequential oracle
# --------------------------------------------------------------------------


def oracle_group_losses(plan: QueryPlan, dataset: Dataset) -> TrialLossVector:
    """Nested-loop evaluation, trial by trial and event by event.

    Losses are looked up in each ELT separately (no combined index) and the
    financial functions are evaluated one call at a time.
    """
    layer_map = dataset.layer_map()
    layers = [layer_map[i] for i in sorted(plan.layer_ids)]
    allowed = set(plan.elt_ids)
    covered = [sorted(e for e in layer.elt_ids if e in allowed) for layer in layers]
    lookup: dict[int, dict[int, EeltEntry]] = {}
    for elt_id in sorted(allowed):
        lookup[elt_id] = {entry.event_id: entry for entry in dataset.eelts[elt_id].entries()}
    su = plan.secondary_uncertainty
    grouping = plan.grouping
    annotations = plan.annotations

    yet = dataset.yet
    trial_ids = yet.trial_ids.tolist()
    starts = yet.trial_starts.tolist()
    events = yet.event_id.tolist()
    z_pe = yet.z_pe.tolist()
    per_trial: list[dict[GroupKey, float]] = []
    seen_groups: set[GroupKey] = set()
    for t in range(len(trial_ids)):
        lo, hi = starts[t], starts[t + 1]
        states = [AggregateState() for _ in layers]
        sums: dict[GroupKey, float] = {}
        for rank, r in enumerate(range(lo, hi), 1):
            event = events[r]
            sampled: dict[int, float] = {}
            l_pf = 0.0
            for q, layer in enumerate(layers):
                l_layer = 0.0
                for elt_id in covered[q]:
                    entry = lookup[elt_id].get(event)
                    if entry is None:
                        continue
                    if elt_id not in sampled:
                        sampled[elt_id] = sample_event_loss(entry, z_pe[r], su)
                    l_layer += sampled[elt_id]
                occ = apply_occurrence_terms(l_layer, layer.terms)
                states[q], increment = apply_aggregate_terms(states[q], occ, layer.terms)
                l_pf += increment
            key = _group_of(event, rank, hi - lo, annotations, grouping)
            seen_groups.add(key)
            sums[key] = sums.get(key, 0.0) + l_pf
        per_trial.append(sums)
    groups = sorted(seen_groups, key=GroupKey.sort_key)
    losses = np.array([[sums.get(g, 0.0) for sums in per_trial] for g in groups], dtype=np.float64)
    return TrialLossVector(groups, np.array(trial_ids, dtype=np.int64), losses.reshape(len(groups), len(trial_ids)))


def sequential_oracle(plan: QueryPlan, dataset: Dataset) -> LossReport:
    return _reduce_all(oracle_group_losses(plan, dataset), plan, dataset)


# --------------------------------------------------------------------------
# multi-marginal analysis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginalKey:
    """Report group key scoped to one candidate subset."""

    order: int
    kind: str  # "subset" or "delta"
    subset: tuple[int, ...]
    group: GroupKey

    @property
    def label(self) -> str:
        ids = "+".join(map(str, self.subset)) or "none"
        return f"{self.kind}={ids};{self.group.label}"

    def sort_key(self):
        return (self.order, self.kind, self.group.sort_key())


@dataclass
class MarginalResult:
    base: TrialLossVector
    candidates: dict[int, TrialLossVector]
    subsets: dict[tuple[int, ...], LossReport]
    differences: dict[tuple[int, ...], LossReport]
    subset_losses: dict[tuple[int, ...], np.ndarray]
    report: LossReport


def candidate_plan(plan: QueryPlan, dataset: Dataset, candidate: int) -> QueryPlan:
    layer = dataset.layer_map()[candidate]
    allowed = set(plan.marginal_elt_ids)
    return plan.with_layers((candidate,), sorted(e for e in layer.elt_ids if e in allowed))


def candidate_subsets(candidates: Sequence[int]) -> list[tuple[int, ...]]:
    ordered = tuple(sorted(candidates))
    return [s for k in range(len(ordered) + 1) for s in itertools.combinations(ordered, k)]


def run_marginal(
    plan: QueryPlan, dataset: Dataset, cfg: ExecConfig | None = None, oracle: bool = False
) -> MarginalResult:
    """Loss distributions of the base portfolio plus every subset of candidate layers.

    Payouts are per layer, so a subset's per-trial loss is the base loss plus
    the candidates' isolated losses, added in ascending candidate id. With
    ``oracle`` the base and candidate vectors come from the sequential oracle.
    """
    cfg = cfg or ExecConfig()

    def losses_of(p):
        return oracle_group_losses(p, dataset) if oracle else compute_group_losses(p, dataset, cfg)[0]

    if len(plan.marginal) > 10:
        raise QuerySemanticError("at most 10 marginal candidates")
    overlap = sorted(set(plan.marginal) & set(plan.layer_ids))
    if overlap:
        raise QuerySemanticError(f"marginal candidates {overlap} overlap the base layer selection")
    base_plan = plan.with_layers(plan.layer_ids, plan.elt_ids)
    if plan.query is not None:
        # subset reports describe the base query, so the empty subset matches it byte for byte
        base_query = replace(plan.query, marginal=None)
        base_plan = replace(base_plan, query=base_query, query_text=format_query(base_query))
    base = losses_of(base_plan)
    candidates = {c: losses_of(candidate_plan(plan, dataset, c)) for c in plan.marginal}
    meta = report_metadata(base_plan, dataset)
    subsets, differences, subset_losses = {}, {}, {}
    combined = []
    for order, subset in enumerate(candidate_subsets(plan.marginal)):
        losses = base.losses.copy()
        for c in subset:
            losses = losses + candidates[c].losses
        delta = losses - base.losses
        subset_losses[subset] = losses
        rows = [(g, reduce_group(g, losses[i], plan.stat, base.trial_ids)) for i, g in enumerate(base.groups)]
        drows = [(g, reduce_group(g, delta[i], plan.stat, base.trial_ids)) for i, g in enumerate(base.groups)]
        subsets[subset] = assemble_report(rows, meta)
        differences[subset] = assemble_report(drows, meta)
        combined += [(MarginalKey(order, "subset", subset, g), r) for g, r in rows]
        combined += [(MarginalKey(order, "delta", subset, g), r) for g, r in drows]
    report = assemble_report(combined, {**meta, "marginal_candidates": "+".join(map(str, sorted(plan.marginal)))})
    return MarginalResult(base, candidates, subsets, differences, subset_losses, report)
