from __future__ import annotations

import sys

import pytest

from aggrisk.genio import GeneratorConfig, synthesize
from aggrisk.tables import (
    Dataset,
    EeltEntry,
    EeltTable,
    EltMeta,
    EventCatalogRecord,
    LayerRecord,
    LayerTerms,
    YetTable,
)

PASS_THROUGH = LayerTerms(occ_ret=0.0, occ_lim=1e300, agg_ret=0.0, agg_lim=1e300, share=1.0)


def layer(layer_id, elt_ids, terms=PASS_THROUGH, program_id=1, cob="property", lob="commercial", tob="xol"):
    return LayerRecord(layer_id, program_id, cob, lob, tob, tuple(elt_ids), terms)


def entry(event_id, mean, z_e=0.0, sigma_i=0.0, sigma_c=0.0, max_loss=None):
    return EeltEntry(event_id, z_e, mean, sigma_i, sigma_c, mean * 3 if max_loss is None else max_loss)


def hand_dataset(layers, eelts, yet_rows, regions=None, perils=None, elt_regions=None):
    """Build a dataset from literals.

    ``eelts`` maps elt_id to entry lists; ``yet_rows`` are (trial, event, time, z_pe);
    ``regions``/``perils`` map event ids to tokens (default FL/HU).
    """
    regions = regions or {}
    perils = perils or {}
    elt_regions = elt_regions or {}
    events = {r[1] for r in yet_rows} | {x.event_id for rows in eelts.values() for x in rows}
    catalogue = [EventCatalogRecord(e, regions.get(e, "FL"), perils.get(e, "HU")) for e in sorted(events)]
    pool = [EltMeta(e, elt_regions.get(e, "FL"), "HU") for e in sorted(eelts)]
    cols = list(zip(*yet_rows)) if yet_rows else [[], [], [], []]
    yet = YetTable(*cols)
    tables = {e: EeltTable.from_entries(rows) for e, rows in eelts.items()}
    return Dataset(yet, tuple(layers), tuple(pool), tables, tuple(catalogue), "hand-built\n")


SMALL = GeneratorConfig(
    seed=7, num_trials=40, events_per_trial=12, num_layers=6, elts_per_layer=3, catalogue_size=50
)


@pytest.fixture(scope="session")
def small_ds():
    return synthesize(SMALL)


@pytest.fixture(scope="session")
def seed42_ds():
    return synthesize(GeneratorConfig(seed=42, num_trials=1000, events_per_trial=100, num_layers=40, elts_per_layer=5))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
