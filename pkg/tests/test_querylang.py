import itertools
import random

import pytest
from conftest import hand_dataset, layer
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import elt_set_algebra, layer_scan

from aggrisk.querylang import (
    AnnotationError,
    LexError,
    Predicate,
    QueryError,
    QuerySemanticError,
    QuerySyntaxError,
    Stat,
    apply_elt_filter,
    apply_event_filter,
    apply_layer_filter,
    compile_query,
    format_query,
    parse_query,
    period_bucket,
    tokenize,
)
from aggrisk.tables import EltMeta, EventCatalogRecord

FLORIDA = (
    "SELECT VAR(0.01) FROM PORTFOLIO WHERE lob IN ('commercial') AND region IN ('FL') "
    "AND peril IN ('HU','FLD') GROUP BY season"
)

EXAMPLES = [
    FLORIDA,
    "SELECT MEAN FROM PORTFOLIO",
    "select ep(1e6, 2.5e7, 1e8) from portfolio where layer_id in (1, 2, 3) group by region, peril",
    "SELECT TVAR(0.05) FROM PORTFOLIO GROUP BY peril, week WITH SECONDARY UNCERTAINTY",
    "SELECT STATS FROM PORTFOLIO WHERE cob IN ('property') AND elt_id IN (4) MARGINAL (7, 9)",
    "SELECT DISTRIBUTION FROM PORTFOLIO GROUP BY month",
    "SELECT VAR(0.2) FROM PORTFOLIO WHERE tob IN ('xol') AND program_id IN (2) GROUP BY quarter, region",
]


def test_florida_query_ast():
    q = parse_query(FLORIDA)
    assert q.stat == Stat("VAR", (0.01,))
    assert q.layer_predicate == (Predicate("lob", ("commercial",)),)
    assert q.elt_predicate == (Predicate("region", ("FL",)), Predicate("peril", ("HU", "FLD")))
    assert q.group_by == ("season",)
    assert q.period_kind == "season"
    assert not q.secondary_uncertainty and q.marginal is None


def test_minimal_query():
    q = parse_query("SELECT MEAN FROM PORTFOLIO")
    assert q.stat == Stat("MEAN") and not q.layer_predicate and not q.elt_predicate and q.group_by == ()


def test_keywords_case_insensitive():
    assert parse_query("select mean from Portfolio") == parse_query("SELECT MEAN FROM PORTFOLIO")


@pytest.mark.parametrize("text", EXAMPLES)
def test_round_trip(text):
    q = parse_query(text)
    assert parse_query(format_query(q)) == q


def test_confidence_out_of_range_is_semantic():
    with pytest.raises(QuerySemanticError) as info:
        parse_query("SELECT VAR(1.5) FROM PORTFOLIO")
    assert info.value.line == 1 and info.value.column == 12


@pytest.mark.parametrize(
    "text, error",
    [
        ("SELECT MEAN FROM PORTFOLIO WHERE colour IN ('red')", QuerySemanticError),
        ("SELECT EP(5, 3) FROM PORTFOLIO", QuerySemanticError),
        ("SELECT VAR(0.1, 0.2) FROM PORTFOLIO", QuerySemanticError),
        ("SELECT MEAN FROM PORTFOLIO GROUP BY season, month", QuerySemanticError),
        ("SELECT MEAN FROM PORTFOLIO MARGINAL (1, 1)", QuerySemanticError),
        ("SELECT MEAN FROM PORTFOLIO MARGINAL (1,2,3,4,5,6,7,8,9,10,11)", QuerySemanticError),
        ("SELECT MEAN FROM PORTFOLIO WHERE layer_id IN ('a')", QuerySemanticError),
        ("SELECT MEAN FROM PORTFOLIO WHERE lob IN (3)", QuerySemanticError),
        ("SELECT MEAN FROM PORTFOLIO WHERE lob IN ('x", LexError),
        ("SELECT MEAN FROM PORTFOLIO @", LexError),
        ("SELECT FROM PORTFOLIO", QuerySyntaxError),
        ("SELECT MEAN FROM PORTFOLIO GROUP region", QuerySyntaxError),
        ("SELECT MEAN PORTFOLIO", QuerySyntaxError),
        ("", QuerySyntaxError),
    ],
)
def test_error_classes(text, error):
    with pytest.raises(error) as info:
        parse_query(text)
    assert isinstance(info.value, QueryError)


def test_error_classes_are_distinct():
    assert len({LexError, QuerySyntaxError, QuerySemanticError}) == 3
    assert not issubclass(LexError, QuerySyntaxError) and not issubclass(QuerySemanticError, QuerySyntaxError)


def test_syntax_diagnostic_location_and_expected():
    text = "SELECT MEAN\nFROM PORTFOLIO\nGROUP BY colour"
    with pytest.raises(QueryError) as info:
        parse_query(text)
    assert (info.value.line, info.value.column) == (3, 10)
    with pytest.raises(QuerySyntaxError) as info:
        parse_query("SELECT MEAN FROM PORTFOLIO WHERE")
    assert "lob" in info.value.expected and "region" in info.value.expected
    lines = info.value.caret().splitlines()
    assert lines[1].index("^") == len("SELECT MEAN FROM PORTFOLIO WHERE")


def test_tokenize_positions():
    toks = tokenize("SELECT\n  EP(1)")
    assert [(t.kind, t.line, t.column) for t in toks[:3]] == [("KW", 1, 1), ("KW", 2, 3), ("PUNCT", 2, 5)]


VOCAB = (
    "SELECT FROM PORTFOLIO WHERE AND IN GROUP BY WITH SECONDARY UNCERTAINTY MARGINAL EP VAR TVAR MEAN "
    "STATS DISTRIBUTION region peril season month week lob cob layer_id elt_id foo"
).split() + ["(", ")", ",", "'FL'", "'x", "0.01", "1e6", "3", "-", "@", "''", "1.5", ".", "\n", "\t", "é"]


def test_parse_is_total_fuzz():
    rng = random.Random(2024)
    outcomes = {"ok": 0, "error": 0}
    for _ in range(100_000):
        n = rng.randint(0, 14)
        text = " ".join(rng.choice(VOCAB) for _ in range(n))
        if rng.random() < 0.1:
            text = "".join(rng.choice("SELECT(),'.0123 eE-_@\n") for _ in range(rng.randint(0, 20)))
        try:
            parse_query(text)
            outcomes["ok"] += 1
        except QueryError as exc:
            assert exc.line is None or exc.line >= 1
            outcomes["error"] += 1
    assert outcomes["error"] > 0


@settings(max_examples=300)
@given(st.text(max_size=60))
def test_parse_is_total_on_arbitrary_text(text):
    try:
        parse_query(text)
    except QueryError:
        pass


# --------------------------------------------------------------------------
# filters
# --------------------------------------------------------------------------

LOBS = ("commercial", "marine", "residential")
COBS = ("property", "casualty")


def _portfolio(seed):
    rng = random.Random(seed)
    pool = [EltMeta(e, rng.choice(("FL", "TX", "JP")), rng.choice(("HU", "EQ"))) for e in range(1, 16)]
    layers = [
        layer(i, rng.sample(range(1, 16), rng.randint(1, 4)), program_id=rng.randint(1, 3), cob=rng.choice(COBS),
              lob=rng.choice(LOBS))  # fmt: skip
        for i in range(1, 21)
    ]
    return rng, layers, pool


def _random_where(rng):
    preds = {}
    if rng.random() < 0.5:
        preds["lob"] = set(rng.sample(LOBS, rng.randint(1, 2)))
    if rng.random() < 0.4:
        preds["cob"] = {rng.choice(COBS)}
    if rng.random() < 0.3:
        preds["program_id"] = set(rng.sample(range(1, 4), 2))
    if rng.random() < 0.3:
        preds["layer_id"] = set(rng.sample(range(1, 25), 10))
    if rng.random() < 0.5:
        preds["region"] = set(rng.sample(("FL", "TX", "JP"), rng.randint(1, 2)))
    if rng.random() < 0.4:
        preds["peril"] = {rng.choice(("HU", "EQ"))}
    return preds


def _where_text(preds):
    def lit(v):
        return str(v) if isinstance(v, int) else f"'{v}'"

    parts = [f"{c} IN ({', '.join(lit(v) for v in sorted(vals))})" for c, vals in preds.items()]
    return (" WHERE " + " AND ".join(parts)) if parts else ""


def test_layer_filter_examples():
    layers = [layer(1, [1], lob="commercial"), layer(2, [1], lob="marine"), layer(3, [1], lob="commercial")]
    assert apply_layer_filter(parse_query("SELECT MEAN FROM PORTFOLIO WHERE lob IN ('commercial')"), layers) == [1, 3]
    assert apply_layer_filter(parse_query("SELECT MEAN FROM PORTFOLIO"), layers) == [1, 2, 3]


def test_elt_filter_examples():
    pool = [EltMeta(1, "TX", "HU"), EltMeta(2, "FL", "HU"), EltMeta(3, "JP", "EQ"), EltMeta(4, "FL", "HU")]
    sel = [layer(1, [1, 2]), layer(2, [2, 3])]
    assert apply_elt_filter(parse_query("SELECT MEAN FROM PORTFOLIO WHERE region IN ('FL')"), sel, pool) == [2]
    assert apply_elt_filter(parse_query("SELECT MEAN FROM PORTFOLIO"), sel, pool) == [1, 2, 3]


@pytest.mark.parametrize("seed", range(40))
def test_filters_match_brute_force(seed):
    rng, layers, pool = _portfolio(seed)
    preds = _random_where(rng)
    q = parse_query("SELECT MEAN FROM PORTFOLIO" + _where_text(preds))
    layer_preds = {c: v for c, v in preds.items() if c in ("lob", "cob", "program_id", "layer_id")}
    elt_preds = {c: v for c, v in preds.items() if c in ("region", "peril")}
    selected = apply_layer_filter(q, layers)
    assert selected == layer_scan(layers, layer_preds)
    chosen = [x for x in layers if x.layer_id in selected]
    assert apply_elt_filter(q, chosen, pool) == elt_set_algebra(chosen, pool, elt_preds)


@pytest.mark.parametrize("seed", range(20))
def test_filters_are_monotone(seed):
    rng, layers, pool = _portfolio(seed)
    preds = _random_where(rng)
    items = list(preds.items())
    for k in range(len(items)):
        fewer = dict(items[:k])
        more = dict(items[: k + 1])
        q_few = parse_query("SELECT MEAN FROM PORTFOLIO" + _where_text(fewer))
        q_more = parse_query("SELECT MEAN FROM PORTFOLIO" + _where_text(more))
        l_few, l_more = apply_layer_filter(q_few, layers), apply_layer_filter(q_more, layers)
        assert set(l_more) <= set(l_few)
        e_few = apply_elt_filter(q_few, [x for x in layers if x.layer_id in l_few], pool)
        e_more = apply_elt_filter(q_more, [x for x in layers if x.layer_id in l_more], pool)
        assert set(e_more) <= set(e_few)


def test_event_filter():
    cat = [EventCatalogRecord(1, "FL", "HU"), EventCatalogRecord(2, "TX", "EQ")]
    assert apply_event_filter(parse_query("SELECT MEAN FROM PORTFOLIO GROUP BY region"), cat) == {
        1: ("FL", None),
        2: ("TX", None),
    }
    assert apply_event_filter(parse_query("SELECT MEAN FROM PORTFOLIO GROUP BY season"), cat) == {}
    both = apply_event_filter(parse_query("SELECT MEAN FROM PORTFOLIO GROUP BY region, peril"), cat)
    assert len(both) == len(cat)
    with pytest.raises(AnnotationError) as info:
        apply_event_filter(parse_query("SELECT MEAN FROM PORTFOLIO GROUP BY peril"), cat, [1, 2, 5, 9])
    assert info.value.missing == [5, 9]


def test_event_filter_covers_generated_catalogue(small_ds):
    q = parse_query("SELECT MEAN FROM PORTFOLIO GROUP BY region, peril")
    assert len(apply_event_filter(q, small_ds.catalogue)) == len(small_ds.catalogue)


def test_period_bucket():
    assert [period_bucket(t, 100, 4) for t in (1, 25, 26, 50, 51, 75, 76, 100)] == [1, 1, 2, 2, 3, 3, 4, 4]
    assert period_bucket(1, 1, 52) == 52 and period_bucket(3, 3, 12) == 12
    for m, k in itertools.product(range(1, 30), (4, 12, 52)):
        buckets = [period_bucket(t, m, k) for t in range(1, m + 1)]
        assert buckets == sorted(buckets) and 1 <= buckets[0] and buckets[-1] == k


def test_compile_plan(small_ds):
    q = parse_query("SELECT VAR(0.01) FROM PORTFOLIO WHERE region IN ('FL') GROUP BY region")
    plan = compile_query(q, small_ds)
    covered = {e for lid in plan.layer_ids for e in small_ds.layer_map()[lid].elt_ids}
    assert set(plan.elt_ids) <= covered
    assert plan.stat.confidence == pytest.approx(0.99)
    assert plan.grouping.by_region and not plan.grouping.by_peril


def test_compile_marginal_overlap_is_error(small_ds):
    q = parse_query("SELECT MEAN FROM PORTFOLIO WHERE layer_id IN (1, 2) MARGINAL (2)")
    with pytest.raises(QuerySemanticError):
        compile_query(q, small_ds)
    with pytest.raises(QuerySemanticError):
        compile_query(parse_query("SELECT MEAN FROM PORTFOLIO MARGINAL (999)"), small_ds)
    plan = compile_query(parse_query("SELECT MEAN FROM PORTFOLIO MARGINAL (3)"), small_ds)
    assert 3 not in plan.layer_ids and plan.marginal == (3,)


def test_compile_reports_unannotated_events():
    ds = hand_dataset([layer(1, [1])], {1: []}, [(1, 5, 1, 0.1)])
    ds = type(ds)(ds.yet, ds.layers, ds.pool, ds.eelts, (), ds.manifest)
    with pytest.raises(AnnotationError):
        compile_query(parse_query("SELECT MEAN FROM PORTFOLIO GROUP BY region"), ds)
