"""SQL-like ad hoc query language.

Grammar (keywords case-insensitive)::

    query    = "SELECT" stat "FROM" "PORTFOLIO" [where] [group] [with] [marginal] ;
    stat     = "EP" "(" num {"," num} ")" | "VAR" "(" num ")" | "TVAR" "(" num ")"
             | "MEAN" | "STATS" | "DISTRIBUTION" ;
    where    = "WHERE" pred {"AND" pred} ;
    pred     = ident "IN" "(" lit {"," lit} ")" ;
    group    = "GROUP" "BY" key {"," key} ;
    key      = "region" | "peril" | "season" | "quarter" | "month" | "week" ;
    with     = "WITH" "SECONDARY" "UNCERTAINTY" ;
    marginal = "MARGINAL" "(" num {"," num} ")" ;

``VAR(a)`` and ``TVAR(a)`` take the tail probability ``a``: ``VAR(0.01)`` is
the 99% value-at-risk.  A query compiles into a :class:`QueryPlan` holding
the five stages consumed by the engine: layer selection, ELT selection,
event annotation, grouping and the reducer statistic.
"""

from __future__ import annotations

import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .tables import DataError, Dataset, EltMeta, EventCatalogRecord, LayerRecord

KEYWORDS = frozenset(
    "SELECT FROM PORTFOLIO WHERE AND IN GROUP BY WITH SECONDARY UNCERTAINTY MARGINAL "
    "EP VAR TVAR MEAN STATS DISTRIBUTION".split()
)
STAT_KINDS = ("EP", "VAR", "TVAR", "MEAN", "STATS", "DISTRIBUTION")
LAYER_COLUMNS = ("cob", "lob", "tob", "layer_id", "program_id")
ELT_COLUMNS = ("region", "peril", "elt_id")
ID_COLUMNS = frozenset({"layer_id", "program_id", "elt_id"})
PERIOD_BUCKETS = {"season": 4, "quarter": 4, "month": 12, "week": 52}
GROUP_KEYS = ("region", "peril", "season", "quarter", "month", "week")
MAX_MARGINAL = 10


class QueryError(Exception):
    """A query diagnostic; ``line``/``column`` are 1-based, or ``None`` when unlocated."""

    kind = "query error"

    def __init__(self, message, line=None, column=None, expected=(), source=None):
        self.message = message
        self.line = line
        self.column = column
        self.expected = tuple(sorted(set(expected)))
        self.source = source
        where = f" at line {line}, column {column}" if line is not None else ""
        exp = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{self.kind}{where}: {message}{exp}")

    def caret(self) -> str:
        """The offending source line with a caret under the error column."""
        if self.source is None or self.line is None:
            return str(self)
        text = self.source.splitlines()[self.line - 1] if self.source.splitlines() else ""
        return f"{text}\n{' ' * (self.column - 1)}^\n{self}"


class LexError(QueryError):
    kind = "lexical error"


class QuerySyntaxError(QueryError):
    kind = "syntax error"


class QuerySemanticError(QueryError):
    kind = "semantic error"


class AnnotationError(DataError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = self.missing[:20]
        super().__init__(f"events missing from the catalogue: {shown}{' ...' if len(self.missing) > 20 else ''}")


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Stat:
    kind: str
    args: tuple[float, ...] = ()


@dataclass(frozen=True)
class Predicate:
    column: str
    values: tuple


@dataclass(frozen=True)
class Query:
    stat: Stat
    layer_predicate: tuple[Predicate, ...] = ()
    elt_predicate: tuple[Predicate, ...] = ()
    group_by: tuple[str, ...] = ()
    secondary_uncertainty: bool = False
    marginal: tuple[int, ...] | None = None

    @property
    def period_kind(self) -> str | None:
        return next((k for k in self.group_by if k in PERIOD_BUCKETS), None)


# --------------------------------------------------------------------------
# lexer
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    kind: str  # KW, IDENT, NUM, STR, PUNCT, EOF
    text: str
    line: int
    column: int
    value: object = None


_NUM = re.compile(r"(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def tokenize(text: str) -> list[Token]:
    tokens = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            i, line, col = i + 1, line + 1, 1
            continue
        if ch in " \t\r":
            i, col = i + 1, col + 1
            continue
        if ch in "(),":
            tokens.append(Token("PUNCT", ch, line, col))
            i, col = i + 1, col + 1
            continue
        if ch == "'":
            j = i + 1
            buf = []
            while True:
                if j >= n or text[j] == "\n":
                    raise LexError("unterminated string literal", line, col, source=text)
                if text[j] == "'":
                    if j + 1 < n and text[j + 1] == "'":
                        buf.append("'")
                        j += 2
                        continue
                    break
                buf.append(text[j])
                j += 1
            tokens.append(Token("STR", text[i : j + 1], line, col, "".join(buf)))
            col += j + 1 - i
            i = j + 1
            continue
        m = _NUM.match(text, i)
        if m:
            raw = m.group()
            end = m.end()
            if end < n and (text[end].isalpha() or text[end] == "_"):
                raise LexError(f"malformed number {text[i:end + 1]!r}", line, col, source=text)
            is_int = raw.isdigit()
            tokens.append(Token("NUM", raw, line, col, int(raw) if is_int else float(raw)))
            col += end - i
            i = end
            continue
        m = _WORD.match(text, i)
        if m:
            word = m.group()
            if word.upper() in KEYWORDS:
                tokens.append(Token("KW", word.upper(), line, col))
            else:
                tokens.append(Token("IDENT", word.lower(), line, col))
            col += len(word)
            i = m.end()
            continue
        raise LexError(f"unexpected character {ch!r}", line, col, source=text)
    tokens.append(Token("EOF", "", line, col))
    return tokens


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = tokenize(text)
        self.pos = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def _fail(self, expected, tok=None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "EOF" else repr(tok.text)
        raise QuerySyntaxError(f"unexpected {found}", tok.line, tok.column, expected, self.text)

    def _semantic(self, message, tok):
        raise QuerySemanticError(message, tok.line, tok.column, source=self.text)

    def accept(self, kind, text=None):
        t = self.tok
        if t.kind == kind and (text is None or t.text == text):
            self.pos += 1
            return t
        return None

    def expect(self, kind, text=None):
        t = self.accept(kind, text)
        if t is None:
            self._fail([text or kind])
        return t

    def expect_kw(self, word):
        return self.expect("KW", word)

    def number_list(self):
        self.expect("PUNCT", "(")
        nums = [self.expect("NUM")]
        while self.accept("PUNCT", ","):
            nums.append(self.expect("NUM"))
        if not self.accept("PUNCT", ")"):
            self._fail([",", ")"])
        return nums

    def parse(self) -> Query:
        self.expect_kw("SELECT")
        stat = self.stat()
        self.expect_kw("FROM")
        self.expect_kw("PORTFOLIO")
        layer_preds, elt_preds = [], []
        if self.accept("KW", "WHERE"):
            while True:
                pred, tok = self.predicate()
                (layer_preds if pred.column in LAYER_COLUMNS else elt_preds).append(pred)
                if not self.accept("KW", "AND"):
                    break
        group_by = ()
        if self.accept("KW", "GROUP"):
            self.expect_kw("BY")
            group_by = self.group_keys()
        su = False
        if self.accept("KW", "WITH"):
            self.expect_kw("SECONDARY")
            self.expect_kw("UNCERTAINTY")
            su = True
        marginal = None
        if self.accept("KW", "MARGINAL"):
            marginal = self.marginal()
        if self.tok.kind != "EOF":
            self._fail(self._remaining(layer_preds or elt_preds, group_by, su, marginal))
        return Query(stat, tuple(layer_preds), tuple(elt_preds), group_by, su, marginal)

    @staticmethod
    def _remaining(where, group_by, su, marginal):
        # clause starters still legal after the clauses already parsed
        expected = ["end of input"]
        if marginal is None:
            expected.append("MARGINAL")
            if not su:
                expected.append("WITH")
                if not group_by:
                    expected.append("GROUP")
                    expected.append("AND" if where else "WHERE")
        if group_by and not su and marginal is None:
            expected.append(",")
        return expected

    def stat(self) -> Stat:
        t = self.tok
        if t.kind != "KW" or t.text not in STAT_KINDS:
            self._fail(STAT_KINDS)
        self.pos += 1
        if t.text in ("MEAN", "STATS", "DISTRIBUTION"):
            return Stat(t.text)
        nums = self.number_list()
        values = tuple(float(n.value) for n in nums)
        if t.text == "EP":
            for prev, cur, tok in zip(values, values[1:], nums[1:]):
                if not cur > prev:
                    self._semantic("EP thresholds must be strictly increasing", tok)
            return Stat("EP", values)
        if len(nums) != 1:
            self._semantic(f"{t.text} takes exactly one tail probability", nums[1])
        if not 0.0 < values[0] < 1.0:
            self._semantic(f"confidence level out of range (0, 1): {nums[0].text}", nums[0])
        return Stat(t.text, values)

    def predicate(self):
        col = self.tok
        if col.kind != "IDENT":
            self._fail(LAYER_COLUMNS + ELT_COLUMNS)
        self.pos += 1
        if col.text not in LAYER_COLUMNS + ELT_COLUMNS:
            self._semantic(f"unknown column {col.text!r}", col)
        self.expect_kw("IN")
        self.expect("PUNCT", "(")
        values = [self.literal(col)]
        while self.accept("PUNCT", ","):
            values.append(self.literal(col))
        if not self.accept("PUNCT", ")"):
            self._fail([",", ")"])
        return Predicate(col.text, tuple(dict.fromkeys(values))), col

    def literal(self, col):
        t = self.tok
        if t.kind not in ("STR", "NUM"):
            self._fail(["string literal", "number"])
        self.pos += 1
        if col.text in ID_COLUMNS:
            if t.kind != "NUM" or not isinstance(t.value, int) or t.value < 1:
                self._semantic(f"{col.text} values must be positive integers", t)
            return t.value
        if t.kind != "STR":
            self._semantic(f"{col.text} values must be quoted strings", t)
        return t.value

    def group_keys(self):
        keys = []
        while True:
            t = self.tok
            if t.kind != "IDENT" or t.text not in GROUP_KEYS:
                if t.kind == "IDENT":
                    self._semantic(f"unknown grouping key {t.text!r}", t)
                self._fail(GROUP_KEYS)
            self.pos += 1
            if t.text in keys:
                self._semantic(f"duplicate grouping key {t.text!r}", t)
            if t.text in PERIOD_BUCKETS and any(k in PERIOD_BUCKETS for k in keys):
                self._semantic("at most one period grouping is allowed", t)
            keys.append(t.text)
            if not self.accept("PUNCT", ","):
                break
        return tuple(sorted(keys, key=lambda k: min(GROUP_KEYS.index(k), 2)))

    def marginal(self):
        nums = self.number_list()
        ids = []
        for n in nums:
            if not isinstance(n.value, int) or n.value < 1:
                self._semantic("marginal candidates must be positive layer ids", n)
            if n.value in ids:
                self._semantic(f"duplicate marginal candidate {n.value}", n)
            ids.append(n.value)
        if len(ids) > MAX_MARGINAL:
            self._semantic(f"at most {MAX_MARGINAL} marginal candidates", nums[MAX_MARGINAL])
        return tuple(ids)


def parse_query(text: str) -> Query:
    """Parse one query statement; raises a :class:`QueryError` subclass on failure."""
    if not isinstance(text, str):
        raise TypeError("query text must be a string")
    return _Parser(text).parse()


def _num(x) -> str:
    return str(x) if isinstance(x, int) else repr(float(x))


def _lit(v) -> str:
    return str(v) if isinstance(v, int) else "'" + str(v).replace("'", "''") + "'"


def format_query(q: Query) -> str:
    parts = ["SELECT", q.stat.kind if not q.stat.args else f"{q.stat.kind}({', '.join(map(_num, q.stat.args))})"]
    parts += ["FROM", "PORTFOLIO"]
    preds = q.layer_predicate + q.elt_predicate
    if preds:
        parts.append("WHERE " + " AND ".join(f"{p.column} IN ({', '.join(map(_lit, p.values))})" for p in preds))
    if q.group_by:
        parts.append("GROUP BY " + ", ".join(q.group_by))
    if q.secondary_uncertainty:
        parts.append("WITH SECONDARY UNCERTAINTY")
    if q.marginal is not None:
        parts.append(f"MARGINAL({', '.join(map(str, q.marginal))})")
    return " ".join(parts)


# --------------------------------------------------------------------------
# filters (query stages Q1-Q3)
# --------------------------------------------------------------------------


def _matches(record, preds: Iterable[Predicate]) -> bool:
    return all(getattr(record, p.column) in p.values for p in preds)


def apply_layer_filter(query: Query, layers: Sequence[LayerRecord]) -> list[int]:
    return sorted(layer.layer_id for layer in layers if _matches(layer, query.layer_predicate))


def apply_elt_filter(query: Query, selected_layers: Iterable[LayerRecord], pool: Sequence[EltMeta]) -> list[int]:
    covered = {e for layer in selected_layers for e in layer.elt_ids}
    return sorted(m.elt_id for m in pool if m.elt_id in covered and _matches(m, query.elt_predicate))


def apply_event_filter(
    query: Query, catalogue: Sequence[EventCatalogRecord], yet_event_ids: Iterable[int] | None = None
) -> dict[int, tuple[str | None, str | None]]:
    """Event annotations needed by the grouping; empty when no attribute is grouped on."""
    want_region = "region" in query.group_by
    want_peril = "peril" in query.group_by
    if not (want_region or want_peril):
        return {}
    annotations = {
        c.event_id: (c.region if want_region else None, c.peril if want_peril else None) for c in catalogue
    }
    if yet_event_ids is not None:
        missing = set(yet_event_ids) - annotations.keys()
        if missing:
            raise AnnotationError(missing)
    return annotations


# --------------------------------------------------------------------------
# plan (stages Q4-Q5)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupingSpec:
    by_region: bool = False
    by_peril: bool = False
    period_kind: str | None = None

    @property
    def buckets(self) -> int:
        return PERIOD_BUCKETS[self.period_kind] if self.period_kind else 1

    @property
    def is_total(self) -> bool:
        return not (self.by_region or self.by_peril or self.period_kind)


def period_bucket(position: int, num_events: int, buckets: int) -> int:
    """Bucket ``ceil(position * buckets / num_events)`` of a 1-based ordinal position."""
    return min(buckets, max(1, -(-position * buckets // num_events)))


@dataclass(frozen=True)
class StatSpec:
    kind: str
    thresholds: tuple[float, ...] = ()
    confidence: float | None = None


def stat_spec(stat: Stat) -> StatSpec:
    if stat.kind == "EP":
        return StatSpec("EP", thresholds=stat.args)
    if stat.kind in ("VAR", "TVAR"):
        return StatSpec(stat.kind, confidence=1.0 - stat.args[0])
    return StatSpec(stat.kind)


@dataclass(frozen=True)
class QueryPlan:
    layer_ids: tuple[int, ...]
    elt_ids: tuple[int, ...]
    annotations: Mapping[int, tuple[str | None, str | None]]
    grouping: GroupingSpec
    stat: StatSpec
    secondary_uncertainty: bool = False
    marginal: tuple[int, ...] = ()
    marginal_elt_ids: tuple[int, ...] = ()
    query_text: str = ""
    query: Query | None = field(default=None, compare=False)

    def with_layers(self, layer_ids, elt_ids) -> QueryPlan:
        from dataclasses import replace

        return replace(self, layer_ids=tuple(layer_ids), elt_ids=tuple(elt_ids), marginal=(), marginal_elt_ids=())


def compile_query(query: Query, dataset: Dataset, text: str | None = None) -> QueryPlan:
    """Resolve a parsed query against a dataset into the five-stage plan."""
    layer_map = dataset.layer_map()
    selected = apply_layer_filter(query, dataset.layers)
    candidates = tuple(query.marginal or ())
    for c in candidates:
        if c not in layer_map:
            raise QuerySemanticError(f"marginal candidate {c} is not a layer of the portfolio")
    explicit_ids = set()
    for p in query.layer_predicate:
        if p.column == "layer_id":
            explicit_ids |= set(p.values)
    overlap = sorted(explicit_ids & set(candidates))
    if overlap:
        raise QuerySemanticError(f"marginal candidates {overlap} overlap the base layer selection")
    base = [lid for lid in selected if lid not in candidates]
    elt_ids = apply_elt_filter(query, (layer_map[i] for i in base), dataset.pool)
    cand_elts = apply_elt_filter(query, (layer_map[i] for i in candidates), dataset.pool)
    yet_events = dataset.yet.event_id.tolist() if len(dataset.yet) else []
    annotations = apply_event_filter(query, dataset.catalogue, set(yet_events))
    grouping = GroupingSpec("region" in query.group_by, "peril" in query.group_by, query.period_kind)
    return QueryPlan(
        layer_ids=tuple(base),
        elt_ids=tuple(elt_ids),
        annotations=annotations,
        grouping=grouping,
        stat=stat_spec(query.stat),
        secondary_uncertainty=query.secondary_uncertainty,
        marginal=candidates,
        marginal_elt_ids=tuple(cand_elts),
        query_text=text if text is not None else format_query(query),
        query=query,
    )
