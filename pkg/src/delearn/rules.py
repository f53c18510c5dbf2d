"""Expert rule sets: AST, a small text DSL, a JSON mirror and boolean evaluation.

Text form::

    # positive ("unqualified") when any constraint fails
    rule surface cnf {
      and {
        leaf m0 below 5.0
        or { leaf m1 below 3.5  leaf m2 above 0.5 frozen }
      }
    }
    measure m0 = count where type == "scratch"
    measure m1 = max length where type == "dent" and width > 2
    measure m2 = count

Whitespace (including newlines) only separates tokens; ``#`` starts a
comment.  Each measurement is used by exactly one leaf and the leaf carries
that measurement's expert threshold.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from .data import CATEGORICAL, NUMERIC, Schema

EQUALS, LESS, GREATER = "==", "<", ">"
COUNT, MAX = "count", "max"
BELOW, ABOVE = "below", "above"
AND, OR = "and", "or"


class RuleError(ValueError):
    """Invalid rule set (bad reference, schema mismatch, shape violation)."""


class RuleSyntaxError(RuleError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {msg}")
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Predicate:
    column: str
    op: str
    value: Union[float, str]

    def __post_init__(self):
        if self.op not in (EQUALS, LESS, GREATER):
            raise RuleError(f"unknown comparison {self.op!r}")


@dataclass(frozen=True)
class Measurement:
    id: int
    aggregation: str
    target: str | None = None
    predicates: tuple[Predicate, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))
        if self.aggregation not in (COUNT, MAX):
            raise RuleError(f"unknown aggregation {self.aggregation!r}")
        if self.aggregation == MAX and not self.target:
            raise RuleError(f"measurement m{self.id}: max needs a target column")
        if self.aggregation == COUNT and self.target is not None:
            raise RuleError(f"measurement m{self.id}: count takes no target column")

    @property
    def name(self) -> str:
        return f"m{self.id}"

    def describe(self) -> str:
        head = "count" if self.aggregation == COUNT else f"max {self.target}"
        if not self.predicates:
            return head
        return head + " where " + " and ".join(
            f"{p.column} {p.op} {_lit(p.value)}" for p in self.predicates
        )


@dataclass(frozen=True)
class Leaf:
    measurement_id: int
    direction: str = BELOW
    frozen: bool = False

    def __post_init__(self):
        if self.direction not in (BELOW, ABOVE):
            raise RuleError(f"unknown leaf direction {self.direction!r}")


@dataclass(frozen=True)
class Logic:
    op: str
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if self.op not in (AND, OR):
            raise RuleError(f"unknown logic operator {self.op!r}")
        if not self.children:
            raise RuleError(f"empty {self.op} node")


Node = Union[Leaf, Logic]


def iter_leaves(node: Node) -> Iterator[Leaf]:
    if isinstance(node, Leaf):
        yield node
    else:
        for child in node.children:
            yield from iter_leaves(child)


def is_cnf(root: Node) -> bool:
    """True when ``root`` is an AND of leaves and ORs-of-leaves."""
    if not isinstance(root, Logic) or root.op != AND:
        return False
    for child in root.children:
        if isinstance(child, Leaf):
            continue
        if child.op != OR or not all(isinstance(c, Leaf) for c in child.children):
            return False
    return True


@dataclass(frozen=True, eq=False)
class RuleSet:
    """Validated rule tree, its measurements and the expert thresholds."""

    name: str
    root: Node
    measurements: tuple[Measurement, ...]
    theta: tuple[float, ...]
    cnf: bool = False

    def __post_init__(self):
        object.__setattr__(self, "measurements", tuple(self.measurements))
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        self._validate()

    def _validate(self) -> None:
        ids = [m.id for m in self.measurements]
        seen = set()
        for i in ids:
            if i in seen:
                raise RuleError(f"duplicate measurement id m{i}")
            seen.add(i)
        if sorted(ids) != list(range(len(ids))):
            raise RuleError(f"measurement ids must be contiguous m0..m{len(ids) - 1}")
        if [m.id for m in self.measurements] != list(range(len(ids))):
            object.__setattr__(
                self, "measurements", tuple(sorted(self.measurements, key=lambda m: m.id))
            )
        used: dict[int, int] = {}
        for leaf in iter_leaves(self.root):
            if leaf.measurement_id not in seen:
                raise RuleError(f"unknown measurement m{leaf.measurement_id}")
            used[leaf.measurement_id] = used.get(leaf.measurement_id, 0) + 1
        for k in sorted(seen):
            if used.get(k, 0) == 0:
                raise RuleError(f"measurement m{k} is not used by any leaf")
            if used[k] > 1:
                raise RuleError(f"measurement m{k} is used by more than one leaf")
        if len(self.theta) != len(ids):
            raise RuleError(f"theta has {len(self.theta)} values for {len(ids)} measurements")
        if not all(np.isfinite(self.theta)):
            raise RuleError("theta values must be finite")
        if self.cnf and not is_cnf(self.root):
            raise RuleError("rule is flagged cnf but is not an AND of leaves / ORs of leaves")

    @property
    def n_measurements(self) -> int:
        return len(self.measurements)

    @property
    def leaves(self) -> dict[int, Leaf]:
        return {leaf.measurement_id: leaf for leaf in iter_leaves(self.root)}

    @property
    def frozen_mask(self) -> np.ndarray:
        leaves = self.leaves
        return np.array([leaves[k].frozen for k in range(self.n_measurements)], dtype=bool)

    @property
    def theta_array(self) -> np.ndarray:
        return np.array(self.theta, dtype=np.float64)

    def with_theta(self, theta) -> "RuleSet":
        return RuleSet(self.name, self.root, self.measurements, tuple(map(float, theta)), self.cnf)

    def check_schema(self, schema: Schema) -> None:
        for m in self.measurements:
            if m.target is not None:
                if not schema.has(m.target):
                    raise RuleError(f"m{m.id}: unknown column {m.target!r}")
                if schema.column(m.target).kind != NUMERIC:
                    raise RuleError(f"m{m.id}: max needs a numeric column, {m.target!r} is categorical")
            for p in m.predicates:
                if not schema.has(p.column):
                    raise RuleError(f"m{m.id}: unknown column {p.column!r}")
                kind = schema.column(p.column).kind
                if kind == CATEGORICAL:
                    if p.op != EQUALS:
                        raise RuleError(f"m{m.id}: only == is allowed on categorical column {p.column!r}")
                    if not isinstance(p.value, str):
                        raise RuleError(f"m{m.id}: categorical column {p.column!r} compared to a number")
                elif isinstance(p.value, str):
                    raise RuleError(f"m{m.id}: numeric column {p.column!r} compared to a string")

    def same_as(self, other: "RuleSet") -> bool:
        return (
            self.name == other.name
            and self.cnf == other.cnf
            and self.root == other.root
            and self.measurements == other.measurements
            and self.theta == other.theta
        )

    def __eq__(self, other):
        return isinstance(other, RuleSet) and self.same_as(other)

    __hash__ = None


# --------------------------------------------------------------------------
# tokenizer / parser
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<number>[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?|[+-]?inf\b)
  | (?P<op>==|<|>|=|\{|\})
  | (?P<word>[A-Za-z_][A-Za-z0-9_.]*)
  """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


_MEASURE_ID = re.compile(r"m(\d+)$")


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.cur
        return RuleSyntaxError(msg, tok.line, tok.col)

    def advance(self) -> _Tok:
        tok = self.cur
        self.i += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Tok:
        tok = self.cur
        if tok.kind != kind or (text is not None and tok.text != text):
            want = repr(text) if text is not None else kind
            got = repr(tok.text) if tok.kind != "eof" else "end of input"
            raise self.error(f"expected {want}, got {got}")
        return self.advance()

    def at(self, kind: str, text: str | None = None) -> bool:
        return self.cur.kind == kind and (text is None or self.cur.text == text)

    def measure_id(self) -> int:
        tok = self.expect("word")
        m = _MEASURE_ID.match(tok.text)
        if not m:
            raise self.error(f"expected a measurement id like m0, got {tok.text!r}", tok)
        return int(m.group(1))

    def number(self) -> float:
        tok = self.expect("number")
        return float(tok.text)

    def parse(self):
        rule = None
        measurements = []
        while not self.at("eof"):
            if self.at("word", "rule"):
                start = self.cur
                if rule is not None:
                    raise self.error("only one rule block is allowed", start)
                rule = self.rule()
            elif self.at("word", "measure"):
                measurements.append(self.measure())
            else:
                raise self.error(f"expected 'rule' or 'measure', got {self.cur.text!r}")
        if rule is None:
            raise self.error("no rule block found")
        return rule, measurements

    def rule(self):
        self.expect("word", "rule")
        name = self.expect("word").text
        cnf = False
        if self.at("word", "cnf"):
            self.advance()
            cnf = True
        self.expect("op", "{")
        leaf_theta: dict[int, float] = {}
        root = self.node(leaf_theta)
        self.expect("op", "}")
        return name, cnf, root, leaf_theta

    def node(self, leaf_theta):
        tok = self.cur
        if self.at("word", "leaf"):
            self.advance()
            mid = self.measure_id()
            direction = self.expect("word").text
            if direction not in (BELOW, ABOVE):
                raise self.error(f"expected 'below' or 'above', got {direction!r}", self.toks[self.i - 1])
            theta = self.number()
            frozen = False
            if self.at("word", "frozen"):
                self.advance()
                frozen = True
            if mid in leaf_theta:
                raise self.error(f"measurement m{mid} is used by more than one leaf", tok)
            leaf_theta[mid] = theta
            return Leaf(mid, direction, frozen)
        if self.at("word", AND) or self.at("word", OR):
            op = self.advance().text
            self.expect("op", "{")
            children = []
            while not self.at("op", "}"):
                if self.at("eof"):
                    raise self.error(f"unterminated {op} block")
                children.append(self.node(leaf_theta))
            if not children:
                raise self.error(f"empty {op} node", tok)
            self.expect("op", "}")
            return Logic(op, tuple(children))
        raise self.error(f"expected 'and', 'or' or 'leaf', got {tok.text!r}")

    def measure(self) -> tuple[Measurement, _Tok]:
        self.expect("word", "measure")
        tok = self.cur
        mid = self.measure_id()
        self.expect("op", "=")
        agg = self.expect("word").text
        target = None
        if agg == MAX:
            target = self.expect("word").text
        elif agg != COUNT:
            raise self.error(f"unknown aggregation {agg!r}", self.toks[self.i - 1])
        preds = []
        if self.at("word", "where"):
            self.advance()
            preds.append(self.predicate())
            while self.at("word", "and"):
                self.advance()
                preds.append(self.predicate())
        return Measurement(mid, agg, target, tuple(preds)), tok

    def predicate(self) -> Predicate:
        col = self.expect("word").text
        op_tok = self.cur
        if not (self.at("op", "==") or self.at("op", "<") or self.at("op", ">")):
            raise self.error(f"expected ==, < or >, got {op_tok.text!r}")
        op = self.advance().text
        if self.at("string"):
            value: float | str = json.loads(self.advance().text)
        elif self.at("number"):
            value = self.number()
        else:
            raise self.error(f"expected a number or string literal, got {self.cur.text!r}")
        return Predicate(col, op, value)


def parse_ruleset(text: str, schema: Schema | None = None) -> RuleSet:
    """Parse DSL source into a validated :class:`RuleSet`."""
    parser = _Parser(text)
    (name, cnf, root, leaf_theta), measured = parser.parse()
    seen: dict[int, _Tok] = {}
    for m, tok in measured:
        if m.id in seen:
            raise RuleSyntaxError(f"duplicate measurement id m{m.id}", tok.line, tok.col)
        seen[m.id] = tok
    measurements = [m for m, _ in measured]
    known = {m.id for m in measurements}
    for leaf in iter_leaves(root):
        if leaf.measurement_id not in known:
            raise RuleError(f"unknown measurement m{leaf.measurement_id}")
    theta = [leaf_theta.get(k, np.nan) for k in range(len(measurements))]
    rs = RuleSet(name, root, tuple(measurements), tuple(theta), cnf)
    if schema is not None:
        rs.check_schema(schema)
    return rs


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _lit(v) -> str:
    if isinstance(v, str):
        return json.dumps(v)
    return repr(float(v))


def _dump_node(node: Node, theta, indent: int) -> list[str]:
    pad = "  " * indent
    if isinstance(node, Leaf):
        s = f"{pad}leaf m{node.measurement_id} {node.direction} {_lit(theta[node.measurement_id])}"
        return [s + (" frozen" if node.frozen else "")]
    lines = [f"{pad}{node.op} {{"]
    for child in node.children:
        lines.extend(_dump_node(child, theta, indent + 1))
    lines.append(pad + "}")
    return lines


def dumps_ruleset(rs: RuleSet) -> str:
    head = f"rule {rs.name}" + (" cnf" if rs.cnf else "") + " {"
    lines = [head, *_dump_node(rs.root, rs.theta, 1), "}"]
    for m in rs.measurements:
        lines.append(f"measure {m.name} = {m.describe()}")
    return "\n".join(lines) + "\n"


def _node_to_json(node: Node, theta) -> dict:
    if isinstance(node, Leaf):
        return {
            "leaf": f"m{node.measurement_id}",
            "direction": node.direction,
            "theta": theta[node.measurement_id],
            "frozen": node.frozen,
        }
    return {node.op: [_node_to_json(c, theta) for c in node.children]}


def ruleset_to_json(rs: RuleSet) -> dict:
    return {
        "name": rs.name,
        "cnf": rs.cnf,
        "tree": _node_to_json(rs.root, rs.theta),
        "measurements": [
            {
                "id": m.name,
                "aggregation": m.aggregation,
                "target": m.target,
                "where": [{"column": p.column, "op": p.op, "value": p.value} for p in m.predicates],
            }
            for m in rs.measurements
        ],
    }


def _node_from_json(d: dict, leaf_theta: dict) -> Node:
    if "leaf" in d:
        mid = _json_mid(d["leaf"])
        if mid in leaf_theta:
            raise RuleError(f"measurement m{mid} is used by more than one leaf")
        leaf_theta[mid] = float(d["theta"])
        return Leaf(mid, d.get("direction", BELOW), bool(d.get("frozen", False)))
    ops = [k for k in (AND, OR) if k in d]
    if len(ops) != 1:
        raise RuleError(f"tree node needs exactly one of leaf/and/or: {d!r}")
    children = d[ops[0]]
    if not children:
        raise RuleError(f"empty {ops[0]} node")
    return Logic(ops[0], tuple(_node_from_json(c, leaf_theta) for c in children))


def _json_mid(v) -> int:
    if isinstance(v, int):
        return v
    m = _MEASURE_ID.match(str(v))
    if not m:
        raise RuleError(f"bad measurement id {v!r}")
    return int(m.group(1))


def ruleset_from_json(d: dict, schema: Schema | None = None) -> RuleSet:
    leaf_theta: dict[int, float] = {}
    root = _node_from_json(d["tree"], leaf_theta)
    measurements = []
    for md in d["measurements"]:
        preds = []
        for p in md.get("where", []):
            v = p["value"]
            preds.append(Predicate(p["column"], p["op"], v if isinstance(v, str) else float(v)))
        measurements.append(Measurement(_json_mid(md["id"]), md["aggregation"], md.get("target"), tuple(preds)))
    ids = [m.id for m in measurements]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise RuleError(f"duplicate measurement id m{dup}")
    for k in leaf_theta:
        if k not in ids:
            raise RuleError(f"unknown measurement m{k}")
    theta = [leaf_theta.get(k, np.nan) for k in range(len(measurements))]
    rs = RuleSet(d.get("name", "rule"), root, tuple(measurements), tuple(theta), bool(d.get("cnf", False)))
    if schema is not None:
        rs.check_schema(schema)
    return rs


def load_ruleset(path, schema: Schema | None = None) -> RuleSet:
    from pathlib import Path

    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.name.endswith(".json"):
        return ruleset_from_json(json.loads(text), schema)
    return parse_ruleset(text, schema)


def save_ruleset(rs: RuleSet, path) -> None:
    from pathlib import Path

    path = Path(path)
    if path.name.endswith(".json"):
        path.write_text(json.dumps(ruleset_to_json(rs), indent=2) + "\n")
    else:
        path.write_text(dumps_ruleset(rs))


# --------------------------------------------------------------------------
# boolean classification
# --------------------------------------------------------------------------


def leaf_holds(f: float, theta: float, direction: str) -> bool:
    """Strict threshold test; f == theta counts as a violation."""
    return f < theta if direction == BELOW else f > theta


def evaluate_boolean(root: Node, f, theta) -> tuple[bool, frozenset[int]]:
    """Return (holds, violated leaves) for measurement values ``f``.

    The violated set holds the leaves responsible for a failure: for a
    failing AND the union over its failing children, for a failing OR the
    union over all children.  A node that holds reports nothing.
    """
    if isinstance(root, Leaf):
        k = root.measurement_id
        ok = leaf_holds(f[k], theta[k], root.direction)
        return ok, frozenset() if ok else frozenset({k})
    results = [evaluate_boolean(c, f, theta) for c in root.children]
    if root.op == AND:
        ok = all(r[0] for r in results)
    else:
        ok = any(r[0] for r in results)
    if ok:
        return True, frozenset()
    return False, frozenset().union(*(r[1] for r in results if not r[0]))


def classify_boolean(rs: RuleSet, sample, theta=None, mask=None, empty_default: float = 0.0):
    """Hard rule classification of one sample.

    Returns ``(label, violated)``: label -1 when the sample complies with
    every constraint (negative / "qualified"), +1 otherwise, together with
    the set of failing leaves (measurement ids).
    """
    from .measure import evaluate_all

    theta = rs.theta if theta is None else theta
    f, _ = evaluate_all(rs.measurements, sample, mask=mask, empty_default=empty_default)
    ok, violated = evaluate_boolean(rs.root, f, theta)
    return (-1 if ok else 1), violated
