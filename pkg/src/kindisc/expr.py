"""Symbolic expression trees.

Trees are immutable: every node is a frozen dataclass and every node is also
a tree. Leaves are numeric literals (:class:`Num`), parameter slots
(:class:`Param`, 1-based ``p1..pN``) and variable references (:class:`Var`).
Internal nodes are the four binary arithmetic operators and ``exp``.

Evaluation goes through a small code generator so a tree is turned into a
numpy lambda once and then called many times inside optimizers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Node",
    "Num",
    "Param",
    "Var",
    "BinOp",
    "Exp",
    "ExpressionTree",
    "ExpressionError",
    "GrammarError",
    "UnsupportedContextError",
    "BINARY_OPS",
    "parse",
    "serialize",
    "structure_key",
    "canonical_form",
    "structurally_equal",
    "evaluate",
    "compile_tree",
    "differentiate",
    "complexity",
    "depth",
    "variables",
    "n_params",
    "subtrees",
    "replace_subtree",
    "fold_constants",
    "parametrize",
    "bind",
    "random_tree",
    "finite_difference",
]

BINARY_OPS = ("+", "-", "*", "/")
UNARY_OPS = ("exp",)


class ExpressionError(ValueError):
    """Structural problem with a tree: arity, parameter slots or inputs."""


class GrammarError(ExpressionError):
    """Text does not conform to the expression grammar."""


class UnsupportedContextError(ExpressionError):
    """Operation not defined for this kind of tree."""


class Node:
    __slots__ = ()

    def __str__(self) -> str:
        return serialize(self)


@dataclass(frozen=True, eq=True)
class Num(Node):
    value: float


@dataclass(frozen=True, eq=True)
class Param(Node):
    index: int


@dataclass(frozen=True, eq=True)
class Var(Node):
    name: str


@dataclass(frozen=True, eq=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node


@dataclass(frozen=True, eq=True)
class Exp(Node):
    arg: Node


ExpressionTree = Node


# ---------------------------------------------------------------------------
# traversal

def children(node: Node) -> tuple[Node, ...]:
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Exp):
        return (node.arg,)
    return ()


def walk(node: Node) -> Iterator[Node]:
    """Preorder traversal."""
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(children(n)))


def subtrees(node: Node) -> list[Node]:
    return list(walk(node))


def complexity(node: Node) -> int:
    """Total number of nodes (operators and leaves)."""
    return sum(1 for _ in walk(node))


def depth(node: Node) -> int:
    kids = children(node)
    if not kids:
        return 1
    return 1 + max(depth(k) for k in kids)


def variables(node: Node) -> tuple[str, ...]:
    """Variable names in order of first appearance."""
    seen: dict[str, None] = {}
    for n in walk(node):
        if isinstance(n, Var):
            seen.setdefault(n.name, None)
    return tuple(seen)


def n_params(node: Node) -> int:
    """Highest parameter slot index referenced (0 when there are none)."""
    return max((n.index for n in walk(node) if isinstance(n, Param)), default=0)


def _check_contiguous(node: Node) -> None:
    used = {n.index for n in walk(node) if isinstance(n, Param)}
    if used and used != set(range(1, max(used) + 1)):
        missing = sorted(set(range(1, max(used) + 1)) - used)
        raise ExpressionError(f"parameter slots must be contiguous from p1; missing {missing}")


def replace_subtree(node: Node, index: int, new: Node) -> Node:
    """Return a copy of ``node`` with its ``index``-th preorder subtree replaced."""
    if index == 0:
        return new
    offset = 1
    if isinstance(node, BinOp):
        size = complexity(node.left)
        if index < offset + size:
            return BinOp(node.op, replace_subtree(node.left, index - offset, new), node.right)
        offset += size
        return BinOp(node.op, node.left, replace_subtree(node.right, index - offset, new))
    if isinstance(node, Exp):
        return Exp(replace_subtree(node.arg, index - offset, new))
    raise IndexError(index)


# ---------------------------------------------------------------------------
# text form

def _fmt_num(value: float) -> str:
    value = float(value)
    if not math.isfinite(value):
        raise ExpressionError(f"cannot serialize non-finite literal {value!r}")
    text = repr(value)
    return f"({text})" if text.startswith("-") else text


def _serialize(node: Node, num: Callable[[Num], str], param: Callable[[Param], str]) -> str:
    if isinstance(node, Num):
        return num(node)
    if isinstance(node, Param):
        return param(node)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Exp):
        return f"exp({_serialize(node.arg, num, param)})"
    if isinstance(node, BinOp):
        a = _serialize(node.left, num, param)
        b = _serialize(node.right, num, param)
        return f"({a} {node.op} {b})"
    raise ExpressionError(f"unknown node {node!r}")


def serialize(node: Node) -> str:
    """Canonical infix text with explicit parentheses around every binary op."""
    return _serialize(node, lambda n: _fmt_num(n.value), lambda p: f"p{p.index}")


def structure_key(node: Node) -> str:
    """Serialization with every literal and parameter slot blanked out."""
    return _serialize(node, lambda n: "c", lambda p: "c")


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/()]))"
)
_PARAM = re.compile(r"p([1-9]\d*)")


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise GrammarError(f"unexpected symbol {text[pos:].strip()[:1]!r} at position {pos}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, allowed: Sequence[str] | None):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.allowed = None if allowed is None else set(allowed)

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        if tok[0] is None:
            raise GrammarError("unexpected end of expression")
        self.pos += 1
        return tok

    def expect(self, value: str):
        if self.peek()[0] is None and value == ")":
            raise GrammarError("unbalanced parentheses")
        kind, tok = self.take()
        if tok != value:
            raise GrammarError(f"expected {value!r}, got {tok!r}")

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, tok = self.peek()
        if kind == "op" and tok in ("-", "+"):
            self.take()
            operand = self.unary()
            if tok == "+":
                return operand
            if isinstance(operand, Num):
                return Num(-operand.value)
            return BinOp("-", Num(0.0), operand)
        return self.primary()

    def primary(self) -> Node:
        kind, tok = self.take()
        if kind == "num":
            return Num(float(tok))
        if kind == "op" and tok == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if self.peek() == ("op", "("):
                if tok != "exp":
                    raise GrammarError(f"unknown function {tok!r}")
                self.take()
                node = Exp(self.expr())
                self.expect(")")
                return node
            if tok == "exp":
                raise GrammarError("exp must be applied to a parenthesized argument")
            m = _PARAM.fullmatch(tok)
            if m is not None:
                return Param(int(m.group(1)))
            if self.allowed is not None and tok not in self.allowed:
                raise GrammarError(f"unknown variable {tok!r}")
            return Var(tok)
        raise GrammarError(f"unexpected token {tok!r}")


def parse(text: str, variables: Sequence[str] | None = None, *, check_params: bool = True) -> Node:
    """Parse infix text into a tree.

    Parameters
    ----------
    text : str
        Expression using ``+ - * /``, ``exp(...)``, ``p1..pN``, identifiers
        and decimal literals.
    variables : sequence of str, optional
        Declared variable names. When given, any other identifier is rejected.
    check_params : bool
        Require parameter slots to be contiguous from ``p1``.
    """
    parser = _Parser(text, variables)
    if not parser.tokens:
        raise GrammarError("empty expression")
    node = parser.expr()
    if parser.pos != len(parser.tokens):
        raise GrammarError(f"unexpected trailing token {parser.peek()[1]!r}")
    if check_params:
        _check_contiguous(node)
    return node


# ---------------------------------------------------------------------------
# evaluation

def _codegen(node: Node) -> str:
    if isinstance(node, Num):
        text = repr(float(node.value))
        if not math.isfinite(node.value):
            return f"_f({text!r})"
        return f"({text})" if text.startswith("-") else text
    if isinstance(node, Param):
        return f"p[{node.index - 1}]"
    if isinstance(node, Var):
        return f"v[{node.name!r}]"
    if isinstance(node, Exp):
        return f"_exp({_codegen(node.arg)})"
    if isinstance(node, BinOp):
        return f"({_codegen(node.left)} {node.op} {_codegen(node.right)})"
    raise ExpressionError(f"unknown node {node!r}")


_COMPILED: dict[str, Callable] = {}
_NAMESPACE = {"_exp": np.exp, "_f": np.float64}


def compile_tree(node: Node) -> Callable[[np.ndarray, Mapping[str, np.ndarray]], np.ndarray]:
    """Return ``f(theta, inputs)`` evaluating the tree with numpy semantics.

    The callable does no validation and may raise ``ZeroDivisionError`` when
    every operand is a plain Python float; use :func:`evaluate` for the
    checked path.
    """
    code = _codegen(node)
    fn = _COMPILED.get(code)
    if fn is None:
        if len(_COMPILED) > 200_000:
            _COMPILED.clear()
        fn = eval(f"lambda p, v: {code}", dict(_NAMESPACE))  # noqa: S307 - generated from a validated tree
        _COMPILED[code] = fn
    return fn


def call(fn: Callable, theta, inputs) -> np.ndarray:
    """Run a compiled tree with floating point errors mapped to non-finite values."""
    with np.errstate(all="ignore"):
        try:
            return fn(theta, inputs)
        except (ZeroDivisionError, OverflowError, FloatingPointError):
            return np.float64(np.nan)


def evaluate(tree: Node, theta: Sequence[float] | np.ndarray = (), inputs: Mapping | None = None):
    """Evaluate ``tree`` at parameters ``theta`` and variable assignment ``inputs``.

    Division by zero and overflow produce ``nan``/``inf`` instead of raising.

    Raises
    ------
    ExpressionError
        If ``theta`` has the wrong length or a referenced variable is missing.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    need = n_params(tree)
    if theta.size != need:
        raise ExpressionError(f"tree has {need} parameter slots but theta has length {theta.size}")
    inputs = {} if inputs is None else inputs
    values = {}
    for name in variables(tree):
        if name not in inputs:
            raise ExpressionError(f"no value supplied for variable {name!r}")
        values[name] = np.asarray(inputs[name], dtype=float)
    out = call(compile_tree(tree), theta, values)
    out = np.asarray(out, dtype=float)
    shapes = [v.shape for v in values.values()]
    if shapes:
        out = np.broadcast_to(out, np.broadcast_shapes(*shapes)).copy()
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# algebra helpers (used by differentiation and folding)

def _is_num(node: Node, value: float | None = None) -> bool:
    return isinstance(node, Num) and (value is None or node.value == value)


def _add(a: Node, b: Node) -> Node:
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    return BinOp("+", a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    return BinOp("-", a, b)


def _mul(a: Node, b: Node) -> Node:
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return Num(0.0)
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    return BinOp("*", a, b)


def _div(a: Node, b: Node) -> Node:
    if _is_num(b, 1.0):
        return a
    if _is_num(a, 0.0) and not _is_num(b, 0.0):
        return Num(0.0)
    return BinOp("/", a, b)


def differentiate(tree: Node, var: str | None = None) -> Node:
    """Exact symbolic derivative of a single-variable tree.

    Parameters
    ----------
    tree : Node
        Tree referencing at most one variable.
    var : str, optional
        Variable to differentiate with respect to; defaults to the tree's only
        variable.

    Raises
    ------
    UnsupportedContextError
        If the tree references more than one variable.
    """
    names = variables(tree)
    if len(names) > 1:
        raise UnsupportedContextError(
            f"differentiation needs a single-variable tree, got {list(names)}"
        )
    if var is None:
        var = names[0] if names else "t"
    return _diff(tree, var)


def _diff(node: Node, var: str) -> Node:
    if isinstance(node, (Num, Param)):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if node.name == var else 0.0)
    if isinstance(node, Exp):
        return _mul(_diff(node.arg, var), node)
    a, b = node.left, node.right
    da, db = _diff(a, var), _diff(b, var)
    if node.op == "+":
        return _add(da, db)
    if node.op == "-":
        return _sub(da, db)
    if node.op == "*":
        return _add(_mul(da, b), _mul(a, db))
    # quotient rule
    if _is_num(db, 0.0):
        return _div(da, b)
    return _div(_sub(_mul(da, b), _mul(a, db)), _mul(b, b))


def finite_difference(tree: Node, theta, t, h: float = 1e-5, var: str | None = None):
    """Central finite-difference derivative; kept for validating :func:`differentiate`."""
    names = variables(tree)
    var = var or (names[0] if names else "t")
    t = np.asarray(t, dtype=float)
    hi = evaluate(tree, theta, {var: t + h})
    lo = evaluate(tree, theta, {var: t - h})
    with np.errstate(all="ignore"):
        return (np.asarray(hi) - np.asarray(lo)) / (2 * h)


def fold_constants(node: Node) -> Node:
    """Collapse every subtree free of variables and parameter slots into a literal."""
    if isinstance(node, (Num, Param, Var)):
        return node
    if isinstance(node, Exp):
        arg = fold_constants(node.arg)
        if isinstance(arg, Num):
            with np.errstate(all="ignore"):
                return Num(float(np.exp(arg.value)))
        return Exp(arg)
    a, b = fold_constants(node.left), fold_constants(node.right)
    if isinstance(a, Num) and isinstance(b, Num):
        with np.errstate(all="ignore"):
            x, y = np.float64(a.value), np.float64(b.value)
            value = {"+": x + y, "-": x - y, "*": x * y, "/": x / y}[node.op]
        return Num(float(value))
    return BinOp(node.op, a, b)


def parametrize(node: Node) -> tuple[Node, np.ndarray]:
    """Promote every literal to a parameter slot, numbered in preorder.

    Existing slots are renumbered after the promoted literals are merged, so
    the result always has contiguous slots ``p1..pd``.
    """
    values: list[float] = []
    old_slots: dict[int, int] = {}

    def go(n: Node) -> Node:
        if isinstance(n, Num):
            values.append(float(n.value))
            return Param(len(values))
        if isinstance(n, Param):
            if n.index not in old_slots:
                values.append(np.nan)
                old_slots[n.index] = len(values)
            return Param(old_slots[n.index])
        if isinstance(n, Var):
            return n
        if isinstance(n, Exp):
            return Exp(go(n.arg))
        return BinOp(n.op, go(n.left), go(n.right))

    tree = go(node)
    return tree, np.array(values, dtype=float)


def bind(node: Node, theta: Sequence[float]) -> Node:
    """Substitute parameter values as literals."""
    theta = [float(x) for x in theta]

    def go(n: Node) -> Node:
        if isinstance(n, Param):
            return Num(theta[n.index - 1])
        if isinstance(n, Exp):
            return Exp(go(n.arg))
        if isinstance(n, BinOp):
            return BinOp(n.op, go(n.left), go(n.right))
        return n

    return go(node)


# ---------------------------------------------------------------------------
# random generation

def random_leaf(rng: np.random.Generator, names: Sequence[str], const_range=(-5.0, 5.0),
                p_const: float = 0.5) -> Node:
    if not names or rng.random() < p_const:
        return Num(float(rng.uniform(*const_range)))
    return Var(names[int(rng.integers(len(names)))])


def random_tree(rng: np.random.Generator, operators: Sequence[str], names: Sequence[str],
                max_depth: int = 4, method: str = "grow", const_range=(-5.0, 5.0),
                p_const: float = 0.5) -> Node:
    """Grow a random tree over ``operators`` and ``names`` no deeper than ``max_depth``."""
    binary = [op for op in operators if op in BINARY_OPS]
    unary = [op for op in operators if op in UNARY_OPS]
    funcs = binary + unary
    if not funcs:
        return random_leaf(rng, names, const_range, p_const)

    def build(d: int) -> Node:
        if d <= 1:
            return random_leaf(rng, names, const_range, p_const)
        n_term = len(names) + 1
        if method == "grow" and rng.random() < n_term / (n_term + len(funcs)):
            return random_leaf(rng, names, const_range, p_const)
        op = funcs[int(rng.integers(len(funcs)))]
        if op == "exp":
            return Exp(build(d - 1))
        return BinOp(op, build(d - 1), build(d - 1))

    return build(max_depth)


# ---------------------------------------------------------------------------
# canonical form (structural equality up to constant relabeling)

_C = ("c",)
_NEG = ("neg",)


def _is_c(t) -> bool:
    return t == _C


def _has_c(t) -> bool:
    """``t`` carries a free multiplicative constant."""
    if _is_c(t):
        return True
    if t[0] == "+":
        return _scaled(t)
    if t[0] == "inv":
        return t[1][0] == "+" and _scaled(t[1])
    return t[0] == "*" and any(_is_c(f) or (f[0] in ("+", "inv") and _has_c(f)) for f in t[1])


def _canon(node: Node):
    if isinstance(node, Num):
        if node.value == 0.0:
            return ("0",)
        if node.value == 1.0:
            return ("1",)
        if node.value == -1.0:
            return _NEG
        return _C
    if isinstance(node, Param):
        return _C
    if isinstance(node, Var):
        return ("v", node.name)
    if isinstance(node, Exp):
        arg = _canon(node.arg)
        return _C if _is_c(arg) or arg[0] in ("0", "1") or arg == _NEG else ("exp", arg)
    a, b = _canon(node.left), _canon(node.right)
    if node.op == "+":
        return _sum([a, b])
    if node.op == "-":
        return _sum([a, _prod([_NEG, b])])
    if node.op == "*":
        return _prod([a, b])
    return _prod([a, _inv(b)])


def _sum(terms):
    flat = []
    for t in terms:
        flat.extend(t[1] if t[0] == "+" else (t,))
    flat = [t for t in flat if t[0] != "0"]
    consts = [t for t in flat if t[0] in ("c", "1") or t == _NEG]
    # like terms (g, c*g) combine into one free multiple of g
    groups: dict = {}
    for t in flat:
        if t[0] in ("c", "1") or t == _NEG:
            continue
        base = _strip_c(t)
        groups.setdefault(base, []).append(t)
    rest = []
    for base, members in groups.items():
        if len(members) == 1 and members[0] == base:
            rest.append(base)
        else:
            rest.append(_prod([_C, base]))
    if consts:
        rest.append(_C)
    if not rest:
        return ("0",)
    if len(rest) == 1:
        return rest[0]
    return ("+", tuple(sorted(rest, key=repr)))


def _strip_c(t):
    if t[0] == "*" and _C in t[1]:
        rest = tuple(f for f in t[1] if not _is_c(f))
        return rest[0] if len(rest) == 1 else ("*", rest)
    return t


def _prod(factors):
    flat = []
    for f in factors:
        flat.extend(f[1] if f[0] == "*" else (f,))
    if any(f[0] == "0" for f in flat):
        return ("0",)
    flat = [f for f in flat if f[0] != "1"]
    n_neg = sum(1 for f in flat if f == _NEG)
    flat = [f for f in flat if f != _NEG]
    has_c = any(_is_c(f) for f in flat)
    rest = [f for f in flat if not _is_c(f)]

    def sum_like(f):
        return f[0] == "+" or (f[0] == "inv" and f[1][0] == "+")

    if has_c or any(sum_like(f) and _has_c(f) for f in rest):
        has_c = True
        # one free scale per product: every sum with a single unscaled term absorbs it
        for i, f in enumerate(rest):
            if not sum_like(f):
                continue
            inner = f[1] if f[0] == "inv" else f
            bare = [x for x in inner[1] if not _has_c(x)]
            if len(bare) == 1:
                absorbed = _sum([x if _has_c(x) else _prod([_C, x]) for x in inner[1]])
                rest[i] = _inv(absorbed) if f[0] == "inv" else absorbed
        if not any(sum_like(f) and _has_c(f) for f in rest):
            rest.append(_C)
        if any(f[0] == "*" for f in rest):
            return _prod(rest)
    elif n_neg % 2 and not any(_has_c(f) for f in rest):
        rest.append(_NEG)
    if not rest:
        return _C if has_c else ("1",)
    if len(rest) == 1:
        return rest[0]
    return ("*", tuple(sorted(rest, key=repr)))


def _scaled(t) -> bool:
    """Every additive term of ``t`` carries a free constant factor."""
    terms = t[1] if t[0] == "+" else (t,)
    return all(_is_c(x) or _has_c(x) for x in terms)


def _inv(t):
    if t[0] in ("c", "1") or t == _NEG:
        return t
    if t[0] == "inv":
        return t[1]
    if t[0] == "*":
        return _prod([_inv(f) for f in t[1]])
    return ("inv", t)


def _render(t) -> str:
    kind = t[0]
    if kind in ("c", "0", "1"):
        return kind
    if kind == "neg":
        return "-1"
    if kind == "v":
        return t[1]
    if kind == "exp":
        return f"exp({_render(t[1])})"
    if kind == "inv":
        return f"1/({_render(t[1])})"
    sep = " + " if kind == "+" else " * "
    return "(" + sep.join(_render(x) for x in t[1]) + ")"


def canonical_form(node: Node) -> str:
    """Normal form used for structural matching.

    Sums and products are flattened and their operands sorted, every literal
    or parameter becomes a generic constant ``c`` (constants combined by a
    sum or product merge into one), subtraction becomes addition of a negated
    term, and division becomes multiplication by an inverse. A quotient whose
    denominator terms all carry a constant gains a numerator constant, since
    rescaling numerator and denominator leaves the function family unchanged.
    No further algebraic simplification is attempted.
    """
    return _render(_canon(node))


def structurally_equal(a: Node, b: Node) -> bool:
    return canonical_form(a) == canonical_form(b)
