"""Integer symbolic expressions for grid shapes and coordinate maps.

Expressions are small immutable trees. They are built either with Python
operators (``sym("n") * 32``) or parsed from the textual syntax used in
workload-spec files (``"n * 32"``, ``"t0 // 2"``, ``"min(b, s) + 1"``).
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

__all__ = [
    "SymExpr",
    "SymShapeError",
    "const",
    "sym",
    "smin",
    "smax",
    "as_expr",
    "parse_expr",
    "eval_expr",
    "free_symbols",
    "compile_expr",
]

ShapeBinding = Mapping[str, int]

_BINARY = ("add", "mul", "floordiv", "mod", "min", "max")
_INFIX = {"add": "+", "mul": "*", "floordiv": "//", "mod": "%"}
# higher binds tighter
_PRECEDENCE = {"add": 1, "mul": 2, "floordiv": 2, "mod": 2}


class SymShapeError(ValueError):
    """Raised for unbound symbols, bad divisors, or negative values."""


@dataclass(frozen=True)
class SymExpr:
    kind: str
    children: tuple["SymExpr", ...] = ()
    value: int | None = None
    name: str | None = None
    _hash: int = field(default=0, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "constant":
            if not isinstance(self.value, int) or isinstance(self.value, bool):
                raise SymShapeError(f"constant must be an int, got {self.value!r}")
        elif self.kind == "symbol":
            if not self.name or not self.name.isidentifier():
                raise SymShapeError(f"bad symbol name {self.name!r}")
        elif self.kind in _BINARY:
            if len(self.children) != 2:
                raise SymShapeError(f"{self.kind} takes two operands")
        else:
            raise SymShapeError(f"unknown expression kind {self.kind!r}")
        object.__setattr__(self, "_hash", hash((self.kind, self.children, self.value, self.name)))

    def __hash__(self):
        return self._hash

    # operator sugar; folds constants, nothing else
    def _bin(self, kind, other, swap=False):
        other = as_expr(other)
        a, b = (other, self) if swap else (self, other)
        if a.kind == "constant" and b.kind == "constant":
            try:
                return const(_apply(kind, a.value, b.value))
            except SymShapeError:
                pass
        return SymExpr(kind, (a, b))

    def __add__(self, other):
        return self._bin("add", other)

    def __radd__(self, other):
        return self._bin("add", other, swap=True)

    def __mul__(self, other):
        return self._bin("mul", other)

    def __rmul__(self, other):
        return self._bin("mul", other, swap=True)

    def __floordiv__(self, other):
        return self._bin("floordiv", other)

    def __rfloordiv__(self, other):
        return self._bin("floordiv", other, swap=True)

    def __mod__(self, other):
        return self._bin("mod", other)

    def __rmod__(self, other):
        return self._bin("mod", other, swap=True)

    def __str__(self):
        return _format(self)

    def __repr__(self):
        return f"SymExpr({_format(self)!r})"


def const(value: int) -> SymExpr:
    return SymExpr("constant", value=int(value))


def sym(name: str) -> SymExpr:
    return SymExpr("symbol", name=name)


def smin(a, b) -> SymExpr:
    return as_expr(a)._bin("min", b)


def smax(a, b) -> SymExpr:
    return as_expr(a)._bin("max", b)


def as_expr(x: Union[SymExpr, int, str]) -> SymExpr:
    """Coerce ints and expression strings to :class:`SymExpr`."""
    if isinstance(x, SymExpr):
        return x
    if isinstance(x, bool):
        raise SymShapeError("booleans are not integer expressions")
    if isinstance(x, int):
        return const(x)
    if isinstance(x, str):
        return parse_expr(x)
    raise SymShapeError(f"cannot convert {type(x).__name__} to SymExpr")


def _apply(kind: str, a: int, b: int) -> int:
    if kind == "add":
        r = a + b
    elif kind == "mul":
        r = a * b
    elif kind in ("floordiv", "mod"):
        if b <= 0:
            raise SymShapeError(f"{kind} by non-positive value {b}")
        r = a // b if kind == "floordiv" else a % b
    elif kind == "min":
        r = min(a, b)
    else:
        r = max(a, b)
    if r < 0:
        raise SymShapeError(f"negative intermediate value {r}")
    return r


def eval_expr(expr: SymExpr, binding: ShapeBinding) -> int:
    """Evaluate ``expr`` with symbols taken from ``binding``.

    Every node value must be non-negative and divisors strictly positive.
    """
    kind = expr.kind
    if kind == "constant":
        if expr.value < 0:
            raise SymShapeError(f"negative constant {expr.value}")
        return expr.value
    if kind == "symbol":
        try:
            v = binding[expr.name]
        except KeyError:
            raise SymShapeError(f"unbound symbol {expr.name!r}") from None
        if v < 0:
            raise SymShapeError(f"symbol {expr.name!r} bound to negative value {v}")
        return int(v)
    a = eval_expr(expr.children[0], binding)
    b = eval_expr(expr.children[1], binding)
    return _apply(kind, a, b)


def compile_expr(expr: SymExpr) -> Callable[[ShapeBinding], int]:
    """Return a closure equivalent to ``lambda b: eval_expr(expr, b)``.

    Used on hot paths (per-task map evaluation); error behaviour matches.
    """
    kind = expr.kind
    if kind == "constant":
        v = expr.value
        if v < 0:
            raise SymShapeError(f"negative constant {v}")
        return lambda b: v
    if kind == "symbol":
        name = expr.name

        def _lookup(b):
            try:
                v = b[name]
            except KeyError:
                raise SymShapeError(f"unbound symbol {name!r}") from None
            if v < 0:
                raise SymShapeError(f"symbol {name!r} bound to negative value {v}")
            return v

        return _lookup
    fa = compile_expr(expr.children[0])
    fb = compile_expr(expr.children[1])
    if kind == "add":
        return lambda b: fa(b) + fb(b)
    if kind == "mul":
        return lambda b: fa(b) * fb(b)
    return lambda b: _apply(kind, fa(b), fb(b))


def free_symbols(expr: SymExpr) -> set[str]:
    if expr.kind == "symbol":
        return {expr.name}
    out: set[str] = set()
    for c in expr.children:
        out |= free_symbols(c)
    return out


def _format(expr: SymExpr) -> str:
    kind = expr.kind
    if kind == "constant":
        return str(expr.value)
    if kind == "symbol":
        return expr.name
    a, b = expr.children
    if kind in ("min", "max"):
        return f"{kind}({_format(a)}, {_format(b)})"
    prec = _PRECEDENCE[kind]
    left = _format(a)
    right = _format(b)
    if a.kind in _PRECEDENCE and _PRECEDENCE[a.kind] < prec:
        left = f"({left})"
    if b.kind in _PRECEDENCE and _PRECEDENCE[b.kind] <= prec:
        right = f"({right})"
    return f"{left} {_INFIX[kind]} {right}"


_AST_OPS = {ast.Add: "add", ast.Mult: "mul", ast.FloorDiv: "floordiv", ast.Mod: "mod"}


def parse_expr(text: str) -> SymExpr:
    """Parse the textual syntax: ints, identifiers, ``+ * // %``, min/max."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as e:
        raise SymShapeError(f"cannot parse {text!r}: {e.msg}") from None
    return _from_ast(tree.body, text)


def _from_ast(node, text) -> SymExpr:
    if isinstance(node, ast.Constant) and type(node.value) is int:
        return const(node.value)
    if isinstance(node, ast.Name):
        return sym(node.id)
    if isinstance(node, ast.BinOp) and type(node.op) in _AST_OPS:
        return SymExpr(_AST_OPS[type(node.op)], (_from_ast(node.left, text), _from_ast(node.right, text)))
    if (
        isinstance(node, ast.Call)
        and isinstance(node.func, ast.Name)
        and node.func.id in ("min", "max")
        and len(node.args) == 2
        and not node.keywords
    ):
        return SymExpr(node.func.id, (_from_ast(node.args[0], text), _from_ast(node.args[1], text)))
    raise SymShapeError(f"unsupported syntax in {text!r}: {ast.dump(node)[:60]}")
