"""Tiny arithmetic language for per-cell custom costs.

Grammar: numbers, ``y[k][j]`` (0-based margin ``k``, coordinate ``j``),
binary ``+ - * / ^``, unary ``+ -`` and parentheses. ``^`` is exponentiation.
The expression is parsed once with :mod:`ast` against a whitelist and can then
be evaluated on scalars or on broadcast numpy arrays.
"""

from __future__ import annotations

import ast
import operator
from typing import Callable

from .errors import SchemaError

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


class CellExpression:
    """A parsed cost expression; call with ``lookup(k, j)`` returning a value."""

    def __init__(self, source: str):
        self.source = source
        try:
            tree = ast.parse(source.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise SchemaError(f"cannot parse cost expression {source!r}: {exc.msg}") from None
        self._refs: set[tuple[int, int]] = set()
        self._fn = self._compile(tree.body)

    @property
    def references(self) -> set[tuple[int, int]]:
        """The ``(k, j)`` index pairs used by the expression."""
        return set(self._refs)

    def check(self, K: int, d: int) -> None:
        for k, j in self._refs:
            if not (0 <= k < K and 0 <= j < d):
                raise SchemaError(f"y[{k}][{j}] out of range for K={K}, d={d}")

    def __call__(self, lookup: Callable[[int, int], object]):
        return self._fn(lookup)

    def _compile(self, node: ast.AST):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            value = float(node.value)
            return lambda lookup: value
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            left, right = self._compile(node.left), self._compile(node.right)
            return lambda lookup: op(left(lookup), right(lookup))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            op = _UNOPS[type(node.op)]
            inner = self._compile(node.operand)
            return lambda lookup: op(inner(lookup))
        if isinstance(node, ast.Subscript):
            k, j = self._index_pair(node)
            self._refs.add((k, j))
            return lambda lookup: lookup(k, j)
        raise SchemaError(f"unsupported element in cost expression {self.source!r}: "
                          f"{ast.dump(node)[:60]}")

    def _index_pair(self, node: ast.Subscript) -> tuple[int, int]:
        outer = node.value
        if not (isinstance(outer, ast.Subscript) and isinstance(outer.value, ast.Name)
                and outer.value.id == "y"):
            raise SchemaError(f"only y[k][j] may be indexed in {self.source!r}")
        return self._int(outer.slice), self._int(node.slice)

    def _int(self, node: ast.AST) -> int:
        if isinstance(node, ast.Constant) and isinstance(node.value, int) \
                and not isinstance(node.value, bool):
            return node.value
        raise SchemaError(f"indices must be integer literals in {self.source!r}")
