"""Body-force descriptors evaluated from restricted arithmetic expressions."""
from __future__ import annotations

import ast

import numpy as np

_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
    "minimum": np.minimum,
    "maximum": np.maximum,
}
_CONSTS = {"pi": np.pi, "e": np.e}
_VARS = ("t", "x", "y")
_OPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd)


def _validate(node):
    if isinstance(node, ast.Expression):
        return _validate(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return
    if isinstance(node, ast.Name) and (node.id in _VARS or node.id in _CONSTS):
        return
    if isinstance(node, ast.BinOp) and isinstance(node.op, _OPS):
        _validate(node.left)
        _validate(node.right)
        return
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, _OPS):
        _validate(node.operand)
        return
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
        if node.keywords:
            raise ValueError("keyword arguments are not allowed")
        for a in node.args:
            _validate(a)
        return
    raise ValueError(f"unsupported syntax: {ast.dump(node)[:60]}")


def compile_expression(text: str):
    """Compile an expression in ``t, x, y`` into a vectorized callable."""
    text = str(text).strip()
    tree = ast.parse(text, mode="eval")
    _validate(tree)
    code = compile(tree, "<force>", "eval")

    def fn(t, x, y):
        env = dict(_FUNCS)
        env.update(_CONSTS)
        env.update(t=t, x=x, y=y)
        val = eval(code, {"__builtins__": {}}, env)  # noqa: S307 - validated AST
        return np.broadcast_to(np.asarray(val, dtype=float), np.shape(x)).astype(float)

    return fn


# three-point Gauss-Legendre rule on [0, 1]
_GL_X = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GL_W = np.array([5.0, 8.0, 5.0]) / 18.0


class ForceField:
    """Time-dependent body force ``f(t, x)`` per unit mass.

    Parameters
    ----------
    fx, fy : expressions in ``t, x, y`` (numbers are accepted too).
    """

    def __init__(self, fx="0", fy="0"):
        self.fx_text = str(fx)
        self.fy_text = str(fy)
        self._fx = compile_expression(self.fx_text)
        self._fy = compile_expression(self.fy_text)

    @classmethod
    def zero(cls):
        return cls("0", "0")

    @property
    def is_zero(self) -> bool:
        return self.fx_text.strip() in ("0", "0.0") and self.fy_text.strip() in ("0", "0.0")

    def __call__(self, t: float, points) -> np.ndarray:
        P = np.asarray(points, dtype=float).reshape(-1, 2)
        return np.column_stack([self._fx(t, P[:, 0], P[:, 1]), self._fy(t, P[:, 0], P[:, 1])])

    def step_average(self, t0: float, t1: float, points) -> np.ndarray:
        """Time average of ``f`` over ``[t0, t1]`` at fixed points."""
        out = 0.0
        for s, w in zip(_GL_X, _GL_W):
            out = out + w * self(t0 + s * (t1 - t0), points)
        return np.asarray(out, dtype=float) * np.ones((len(np.asarray(points).reshape(-1, 2)), 2))

    def __eq__(self, other):
        return isinstance(other, ForceField) and (self.fx_text, self.fy_text) == (other.fx_text, other.fy_text)

    def __repr__(self):
        return f"ForceField({self.fx_text!r}, {self.fy_text!r})"
