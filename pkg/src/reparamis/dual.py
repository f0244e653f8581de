"""Vectorized forward-mode dual numbers.

Used to obtain exact gradients of analytic densities (notably the microfacet
lobe) without hand-deriving the chain rule. A ``Dual`` carries a primal array
of shape (n,) and a tangent array of shape (n, k) for k seed directions.
Plain numbers/arrays mix in as constants with zero tangent.
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("val", "tan")

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=np.float64)
        self.tan = np.asarray(tan, dtype=np.float64)

    @staticmethod
    def seed(values: np.ndarray, k: int, axis: int) -> "Dual":
        """Variable with unit tangent along seed direction ``axis`` of k."""
        values = np.asarray(values, dtype=np.float64)
        tan = np.zeros(values.shape + (k,))
        tan[..., axis] = 1.0
        return Dual(values, tan)

    @staticmethod
    def _lift(x, like: "Dual"):
        if isinstance(x, Dual):
            return x
        val = np.asarray(x, dtype=np.float64)
        return Dual(val, np.zeros(np.broadcast_shapes(val.shape, like.val.shape) + like.tan.shape[-1:]))

    def __add__(self, o):
        o = Dual._lift(o, self)
        return Dual(self.val + o.val, self.tan + o.tan)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __sub__(self, o):
        o = Dual._lift(o, self)
        return Dual(self.val - o.val, self.tan - o.tan)

    def __rsub__(self, o):
        return (-self) + o

    def __mul__(self, o):
        o = Dual._lift(o, self)
        return Dual(self.val * o.val, self.tan * o.val[..., None] + o.tan * self.val[..., None])

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = Dual._lift(o, self)
        inv = 1.0 / o.val
        val = self.val * inv
        return Dual(val, (self.tan - o.tan * val[..., None]) * inv[..., None])

    def __rtruediv__(self, o):
        return Dual._lift(o, self) / self

    def __pow__(self, p: float):
        val = self.val**p
        return Dual(val, p * (self.val ** (p - 1.0))[..., None] * self.tan)

    def sqrt(self):
        r = np.sqrt(self.val)
        return Dual(r, self.tan * (0.5 / r)[..., None])

    def exp(self):
        e = np.exp(self.val)
        return Dual(e, self.tan * e[..., None])
