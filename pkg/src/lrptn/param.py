"""Parametrized linear maps: full, low-rank (L.R), and low-rank plus diagonal.

A map is applied as a left operator on column data: y = M(x) with x shaped
(n_in x batch). The low-rank kinds never materialize the equivalent dense
matrix during application; the product is always associated as L.(R.x),
which is both the parameter saving and the compute saving. `materialize`
exists for tests and inspection only.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import DimensionError
from .linalg import uniform_init

KINDS = ("full", "lr", "lrd")


@dataclass
class FullMap:
    w: Var  # (n_out x n_in)

    @property
    def n_out(self):
        return self.w.value.shape[0]

    @property
    def n_in(self):
        return self.w.value.shape[1]


@dataclass
class LowRankMap:
    l: Var  # (n_out x d)
    r: Var  # (d x n_in)

    @property
    def n_out(self):
        return self.l.value.shape[0]

    @property
    def n_in(self):
        return self.r.value.shape[1]

    @property
    def d(self):
        return self.l.value.shape[1]


@dataclass
class LowRankDiagMap:
    l: Var  # (n x d)
    r: Var  # (d x n)
    diag: Var  # (n x 1)

    @property
    def n_out(self):
        return self.l.value.shape[0]

    @property
    def n_in(self):
        return self.r.value.shape[1]

    @property
    def d(self):
        return self.l.value.shape[1]


LinearMap = (FullMap, LowRankMap, LowRankDiagMap)


def map_kind(m) -> str:
    if isinstance(m, FullMap):
        return "full"
    if isinstance(m, LowRankMap):
        return "lr"
    if isinstance(m, LowRankDiagMap):
        return "lrd"
    raise TypeError(f"not a LinearMap: {type(m).__name__}")


def map_vars(m):
    """(suffix, Var) pairs in a fixed order, for optimizers and checkpoints."""
    if isinstance(m, FullMap):
        return [("w", m.w)]
    if isinstance(m, LowRankMap):
        return [("l", m.l), ("r", m.r)]
    if isinstance(m, LowRankDiagMap):
        return [("l", m.l), ("r", m.r), ("diag", m.diag)]
    raise TypeError(f"not a LinearMap: {type(m).__name__}")


def _check_input(m, x):
    if x.shape[0] != m.n_in:
        raise DimensionError(
            f"linear map expects {m.n_in} input rows, got {x.shape[0]} (x is {x.shape})"
        )


def apply_t(tape, m, x, inner_mask=None):
    """Apply the map on the tape. x is a Var or constant (n_in x batch).

    `inner_mask` is an optional constant dropout mask applied to the rank-d
    intermediate R.x (the site between the R and L factors); it is only
    meaningful for the factored kinds.
    """
    _check_input(m, ad.val(x))
    if isinstance(m, FullMap):
        if inner_mask is not None:
            raise DimensionError("inner_mask has no site inside a full map")
        return ad.matmul(tape, m.w, x)
    h = ad.matmul(tape, m.r, x)
    if inner_mask is not None:
        h = ad.cmul(tape, h, inner_mask)
    out = ad.matmul(tape, m.l, h)
    if isinstance(m, LowRankDiagMap):
        out = ad.add(tape, out, ad.scale_rows(tape, m.diag, x))
    return out


def apply(m, x: np.ndarray) -> np.ndarray:
    """Numeric application, same association as the tape path."""
    return apply_t(None, m, np.asarray(x, dtype=np.float64))


def materialize(m) -> np.ndarray:
    """Dense (n_out x n_in) matrix equal to the operator. Tests/inspection only."""
    if isinstance(m, FullMap):
        return m.w.value.copy()
    w = m.l.value @ m.r.value
    if isinstance(m, LowRankDiagMap):
        w = w + np.diag(m.diag.value[:, 0])
    return w


def grads(m, x: np.ndarray, upstream: np.ndarray):
    """Analytic factor gradients and input gradient for y = M(x).

    Returns (factor_grads, dx) where factor_grads keys match map_vars
    suffixes. upstream is dLoss/dy with shape (n_out x batch).
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_input(m, x)
    if upstream.shape != (m.n_out, x.shape[1]):
        raise DimensionError(
            f"upstream shape {upstream.shape} does not match ({m.n_out}, {x.shape[1]})"
        )
    if isinstance(m, FullMap):
        return {"w": upstream @ x.T}, m.w.value.T @ upstream
    rx = m.r.value @ x
    lt_up = m.l.value.T @ upstream
    out = {"l": upstream @ rx.T, "r": lt_up @ x.T}
    dx = m.r.value.T @ lt_up
    if isinstance(m, LowRankDiagMap):
        out["diag"] = (upstream * x).sum(axis=1, keepdims=True)
        dx = dx + m.diag.value * upstream
    return out, dx


def init_map(kind: str, n_out: int, n_in: int, d: int | None, rng) -> "FullMap | LowRankMap | LowRankDiagMap":
    """Build a map with uniform sqrt(6/fan_in) factors.

    W and R use fan_in = n_in; L uses fan_in = d (each factor treated as its
    own layer). The diagonal starts at zero so an LRD map initially equals
    its low-rank part.
    """
    if kind == "full":
        return FullMap(w=Var(uniform_init(rng, n_out, n_in, n_in)))
    if d is None or d < 1:
        raise DimensionError(f"factored map needs d >= 1, got {d}")
    if d * (n_out + n_in) >= n_out * n_in:
        warnings.warn(
            f"d={d} stores {d * (n_out + n_in)} entries for a {n_out}x{n_in} map "
            f"({n_out * n_in} dense): not a compression",
            stacklevel=2,
        )
    l = Var(uniform_init(rng, n_out, d, d))
    r = Var(uniform_init(rng, d, n_in, n_in))
    if kind == "lr":
        return LowRankMap(l=l, r=r)
    if kind == "lrd":
        if n_out != n_in:
            raise DimensionError(f"lrd requires a square map, got {n_out}x{n_in}")
        return LowRankDiagMap(l=l, r=r, diag=Var(np.zeros((n_out, 1))))
    raise ValueError(f"unknown map kind {kind!r}")


def param_count(m, include_bias: bool = False, bias_len: int = 0) -> int:
    if isinstance(m, FullMap):
        n = m.n_out * m.n_in
    elif isinstance(m, LowRankMap):
        n = m.d * (m.n_out + m.n_in)
    elif isinstance(m, LowRankDiagMap):
        n = m.d * (m.n_out + m.n_in) + m.n_out
    else:
        raise TypeError(f"not a LinearMap: {type(m).__name__}")
    return n + (bias_len if include_bias else 0)
