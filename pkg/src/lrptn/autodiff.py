"""Reverse-mode differentiation over a per-batch tape.

The engine records primitive operations as they execute and replays them in
exact reverse order to accumulate gradients. Conventions:

  * `Var` wraps a float64 ndarray (`.value`) and owns its gradient buffer
    (`.grad`, lazily allocated, summed over all uses of the value).
  * Every primitive takes the tape as its first argument. Passing
    `tape=None` skips recording entirely and returns a plain ndarray, so
    the same forward code serves both numeric evaluation and training.
  * Plain ndarrays passed where a `Var` is accepted are treated as
    constants: no gradient flows into them. Dropout masks and frozen
    batch statistics enter the graph this way.
  * A tape is built per batch and thrown away; leaves (`Var` parameters)
    live across tapes, so callers reset leaf gradients between updates.

Backward visits operations strictly in reverse recording order, which makes
two identical forward+backward runs bit-identical.
"""

import numpy as np

from .errors import DimensionError, UsageError


class Var:
    """A tape value: ndarray payload plus an accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


def val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def grad_of(v: Var) -> np.ndarray:
    """Gradient of a leaf; zeros if the leaf never influenced a seeded output."""
    return v.grad if v.grad is not None else np.zeros_like(v.value)


def zero_grads(vars_) -> None:
    for v in vars_:
        v.grad = None


def _acc(var, g):
    # g may alias another value's gradient buffer: copy on first write.
    if var.grad is None:
        var.grad = g.copy()
    else:
        var.grad += g


def _acc_own(var, g):
    # g is freshly allocated by the caller: safe to take ownership.
    if var.grad is None:
        var.grad = g
    else:
        var.grad += g


class Tape:
    """Ordered record of primitive ops; backward() replays them reversed."""

    def __init__(self):
        self._ops = []

    def __len__(self):
        return len(self._ops)

    def backward(self, seeds) -> None:
        """Accumulate gradients for every recorded value.

        `seeds` is a (Var, gradient) pair or a list of them; a scalar
        gradient is allowed for 1x1 outputs.
        """
        if isinstance(seeds, tuple):
            seeds = [seeds]
        if not seeds:
            raise UsageError("backward called with no seed gradients")
        for var, g in seeds:
            if not isinstance(var, Var):
                raise UsageError("backward seeds must be Vars produced by a forward pass")
            g = np.asarray(g, dtype=np.float64)
            if g.shape != var.value.shape:
                g = np.broadcast_to(g, var.value.shape).astype(np.float64)
            _acc(var, g)
        for op in reversed(self._ops):
            op()


# ---------------------------------------------------------------------------
# primitives


def matmul(tape, a, b):
    av, bv = val(a), val(b)
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: ({av.shape[0]}x{av.shape[1]}) . ({bv.shape[0]}x{bv.shape[1]})"
        )
    out_v = av @ bv
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is None:
            return
        if isinstance(a, Var):
            _acc_own(a, g @ bv.T)
        if isinstance(b, Var):
            _acc_own(b, av.T @ g)

    tape._ops.append(bw)
    return out


def _ewise_check(av, bv, name):
    if av.shape != bv.shape:
        raise DimensionError(f"{name}: shapes {av.shape} and {bv.shape} differ")


def add(tape, a, b):
    av, bv = val(a), val(b)
    _ewise_check(av, bv, "add")
    out_v = av + bv
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is None:
            return
        if isinstance(a, Var):
            _acc(a, g)
        if isinstance(b, Var):
            _acc(b, g)

    tape._ops.append(bw)
    return out


def sub(tape, a, b):
    av, bv = val(a), val(b)
    _ewise_check(av, bv, "sub")
    out_v = av - bv
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is None:
            return
        if isinstance(a, Var):
            _acc(a, g)
        if isinstance(b, Var):
            _acc_own(b, -g)

    tape._ops.append(bw)
    return out


def mul(tape, a, b):
    av, bv = val(a), val(b)
    _ewise_check(av, bv, "mul")
    out_v = av * bv
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is None:
            return
        if isinstance(a, Var):
            _acc_own(a, g * bv)
        if isinstance(b, Var):
            _acc_own(b, g * av)

    tape._ops.append(bw)
    return out


def cadd(tape, a, c):
    """a + c where c is a constant (scalar or ndarray broadcastable to a)."""
    av = val(a)
    out_v = av + c
    if out_v.shape != av.shape:
        raise DimensionError(f"cadd: constant {np.shape(c)} does not broadcast onto {av.shape}")
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is not None and isinstance(a, Var):
            _acc(a, g)

    tape._ops.append(bw)
    return out


def cmul(tape, a, c):
    """a * c where c is a constant (scalar or ndarray broadcastable to a)."""
    av = val(a)
    out_v = av * c
    if out_v.shape != av.shape:
        raise DimensionError(f"cmul: constant {np.shape(c)} does not broadcast onto {av.shape}")
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is not None and isinstance(a, Var):
            _acc_own(a, g * c)

    tape._ops.append(bw)
    return out


def add_bias(tape, x, b):
    """x (n x batch) plus a column vector b (n x 1) broadcast over columns."""
    xv, bv = val(x), val(b)
    if bv.shape != (xv.shape[0], 1):
        raise DimensionError(f"add_bias: bias {bv.shape} does not fit rows of {xv.shape}")
    out_v = xv + bv
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is None:
            return
        if isinstance(x, Var):
            _acc(x, g)
        if isinstance(b, Var):
            _acc_own(b, g.sum(axis=1, keepdims=True))

    tape._ops.append(bw)
    return out


def scale_rows(tape, d, x):
    """Row i of x scaled by d[i]; d is (n x 1), x is (n x batch)."""
    dv, xv = val(d), val(x)
    if dv.shape != (xv.shape[0], 1):
        raise DimensionError(f"scale_rows: diag {dv.shape} does not fit rows of {xv.shape}")
    out_v = dv * xv
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is None:
            return
        if isinstance(d, Var):
            _acc_own(d, (g * xv).sum(axis=1, keepdims=True))
        if isinstance(x, Var):
            _acc_own(x, g * dv)

    tape._ops.append(bw)
    return out


def sigmoid(tape, a):
    av = val(a)
    out_v = np.empty_like(av)
    pos = av >= 0
    out_v[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out_v[~pos] = e / (1.0 + e)
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is not None and isinstance(a, Var):
            _acc_own(a, g * (out_v * (1.0 - out_v)))

    tape._ops.append(bw)
    return out


def tanh(tape, a):
    av = val(a)
    out_v = np.tanh(av)
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is not None and isinstance(a, Var):
            _acc_own(a, g * (1.0 - out_v * out_v))

    tape._ops.append(bw)
    return out


def relu(tape, a):
    av = val(a)
    out_v = np.maximum(av, 0.0)
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is not None and isinstance(a, Var):
            _acc_own(a, g * (av > 0.0))

    tape._ops.append(bw)
    return out


def one_minus(tape, a):
    av = val(a)
    out_v = 1.0 - av
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is not None and isinstance(a, Var):
            _acc_own(a, -g)

    tape._ops.append(bw)
    return out


def sum_all(tape, a):
    """Sum of all entries as a 1x1 value."""
    av = val(a)
    out_v = np.array([[av.sum()]])
    if tape is None:
        return out_v
    out = Var(out_v)

    def bw():
        g = out.grad
        if g is not None and isinstance(a, Var):
            _acc_own(a, np.full_like(av, g[0, 0]))

    tape._ops.append(bw)
    return out


def hstack(tape, parts):
    """Concatenate (n x b_i) blocks along columns; backward splits the gradient."""
    vals = [val(p) for p in parts]
    out_v = np.concatenate(vals, axis=1)
    if tape is None:
        return out_v
    out = Var(out_v)
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])

    def bw():
        g = out.grad
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Var):
                _acc_own(p, g[:, lo:hi].copy())

    tape._ops.append(bw)
    return out


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "cadd": cadd,
    "cmul": cmul,
    "add_bias": add_bias,
    "scale_rows": scale_rows,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "one_minus": one_minus,
    "sum_all": sum_all,
}


def record(tape, primitive: str, *inputs):
    """Dispatch a primitive by name onto the tape."""
    try:
        fn = PRIMITIVES[primitive]
    except KeyError:
        raise UsageError(f"unknown primitive {primitive!r}") from None
    return fn(tape, *inputs)


# ---------------------------------------------------------------------------
# finite-difference checker


class GradCheckReport:
    def __init__(self, tol):
        self.tol = tol
        self.max_rel_err = 0.0
        self.per_param = {}
        self.failures = []  # (param name, flat index, analytic, numeric, rel err)

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol and not any(
            not np.isfinite(r) for *_, r in self.failures
        )

    def __str__(self):
        status = "OK" if self.passed else "FAIL"
        lines = [f"gradcheck {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"]
        for name, err in self.per_param.items():
            lines.append(f"  {name:<24s} {err:.3e}")
        for name, idx, ga, gn, rel in self.failures[:10]:
            lines.append(f"  worst {name}[{idx}]: analytic={ga:.6e} numeric={gn:.6e} rel={rel:.3e}")
        return "\n".join(lines)


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of a scalar function against central differences.

    `f(tape)` must run the forward pass and return a 1x1 output; with
    `tape=None` it must return the same value as a plain ndarray. `params`
    is a list of (name, Var) pairs; every entry of every param is probed
    with +/-h and compared via rel = |ga - gn| / max(1, |ga| + |gn|).
    Non-finite values at probe points are reported, not raised.
    """
    if h <= 0:
        raise UsageError("grad_check: h must be positive")
    tape = Tape()
    out = f(tape)
    zero_grads(v for _, v in params)
    tape.backward((out, np.ones((1, 1))))
    analytic = {name: grad_of(v).copy() for name, v in params}

    report = GradCheckReport(tol)
    for name, v in params:
        arr = v.value
        worst = 0.0
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(np.asarray(f(None)).reshape(()))
            flat[i] = orig - h
            f_minus = float(np.asarray(f(None)).reshape(()))
            flat[i] = orig
            ga = analytic[name].reshape(-1)[i]
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.failures.append((name, i, ga, float("nan"), float("inf")))
                continue
            gn = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ga - gn) / max(1.0, abs(ga) + abs(gn))
            if rel > worst:
                worst = rel
            if rel >= tol:
                report.failures.append((name, i, ga, gn, rel))
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
