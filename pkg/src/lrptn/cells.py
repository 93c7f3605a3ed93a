"""Differentiable state-transition units built on the autodiff tape.

Every forward function takes `tape=None` for plain numeric evaluation and a
`Tape` for recording; data is column-major, shape (n x batch).

The shared structural element is the state passthrough: the next state is

    proposal * transform + x_prev * carry        (elementwise)

with three gate couplings: "additive" fixes both gates at one, "convex"
ties carry = 1 - transform, and "independent" leaves both free. The Highway
layer and the GRU cell are the two concrete convex-coupled units here; the
vanilla tanh RNN is the no-passthrough baseline.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import param as pm
from .autodiff import Var
from .errors import ConfigError, DegenerateInputError, DimensionError
from .linalg import uniform_init

PASSTHROUGH_FORMS = ("additive", "convex", "independent")


def passthrough_combine(x_prev, proposal, transform=None, carry=None, form="convex", tape=None):
    """Combine previous state and proposal through the selected gate coupling.

    additive: both gates are one, the result is proposal + x_prev (exact).
    convex: carry is ignored and recomputed as 1 - transform.
    independent: transform and carry are both required and used as given.
    """
    if form == "additive":
        return ad.add(tape, proposal, x_prev)
    if form == "convex":
        if transform is None:
            raise ConfigError("convex passthrough requires a transform gate")
        carry = ad.one_minus(tape, transform)
    elif form == "independent":
        if transform is None or carry is None:
            raise ConfigError("independent passthrough requires both gates")
    else:
        raise ConfigError(f"unknown passthrough form {form!r}")
    return ad.add(tape, ad.mul(tape, proposal, transform), ad.mul(tape, x_prev, carry))


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(rng, p: float, shape) -> np.ndarray:
    """Inverted-dropout mask: entries 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def apply_dropout(x, mask, tape=None):
    return ad.cmul(tape, x, mask)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    gamma: Var
    beta: Var
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5


def init_batchnorm(n: int, momentum: float = 0.9, epsilon: float = 1e-5) -> BatchNormState:
    return BatchNormState(
        gamma=Var(np.ones((n, 1))),
        beta=Var(np.zeros((n, 1))),
        running_mean=np.zeros((n, 1)),
        running_var=np.ones((n, 1)),
        momentum=momentum,
        epsilon=epsilon,
    )


def batchnorm_forward(state: BatchNormState, x, mode: str, tape=None):
    """Normalize rows by batch statistics (train) or running statistics (infer).

    Batch statistics are constants to the tape: gradients flow through the
    normalized data path and through gamma/beta only. Train mode updates the
    running statistics in place.
    """
    xv = ad.val(x)
    if mode == "train":
        if xv.shape[1] < 2:
            raise ConfigError(f"batch norm needs batch >= 2 in train mode, got {xv.shape[1]}")
        mean = xv.mean(axis=1, keepdims=True)
        var = xv.var(axis=1, keepdims=True)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var
    elif mode == "infer":
        mean = state.running_mean
        var = state.running_var
    else:
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = ad.cmul(tape, ad.cadd(tape, x, -mean), inv_std)
    return ad.add_bias(tape, ad.scale_rows(tape, state.gamma, xhat), state.beta)


# ---------------------------------------------------------------------------
# Highway layer


@dataclass
class HighwayLayer:
    """One square passthrough layer: g(P.x) gated against the carried state.

    proposal_map and transform_map are LinearMaps of identical size n; the
    transform gate is a sigmoid, the carry gate its complement.
    """

    proposal_map: object
    transform_map: object
    b_proposal: Var
    b_transform: Var
    activation: str = "relu"

    @property
    def n(self):
        return self.proposal_map.n_out


@dataclass
class HighwayMasks:
    """Dropout masks for one layer invocation, shared by both gate paths.

    outer hits the layer input right before the map (before R for factored
    kinds); inner hits the rank-d intermediate between R and L, and is None
    for full maps.
    """

    outer: np.ndarray
    inner: np.ndarray | None = None


def _activate_t(tape, kind, x):
    if kind == "sigmoid":
        return ad.sigmoid(tape, x)
    if kind == "tanh":
        return ad.tanh(tape, x)
    if kind == "relu":
        return ad.relu(tape, x)
    if kind == "identity":
        return x
    raise ConfigError(f"unknown activation {kind!r}")


def highway_forward(layer: HighwayLayer, x, mode: str = "infer", masks=None, bn=None, tape=None):
    """Forward one Highway layer.

    mode "train" requires masks (pass all-ones HighwayMasks to disable
    dropout explicitly); mode "infer" ignores masks. `bn` is an optional
    (proposal, transform) pair of BatchNormState applied right after each
    map, before the bias. The passthrough input itself is never dropped.
    """
    if mode == "train":
        if masks is None:
            raise ConfigError("train mode requires dropout masks (use all-ones to disable)")
        xd = ad.cmul(tape, x, masks.outer)
        inner = masks.inner
    elif mode == "infer":
        xd = x
        inner = None
    else:
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")

    zp = pm.apply_t(tape, layer.proposal_map, xd, inner_mask=inner)
    zt = pm.apply_t(tape, layer.transform_map, xd, inner_mask=inner)
    if bn is not None:
        zp = batchnorm_forward(bn[0], zp, mode, tape)
        zt = batchnorm_forward(bn[1], zt, mode, tape)
    proposal = _activate_t(tape, layer.activation, ad.add_bias(tape, zp, layer.b_proposal))
    transform = ad.sigmoid(tape, ad.add_bias(tape, zt, layer.b_transform))
    return passthrough_combine(x, proposal, transform=transform, form="convex", tape=tape)


def init_highway_layer(
    n: int, kind: str, d, rng, activation: str = "relu", transform_bias: float = -1.0
) -> HighwayLayer:
    """Transform bias starts negative so layers initially carry state through."""
    return HighwayLayer(
        proposal_map=pm.init_map(kind, n, n, d, rng.fork("proposal")),
        transform_map=pm.init_map(kind, n, n, d, rng.fork("transform")),
        b_proposal=Var(np.zeros((n, 1))),
        b_transform=Var(np.full((n, 1), float(transform_bias))),
        activation=activation,
    )


# ---------------------------------------------------------------------------
# GRU cell


@dataclass
class GruCell:
    """Convex passthrough recurrent cell with a reset gate.

    The reset gate multiplies the previous state before the state-to-state
    map of the proposal (not after), and the carry gate feeds the
    passthrough directly: transform = 1 - carry.
    """

    u_reset: Var
    u_carry: Var
    u_prop: Var
    w_reset: object
    w_carry: object
    w_prop: object
    b_reset: Var
    b_carry: Var
    b_prop: Var
    state0: Var

    @property
    def n(self):
        return self.u_reset.value.shape[0]

    @property
    def m(self):
        return self.u_reset.value.shape[1]


def _gate(tape, u_map, w_map, b, u, x_prev):
    pre = ad.add(tape, ad.matmul(tape, u_map, u), pm.apply_t(tape, w_map, x_prev))
    return ad.sigmoid(tape, ad.add_bias(tape, pre, b))


def gru_step(cell: GruCell, x_prev, u, tape=None):
    """One recurrence step; x_prev is (n x batch), u is (m x batch)."""
    uv, xv = ad.val(u), ad.val(x_prev)
    if uv.shape[0] != cell.m:
        raise DimensionError(f"input has {uv.shape[0]} rows, cell expects {cell.m}")
    if xv.shape[0] != cell.n:
        raise DimensionError(f"state has {xv.shape[0]} rows, cell expects {cell.n}")
    reset = _gate(tape, cell.u_reset, cell.w_reset, cell.b_reset, u, x_prev)
    carry = _gate(tape, cell.u_carry, cell.w_carry, cell.b_carry, u, x_prev)
    gated_prev = ad.mul(tape, x_prev, reset)
    pre = ad.add(tape, ad.matmul(tape, cell.u_prop, u), pm.apply_t(tape, cell.w_prop, gated_prev))
    proposal = ad.tanh(tape, ad.add_bias(tape, pre, cell.b_prop))
    transform = ad.one_minus(tape, carry)
    return passthrough_combine(x_prev, proposal, transform=transform, form="convex", tape=tape)


def init_gru_cell(n: int, m: int, kind: str, d, rng, carry_bias: float = 0.0) -> GruCell:
    """Input maps are dense; state maps follow `kind`. Carry bias is the knob
    that starts the cell in copy-through mode."""
    return GruCell(
        u_reset=Var(uniform_init(rng.fork("u_reset"), n, m, m)),
        u_carry=Var(uniform_init(rng.fork("u_carry"), n, m, m)),
        u_prop=Var(uniform_init(rng.fork("u_prop"), n, m, m)),
        w_reset=pm.init_map(kind, n, n, d, rng.fork("w_reset")),
        w_carry=pm.init_map(kind, n, n, d, rng.fork("w_carry")),
        w_prop=pm.init_map(kind, n, n, d, rng.fork("w_prop")),
        b_reset=Var(np.zeros((n, 1))),
        b_carry=Var(np.full((n, 1), float(carry_bias))),
        b_prop=Var(np.zeros((n, 1))),
        state0=Var(np.zeros((n, 1))),
    )


# ---------------------------------------------------------------------------
# vanilla RNN baseline


@dataclass
class VanillaRnnCell:
    u_in: Var
    w: object
    b: Var

    @property
    def n(self):
        return self.u_in.value.shape[0]

    @property
    def m(self):
        return self.u_in.value.shape[1]


def vanilla_rnn_step(cell: VanillaRnnCell, x_prev, u, tape=None):
    uv, xv = ad.val(u), ad.val(x_prev)
    if uv.shape[0] != cell.m or xv.shape[0] != cell.n:
        raise DimensionError(
            f"vanilla step: input {uv.shape} / state {xv.shape} vs cell (n={cell.n}, m={cell.m})"
        )
    pre = ad.add(tape, ad.matmul(tape, cell.u_in, u), pm.apply_t(tape, cell.w, x_prev))
    return ad.tanh(tape, ad.add_bias(tape, pre, cell.b))


def init_vanilla_cell(n: int, m: int, kind: str, d, rng) -> VanillaRnnCell:
    return VanillaRnnCell(
        u_in=Var(uniform_init(rng.fork("u_in"), n, m, m)),
        w=pm.init_map(kind, n, n, d, rng.fork("w")),
        b=Var(np.zeros((n, 1))),
    )


# ---------------------------------------------------------------------------
# loss heads

LOSS_KINDS = ("cross_entropy", "mse", "l2_hinge")


def _masked_count(mask):
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    count = mask.sum()
    if count == 0:
        raise DegenerateInputError("loss over an entirely masked batch")
    return mask, count


def loss(kind: str, prediction: np.ndarray, target, mask) -> tuple[float, np.ndarray]:
    """Mean loss over unmasked positions and its gradient wrt prediction.

    prediction is (classes x k) for the classification losses (raw logits;
    cross_entropy applies its own softmax) or (rows x k) for mse. target is
    a length-k class-index vector for cross_entropy / l2_hinge (hinge codes
    the true class +1 and all others -1), or an array matching prediction
    for mse. mask is length k; masked-out columns contribute nothing.
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    mask, count = _masked_count(mask)
    if prediction.shape[1] != mask.size:
        raise DimensionError(f"prediction {prediction.shape} vs mask length {mask.size}")

    if kind == "cross_entropy":
        target = np.asarray(target, dtype=np.int64).reshape(-1)
        shifted = prediction - prediction.max(axis=0, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=0))
        log_p = shifted[target, np.arange(target.size)] - log_z
        value = -(log_p * mask).sum() / count
        probs = np.exp(shifted - log_z)
        probs[target, np.arange(target.size)] -= 1.0
        return float(value), probs * (mask / count)

    if kind == "mse":
        target = np.asarray(target, dtype=np.float64).reshape(prediction.shape)
        diff = prediction - target
        value = ((diff**2).sum(axis=0) * mask).sum() / count
        return float(value), 2.0 * diff * (mask / count)

    if kind == "l2_hinge":
        target = np.asarray(target, dtype=np.int64).reshape(-1)
        signs = -np.ones_like(prediction)
        signs[target, np.arange(target.size)] = 1.0
        slack = np.maximum(0.0, 1.0 - signs * prediction)
        value = ((slack**2).sum(axis=0) * mask).sum() / count
        return float(value), -2.0 * signs * slack * (mask / count)

    raise ConfigError(f"unknown loss kind {kind!r}")


def accuracy(prediction: np.ndarray, target, mask) -> float:
    """Fraction of unmasked columns whose argmax matches the target class."""
    mask, count = _masked_count(mask)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    hits = (prediction.argmax(axis=0) == target).astype(np.float64)
    return float((hits * mask).sum() / count)
