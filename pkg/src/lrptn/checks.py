"""Gradient-verification fixtures shared by the CLI and the test suite.

Each fixture builds a small randomly initialized unit, unrolls it a few
steps on inputs scaled to [-2, 2] (keeping sigmoids and tanh away from
their flat saturation regions), reduces the output to a scalar, and
compares the tape gradient of every parameter against central finite
differences.
"""

import numpy as np

from . import autodiff as ad
from . import cells
from .autodiff import GradCheckReport, Var, grad_check
from .errors import ConfigError
from .linalg import Rng

CELL_KINDS = ("highway", "gru", "vanilla")


def _cell_params(prefix: str, named):
    return [(f"{prefix}.{name}", var) for name, var in named]


def gradcheck_cell(cell_kind: str, param_kind: str, n: int = 6, d: int = 2, steps: int = 3,
                   m: int = 3, h: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Finite-difference check of one cell/parametrization combination."""
    rng = Rng(seed).fork(f"gradcheck.{cell_kind}.{param_kind}")
    dd = None if param_kind == "full" else d

    if cell_kind == "highway":
        layers = [
            cells.init_highway_layer(n, param_kind, dd, rng.fork(f"layer{i}"),
                                     activation="tanh", transform_bias=-0.5)
            for i in range(steps)
        ]
        x = rng.uniform(-2.0, 2.0, (n, 2))
        params = []
        for i, layer in enumerate(layers):
            params += _cell_params(f"layer{i}", [
                *[(f"proposal.{s}", v) for s, v in _map_vars(layer.proposal_map)],
                *[(f"transform.{s}", v) for s, v in _map_vars(layer.transform_map)],
                ("b_proposal", layer.b_proposal),
                ("b_transform", layer.b_transform),
            ])

        def f(tape):
            h_t = x
            for layer in layers:
                h_t = cells.highway_forward(layer, h_t, "infer", tape=tape)
            return ad.sum_all(tape, h_t)

        return grad_check(f, params, h=h, tol=tol)

    if cell_kind == "gru":
        cell = cells.init_gru_cell(n, m, param_kind, dd, rng.fork("cell"), carry_bias=0.5)
        named = [
            ("u_reset", cell.u_reset), ("u_carry", cell.u_carry), ("u_prop", cell.u_prop),
            *[(f"w_reset.{s}", v) for s, v in _map_vars(cell.w_reset)],
            *[(f"w_carry.{s}", v) for s, v in _map_vars(cell.w_carry)],
            *[(f"w_prop.{s}", v) for s, v in _map_vars(cell.w_prop)],
            ("b_reset", cell.b_reset), ("b_carry", cell.b_carry), ("b_prop", cell.b_prop),
            ("state0", cell.state0),
        ]
        step = cells.gru_step
    elif cell_kind == "vanilla":
        cell = cells.init_vanilla_cell(n, m, param_kind, dd, rng.fork("cell"))
        named = [
            ("u_in", cell.u_in),
            *[(f"w.{s}", v) for s, v in _map_vars(cell.w)],
            ("b", cell.b),
        ]
        step = cells.vanilla_rnn_step
    else:
        raise ConfigError(f"unknown cell kind {cell_kind!r}")

    inputs = [rng.uniform(-2.0, 2.0, (m, 2)) for _ in range(steps)]
    x0 = rng.uniform(-1.0, 1.0, (cell.n, 2))

    def f(tape):
        x_t = x0
        for u in inputs:
            x_t = step(cell, x_t, u, tape)
        return ad.sum_all(tape, x_t)

    return grad_check(f, _cell_params("cell", named), h=h, tol=tol)


def _map_vars(m):
    from .param import map_vars

    return map_vars(m)


def gradcheck_suite(cell_kinds=CELL_KINDS, param_kinds=("full", "lr", "lrd"),
                    n: int = 6, d: int = 2, steps: int = 3, h: float = 1e-5,
                    tol: float = 1e-4, seed: int = 0) -> dict:
    """Reports for every cell x parametrization pair."""
    return {
        (ck, pk): gradcheck_cell(ck, pk, n=n, d=d, steps=steps, h=h, tol=tol, seed=seed)
        for ck in cell_kinds
        for pk in param_kinds
    }


def initial_state_gradient_norm(cell_kind: str, n: int = 32, steps: int = 200,
                                seed: int = 0, carry_bias: float = 4.0) -> float:
    """Norm of d(sum of final state)/d(initial state) after `steps` steps.

    Both cell kinds get identical input sequences, the same random initial
    state, and the same uniform sqrt(6/fan_in) init scale, so the ratio of
    the two norms isolates what the passthrough does to gradient flow.
    """
    rng = Rng(seed).fork("state-gradient")
    m = 4
    inputs = [rng.uniform(-1.0, 1.0, (m, 1)) for _ in range(steps)]
    x0 = Var(rng.uniform(-1.0, 1.0, (n, 1)))
    cell_rng = rng.fork(cell_kind)
    if cell_kind == "gru":
        cell = cells.init_gru_cell(n, m, "full", None, cell_rng, carry_bias=carry_bias)
        step = cells.gru_step
    elif cell_kind == "vanilla":
        cell = cells.init_vanilla_cell(n, m, "full", None, cell_rng)
        step = cells.vanilla_rnn_step
    else:
        raise ConfigError(f"unknown cell kind {cell_kind!r}")

    tape = ad.Tape()
    x = x0
    for u in inputs:
        x = step(cell, x, u, tape)
    out = ad.sum_all(tape, x)
    x0.grad = None
    tape.backward((out, np.ones((1, 1))))
    return float(np.sqrt((ad.grad_of(x0) ** 2).sum()))
