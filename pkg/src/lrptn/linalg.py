"""Dense float64 matrix helpers and a seedable, forkable RNG.

Matrices are plain 2-d numpy arrays of float64 in row-major order. Every
public function checks operand shapes explicitly; silent broadcasting is
not allowed here (batch-norm and bias addition in higher layers use
dedicated ops with documented broadcast intent).
"""

import hashlib

import numpy as np

from .errors import DimensionError

ACTIVATIONS = ("sigmoid", "tanh", "relu", "identity")


def as_matrix(a) -> np.ndarray:
    """Coerce to a 2-d float64 array without copying when possible."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got ndim={m.ndim}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) . ({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def ewise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entrywise add/sub/mul of two identically shaped matrices."""
    if a.shape != b.shape:
        raise DimensionError(f"ewise {op}: shapes {a.shape} and {b.shape} differ")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown ewise op {op!r}")


def add(a, b):
    return ewise("add", a, b)


def sub(a, b):
    return ewise("sub", a, b)


def mul(a, b):
    return ewise("mul", a, b)


def sigmoid(a: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return relu(a)
    if kind == "identity":
        return np.asarray(a, dtype=np.float64)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Stabilized softmax along `axis` (max subtraction, so huge logits are safe)."""
    a = np.asarray(a, dtype=np.float64)
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def norm2(a: np.ndarray) -> float:
    """Euclidean norm of the flattened data."""
    return float(np.sqrt(np.sum(np.asarray(a, dtype=np.float64) ** 2)))


def uniform_init(rng: "Rng", rows: int, cols: int, fan_in: int) -> np.ndarray:
    """Uniform draw on [-sqrt(6/fan_in), +sqrt(6/fan_in)], the init used everywhere."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    scale = np.sqrt(6.0 / fan_in)
    return rng.uniform(-scale, scale, (rows, cols))


def _label_entropy(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Deterministic PCG64 stream with labeled, independent substreams.

    Same seed gives an identical stream within this implementation.
    fork(label) derives a child whose stream is independent of the parent's
    and of any sibling forked under a different label.
    """

    def __init__(self, seed: int, _entropy: tuple = ()):
        self.seed = int(seed)
        self._entropy = tuple(_entropy)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *self._entropy]))
        )

    def fork(self, label: str) -> "Rng":
        return Rng(self.seed, self._entropy + (_label_entropy(label),))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float64, copy=False)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Uniform integers in [low, high) as int64."""
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)

    def get_state(self) -> dict:
        return {
            "seed": self.seed,
            "entropy": list(self._entropy),
            "bit_generator": self._gen.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._entropy = tuple(state["entropy"])
        self._gen.bit_generator.state = state["bit_generator"]
