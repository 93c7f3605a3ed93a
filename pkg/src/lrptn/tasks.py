"""Benchmark task generators, analytic baselines, and MNIST ingestion.

Sequence layout conventions (0-based positions, alphabet a0..a9 where
a0..a7 are data, a8 is the blank, a9 the run marker):

  copy, fixed variant, sequence length T = N + 20:
      input : 10 data | N-1 blanks | run | 10 blanks
      target: N+10 blanks | the 10 data symbols
  copy, variable length (K ~ U{1..10} data symbols, same T):
      input : K data | blanks ... | run at position N+9 | blanks
      target: blanks everywhere except the final K steps, which hold data
  copy, variable lag (lag ~ U{1..N}, same T):
      input : 10 data | lag-1 blanks | run at position 9+lag | blanks
      target: blanks except positions 10+lag .. 19+lag, which hold data
  addition, length T (T even): first input component ~ U[0,1); second is
      zero except a single 1 in each half; scalar target (the sum of the
      two marked values) at the final step only.
  pixel sequence: one pixel per step under a fixed permutation shared by
      every sample; class target at the final step only.

The copy variants keep the loss over the whole sequence; addition and the
pixel sequence mask all but the final step.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, FormatError
from .linalg import Rng

BLANK = 8
RUN = 9
ALPHABET = 10
DATA_SYMBOLS = 8
COPY_VARIANTS = ("fixed", "variable_length", "variable_lag")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Sample:
    """One task instance: per-step input rows, targets, and the loss mask."""

    inputs: np.ndarray  # (T, m)
    targets: np.ndarray  # (T,) class indices or reals
    mask: np.ndarray  # (T,) bool

    def __post_init__(self):
        if not (len(self.inputs) == len(self.targets) == len(self.mask)):
            raise DimensionError("inputs, targets and mask must share the sequence length")


@dataclass
class CopySpec:
    lag: int  # N: the temporal gap the data must survive
    variant: str = "fixed"

    def __post_init__(self):
        if self.lag < 1:
            raise ConfigError(f"copy lag must be >= 1, got {self.lag}")
        if self.variant not in COPY_VARIANTS:
            raise ConfigError(f"copy variant must be one of {COPY_VARIANTS}, got {self.variant!r}")

    @property
    def seq_len(self) -> int:
        return self.lag + 20


@dataclass
class AdditionSpec:
    seq_len: int

    def __post_init__(self):
        if self.seq_len < 2 or self.seq_len % 2 != 0:
            raise ConfigError(f"addition sequence length must be even and >= 2, got {self.seq_len}")


@dataclass
class SeqMnistSpec:
    permutation_seed: int = 0
    permutation: np.ndarray = field(init=False)

    def __post_init__(self):
        self.permutation = Rng(self.permutation_seed).fork("pixel-permutation").permutation(784)


# ---------------------------------------------------------------------------
# copy task


def _gen_copy_symbols(spec: CopySpec, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Input/target symbol rows for one sample (uint8, length N+20)."""
    n, t = spec.lag, spec.seq_len
    inp = np.full(t, BLANK, dtype=np.uint8)
    tgt = np.full(t, BLANK, dtype=np.uint8)
    if spec.variant == "fixed":
        data = rng.integers(0, DATA_SYMBOLS, 10).astype(np.uint8)
        inp[0:10] = data
        inp[n + 9] = RUN
        tgt[n + 10 :] = data
    elif spec.variant == "variable_length":
        k = int(rng.integers(1, 11))
        data = rng.integers(0, DATA_SYMBOLS, k).astype(np.uint8)
        inp[0:k] = data
        inp[n + 9] = RUN
        tgt[t - k :] = data
    else:  # variable_lag
        lag = int(rng.integers(1, n + 1))
        data = rng.integers(0, DATA_SYMBOLS, 10).astype(np.uint8)
        inp[0:10] = data
        inp[9 + lag] = RUN
        tgt[10 + lag : 20 + lag] = data
    return inp, tgt


def gen_copy(spec: CopySpec, rng: Rng) -> Sample:
    """One copy-task sample with one-hot inputs; the loss covers every step."""
    inp, tgt = _gen_copy_symbols(spec, rng)
    return Sample(
        inputs=np.eye(ALPHABET)[inp],
        targets=tgt.astype(np.int64),
        mask=np.ones(spec.seq_len, dtype=bool),
    )


def copy_baseline_ce(spec: CopySpec) -> float:
    """Cross-entropy of the best memoryless predictor on the fixed variant.

    Such a predictor knows every position's role but not the data: blanks
    are certain, the 10 data positions are uniform over 8 symbols, giving
    10 ln 8 nats spread over N+20 steps.
    """
    if spec.variant != "fixed":
        raise ConfigError(
            f"analytic baseline only covers the fixed variant, not {spec.variant!r}"
        )
    return 10.0 * math.log(DATA_SYMBOLS) / spec.seq_len


# ---------------------------------------------------------------------------
# addition task


def gen_addition(spec: AdditionSpec, rng: Rng) -> Sample:
    t = spec.seq_len
    values = rng.random(t)
    half = t // 2
    i = int(rng.integers(0, half))
    j = int(rng.integers(half, t))
    inputs = np.zeros((t, 2))
    inputs[:, 0] = values
    inputs[i, 1] = 1.0
    inputs[j, 1] = 1.0
    targets = np.zeros(t)
    targets[-1] = values[i] + values[j]
    mask = np.zeros(t, dtype=bool)
    mask[-1] = True
    return Sample(inputs=inputs, targets=targets, mask=mask)


def addition_baseline_mse() -> float:
    """MSE of the best constant predictor (always 1): Var(U+U) = 1/6."""
    return 1.0 / 6.0


# ---------------------------------------------------------------------------
# MNIST (IDX binary format)


@dataclass
class MnistData:
    images: np.ndarray  # (count, 784) float64 scaled to [0, 1]
    labels: np.ndarray  # (count,) int64


def _read_be_u32(f, path: str, what: str) -> int:
    offset = f.tell()
    raw = f.read(4)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated while reading {what} at byte {offset}")
    return int.from_bytes(raw, "big")


def load_mnist_idx(images_path, labels_path) -> MnistData:
    """Parse the big-endian IDX pair; counts must agree between the files."""
    images_path, labels_path = str(images_path), str(labels_path)
    with open(images_path, "rb") as f:
        magic = _read_be_u32(f, images_path, "magic")
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        count = _read_be_u32(f, images_path, "image count")
        rows = _read_be_u32(f, images_path, "row count")
        cols = _read_be_u32(f, images_path, "column count")
        payload_at = f.tell()
        raw = f.read(count * rows * cols)
        if len(raw) < count * rows * cols:
            raise FormatError(
                f"{images_path}: expected {count * rows * cols} pixel bytes from byte "
                f"{payload_at}, found {len(raw)}"
            )
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic = _read_be_u32(f, labels_path, "magic")
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        count_l = _read_be_u32(f, labels_path, "label count")
        payload_at = f.tell()
        raw = f.read(count_l)
        if len(raw) < count_l:
            raise FormatError(
                f"{labels_path}: expected {count_l} label bytes from byte {payload_at}, "
                f"found {len(raw)}"
            )
        labels = np.frombuffer(raw, dtype=np.uint8)
    if count != count_l:
        raise FormatError(
            f"image/label count mismatch: {count} images vs {count_l} labels"
        )
    return MnistData(images=images.astype(np.float64) / 255.0, labels=labels.astype(np.int64))


def to_pixel_sequence(image: np.ndarray, spec: SeqMnistSpec, label: int = 0) -> Sample:
    """Unroll one 784-pixel image into a T=784 scalar sequence under the
    spec's fixed permutation; the class target sits at the final step."""
    image = np.asarray(image, dtype=np.float64).reshape(-1)
    if image.size != 784:
        raise DimensionError(f"expected 784 pixels, got {image.size}")
    t = image.size
    targets = np.zeros(t)
    targets[-1] = label
    mask = np.zeros(t, dtype=bool)
    mask[-1] = True
    return Sample(inputs=image[spec.permutation].reshape(t, 1), targets=targets, mask=mask)


# ---------------------------------------------------------------------------
# materialized datasets


class CopyDataset:
    """Copy-task samples stored as symbol rows; one-hot expansion is done
    per batch to keep 100k-sample splits small."""

    loss_kind = "cross_entropy"
    n_out = ALPHABET
    input_dim = ALPHABET

    def __init__(self, spec: CopySpec, size: int, rng: Rng):
        self.spec = spec
        self.size = size
        self.seq_len = spec.seq_len
        inp = np.empty((size, spec.seq_len), dtype=np.uint8)
        tgt = np.empty((size, spec.seq_len), dtype=np.uint8)
        for i in range(size):
            inp[i], tgt[i] = _gen_copy_symbols(spec, rng)
        self.symbols = inp
        self.targets = tgt
        self.loss_mask = np.ones(spec.seq_len, dtype=bool)

    def inputs_for(self, idx: np.ndarray) -> np.ndarray:
        # (T, m, B): one-hot rows per step
        onehot = np.eye(ALPHABET)[self.symbols[idx]]  # (B, T, 10)
        return onehot.transpose(1, 2, 0)

    def targets_for(self, idx: np.ndarray) -> np.ndarray:
        return self.targets[idx].T.astype(np.int64)  # (T, B)


class AdditionDataset:
    loss_kind = "mse"
    n_out = 1
    input_dim = 2

    def __init__(self, spec: AdditionSpec, size: int, rng: Rng):
        self.spec = spec
        self.size = size
        self.seq_len = spec.seq_len
        self.values = np.empty((size, spec.seq_len))
        self.markers = np.empty((size, 2), dtype=np.int64)
        self.sums = np.empty(size)
        for i in range(size):
            s = gen_addition(spec, rng)
            self.values[i] = s.inputs[:, 0]
            self.markers[i] = np.flatnonzero(s.inputs[:, 1])
            self.sums[i] = s.targets[-1]
        self.loss_mask = np.zeros(spec.seq_len, dtype=bool)
        self.loss_mask[-1] = True

    def inputs_for(self, idx: np.ndarray) -> np.ndarray:
        b = len(idx)
        out = np.zeros((self.seq_len, 2, b))
        out[:, 0, :] = self.values[idx].T
        rows = np.arange(b)
        out[self.markers[idx, 0], 1, rows] = 1.0
        out[self.markers[idx, 1], 1, rows] = 1.0
        return out

    def targets_for(self, idx: np.ndarray) -> np.ndarray:
        tgt = np.zeros((self.seq_len, len(idx)))
        tgt[-1] = self.sums[idx]
        return tgt


class PixelSeqDataset:
    """Images as permuted pixel sequences for the recurrent models."""

    loss_kind = "cross_entropy"
    n_out = 10
    input_dim = 1

    def __init__(self, images: np.ndarray, labels: np.ndarray, spec: SeqMnistSpec):
        if images.shape[0] != labels.shape[0]:
            raise DimensionError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
        self.spec = spec
        self.images = images
        self.labels = labels
        self.size = images.shape[0]
        self.seq_len = images.shape[1]
        self.loss_mask = np.zeros(self.seq_len, dtype=bool)
        self.loss_mask[-1] = True

    def inputs_for(self, idx: np.ndarray) -> np.ndarray:
        return self.images[idx][:, self.spec.permutation].T[:, None, :]  # (T, 1, B)

    def targets_for(self, idx: np.ndarray) -> np.ndarray:
        tgt = np.zeros((self.seq_len, len(idx)), dtype=np.int64)
        tgt[-1] = self.labels[idx]
        return tgt


class ImageDataset:
    """Whole images for the feed-forward classifier."""

    loss_kind = "l2_hinge"
    n_out = 10

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        if images.shape[0] != labels.shape[0]:
            raise DimensionError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
        self.images = images
        self.labels = labels
        self.size = images.shape[0]
        self.input_dim = images.shape[1]

    def inputs_for(self, idx: np.ndarray) -> np.ndarray:
        return self.images[idx].T  # (pixels, B)

    def targets_for(self, idx: np.ndarray) -> np.ndarray:
        return self.labels[idx]


def make_split(spec, sizes=(100_000, 10_000, 10_000), seed: int = 0) -> dict:
    """Disjoint train/valid/test datasets drawn from independently forked
    streams, so the same seed always rebuilds the same three sets."""
    root = Rng(seed)
    if isinstance(spec, CopySpec):
        cls = CopyDataset
    elif isinstance(spec, AdditionSpec):
        cls = AdditionDataset
    else:
        raise ConfigError(f"make_split generates copy/addition tasks, not {type(spec).__name__}")
    names = ("train", "valid", "test")
    return {name: cls(spec, size, root.fork(f"data.{name}")) for name, size in zip(names, sizes)}


def make_mnist_split(data: MnistData, test: MnistData, spec: SeqMnistSpec | None = None,
                     valid_count: int = 10_000, limit: int | None = None) -> dict:
    """Hold out the last `valid_count` training images for validation.

    With `spec` given the splits are pixel sequences, otherwise whole
    images. `limit` truncates the training set (smoke runs).
    """
    if not 0 < valid_count < data.images.shape[0]:
        raise ConfigError(f"valid_count {valid_count} out of range")
    cut = data.images.shape[0] - valid_count
    parts = {
        "train": (data.images[:cut], data.labels[:cut]),
        "valid": (data.images[cut:], data.labels[cut:]),
        "test": (test.images, test.labels),
    }
    if limit is not None:
        img, lab = parts["train"]
        parts["train"] = (img[:limit], lab[:limit])
    if spec is None:
        return {k: ImageDataset(img, lab) for k, (img, lab) in parts.items()}
    return {k: PixelSeqDataset(img, lab, spec) for k, (img, lab) in parts.items()}


def sample_to_record(sample: Sample) -> dict:
    """JSON-friendly dump of one sample for the gen-task command."""
    return {
        "inputs": sample.inputs.tolist(),
        "targets": sample.targets.tolist(),
        "mask": sample.mask.astype(int).tolist(),
    }


def monte_carlo_copy_ce(spec: CopySpec, n_samples: int, seed: int = 0) -> float:
    """Empirical cross-entropy of a per-position categorical predictor fit on
    held-out samples; the independent check on copy_baseline_ce."""
    if n_samples < 100:
        raise DegenerateInputError("need at least 100 samples for the Monte-Carlo baseline")
    rng = Rng(seed).fork("mc-baseline")
    t = spec.seq_len
    counts = np.ones((t, ALPHABET))  # Laplace smoothing
    half = n_samples // 2
    fit = np.empty((half, t), dtype=np.uint8)
    for i in range(half):
        _, tgt = _gen_copy_symbols(spec, rng)
        fit[i] = tgt
    for pos in range(t):
        counts[pos] += np.bincount(fit[:, pos], minlength=ALPHABET)
    log_probs = np.log(counts / counts.sum(axis=1, keepdims=True))
    total = 0.0
    for _ in range(n_samples - half):
        _, tgt = _gen_copy_symbols(spec, rng)
        total += -log_probs[np.arange(t), tgt].mean()
    return total / (n_samples - half)


def monte_carlo_addition_mse(n_samples: int, seed: int = 0) -> float:
    """Empirical MSE of the constant predictor 1 on fresh samples."""
    rng = Rng(seed).fork("mc-baseline")
    spec = AdditionSpec(seq_len=100)
    err = 0.0
    for _ in range(n_samples):
        s = gen_addition(spec, rng)
        err += (1.0 - s.targets[-1]) ** 2
    return err / n_samples
