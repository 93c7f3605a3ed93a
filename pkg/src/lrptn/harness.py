"""Model assembly, the training loop, evaluation, metrics, and checkpoints.

Two model families:

  * HighwayClassifier: dense input layer with ReLU, a stack of Highway
    layers, dense output head. Dropout before the input layer, before the
    output head, and at the factor sites inside every layer; batch norm
    after the input matrix and after each hidden parameter matrix;
    squared-hinge loss plus an L2 penalty on the output matrix.
  * SeqModel: a recurrent cell (GRU or the vanilla tanh baseline) with a
    learned initial state (GRU) and a dense head applied at every step the
    task's loss mask selects.

The training loop is sequential and fully determined by (config, seed):
data order, dropout masks and initialization all come from labeled RNG
forks. Metrics are appended row by row so a killed run leaves a valid file.
"""

import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import cells, optim, param, tasks
from .autodiff import Tape, Var, grad_of, zero_grads
from .errors import ConfigError, DegenerateInputError, FormatError, NonFiniteGradientError
from .linalg import Rng, uniform_init

CHECKPOINT_MAGIC = b"LRPTN"
CHECKPOINT_VERSION = 1
MNIST_DIR_ENV = "LRPTN_MNIST_DIR"

METRICS_COLUMNS = (
    "update", "epoch", "train_loss", "valid_loss", "valid_accuracy",
    "learning_rate", "grad_norm", "wall_seconds", "skipped_updates",
)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    task: str = "copy"  # copy | addition | pmnist | mnist
    model: str = "gru"  # gru | vanilla | highway

    # task knobs
    copy_lag: int = 50
    copy_variant: str = "fixed"
    seq_len: int = 100  # addition task length
    permutation_seed: int = 0
    train_size: int = 100_000
    valid_size: int = 10_000
    test_size: int = 10_000
    mnist_dir: str | None = None
    mnist_limit: int | None = None  # truncate the training images (smoke runs)

    # model knobs
    n: int = 64
    d: int | None = 24
    param: str = "lrd"  # full | lr | lrd
    depth: int = 5  # highway hidden layers
    activation: str = "relu"
    carry_bias: float = 4.0
    transform_bias: float = -1.0
    batchnorm: bool = True  # highway only
    dropout_in: float = 0.2
    dropout_out: float = 0.5
    dropout_hidden: float = 0.3
    l2_output: float = 0.0  # L2 coefficient on the output matrix

    # optimizer knobs
    optimizer: str = "rmsprop"  # rmsprop | adam
    lr: float = 1e-3
    rho: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rms_eps: float = 1e-8
    clip: str = "norm"  # component | norm | none
    clip_limit: float = 1.0
    schedule: str = "none"  # plateau | none
    patience: int = 3
    lr_factor: float = 0.5

    # run knobs
    batch: int = 20
    updates: int | None = 1000
    epochs: int | None = None
    eval_interval: int = 500
    eval_batch: int = 200
    seed: int = 0
    metrics_out: str | None = None
    checkpoint_out: str | None = None
    threads: int = 1
    record_wall_time: bool = True

    def validate(self) -> "TrainConfig":
        if self.task not in ("copy", "addition", "pmnist", "mnist"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.model not in ("gru", "vanilla", "highway"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.param not in param.KINDS:
            raise ConfigError(f"param must be one of {param.KINDS}, got {self.param!r}")
        if self.param != "full" and (self.d is None or self.d < 1):
            raise ConfigError(f"param kind {self.param!r} needs d >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.updates is None and self.epochs is None:
            raise ConfigError("set updates and/or epochs")
        if self.clip not in ("component", "norm", "none"):
            raise ConfigError(f"clip must be component/norm/none, got {self.clip!r}")
        if self.optimizer not in ("rmsprop", "adam"):
            raise ConfigError(f"optimizer must be rmsprop or adam, got {self.optimizer!r}")
        if self.schedule not in ("plateau", "none"):
            raise ConfigError(f"schedule must be plateau or none, got {self.schedule!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    def resolve_mnist_dir(self) -> str | None:
        return self.mnist_dir or os.environ.get(MNIST_DIR_ENV)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def task_dims(cfg: TrainConfig) -> tuple[int, int]:
    """(input_dim, output_dim) fixed by the task."""
    return {
        "copy": (tasks.ALPHABET, tasks.ALPHABET),
        "addition": (2, 1),
        "pmnist": (1, 10),
        "mnist": (784, 10),
    }[cfg.task]


def loss_kind_for(cfg: TrainConfig) -> str:
    return {"copy": "cross_entropy", "addition": "mse",
            "pmnist": "cross_entropy", "mnist": "l2_hinge"}[cfg.task]


def build_datasets(cfg: TrainConfig) -> dict:
    sizes = (cfg.train_size, cfg.valid_size, cfg.test_size)
    if cfg.task == "copy":
        return tasks.make_split(tasks.CopySpec(cfg.copy_lag, cfg.copy_variant), sizes, cfg.seed)
    if cfg.task == "addition":
        return tasks.make_split(tasks.AdditionSpec(cfg.seq_len), sizes, cfg.seed)
    mdir = cfg.resolve_mnist_dir()
    if mdir is None:
        raise ConfigError(
            f"task {cfg.task!r} needs --mnist-dir or ${MNIST_DIR_ENV} pointing at IDX files"
        )
    train = tasks.load_mnist_idx(
        os.path.join(mdir, "train-images-idx3-ubyte"),
        os.path.join(mdir, "train-labels-idx1-ubyte"),
    )
    test = tasks.load_mnist_idx(
        os.path.join(mdir, "t10k-images-idx3-ubyte"),
        os.path.join(mdir, "t10k-labels-idx1-ubyte"),
    )
    spec = tasks.SeqMnistSpec(cfg.permutation_seed) if cfg.task == "pmnist" else None
    return tasks.make_mnist_split(train, test, spec, cfg.valid_size, cfg.mnist_limit)


# ---------------------------------------------------------------------------
# models


class HighwayClassifier:
    def __init__(self, cfg: TrainConfig, rng: Rng):
        n, d = cfg.n, cfg.d
        in_dim, out_dim = task_dims(cfg)
        self.cfg_dropout = (cfg.dropout_in, cfg.dropout_hidden, cfg.dropout_out)
        self.w_in = Var(uniform_init(rng.fork("input"), n, in_dim, in_dim))
        self.b_in = Var(np.zeros((n, 1)))
        self.bn_in = cells.init_batchnorm(n) if cfg.batchnorm else None
        self.layers = []
        self.layer_bns = []
        for i in range(cfg.depth):
            self.layers.append(cells.init_highway_layer(
                n, cfg.param, d, rng.fork(f"layer{i}"), cfg.activation, cfg.transform_bias))
            self.layer_bns.append(
                (cells.init_batchnorm(n), cells.init_batchnorm(n)) if cfg.batchnorm else None)
        self.w_out = Var(uniform_init(rng.fork("output"), out_dim, n, n))
        self.b_out = Var(np.zeros((out_dim, 1)))
        self.l2_target = "output.w"
        self.params = self._named_params()

    def _named_params(self):
        out = [("input.w", self.w_in), ("input.b", self.b_in)]
        if self.bn_in is not None:
            out += [("input.bn.gamma", self.bn_in.gamma), ("input.bn.beta", self.bn_in.beta)]
        for i, (layer, bns) in enumerate(zip(self.layers, self.layer_bns)):
            for suffix, v in param.map_vars(layer.proposal_map):
                out.append((f"layer{i}.proposal.{suffix}", v))
            for suffix, v in param.map_vars(layer.transform_map):
                out.append((f"layer{i}.transform.{suffix}", v))
            out += [(f"layer{i}.b_proposal", layer.b_proposal),
                    (f"layer{i}.b_transform", layer.b_transform)]
            if bns is not None:
                out += [(f"layer{i}.bn_proposal.gamma", bns[0].gamma),
                        (f"layer{i}.bn_proposal.beta", bns[0].beta),
                        (f"layer{i}.bn_transform.gamma", bns[1].gamma),
                        (f"layer{i}.bn_transform.beta", bns[1].beta)]
        out += [("output.w", self.w_out), ("output.b", self.b_out)]
        return out

    def bn_buffers(self):
        """Non-trainable running statistics, persisted in checkpoints."""
        out = []
        if self.bn_in is not None:
            out.append(("input.bn", self.bn_in))
        for i, bns in enumerate(self.layer_bns):
            if bns is not None:
                out += [(f"layer{i}.bn_proposal", bns[0]), (f"layer{i}.bn_transform", bns[1])]
        return out

    def forward(self, images, mode: str, drop_rng: Rng | None = None, tape=None):
        """images is (input_dim x batch); returns (10 x batch) logits."""
        p_in, p_hidden, p_out = self.cfg_dropout
        n = self.w_in.value.shape[0]
        batch = ad.val(images).shape[1]
        x = images
        if mode == "train":
            if drop_rng is None:
                raise ConfigError("train mode requires a dropout RNG")
            x = ad.cmul(tape, x, cells.dropout_mask(drop_rng, p_in, (ad.val(images).shape[0], batch)))
        z = ad.matmul(tape, self.w_in, x)
        if self.bn_in is not None:
            z = cells.batchnorm_forward(self.bn_in, z, mode, tape)
        h = cells._activate_t(tape, "relu", ad.add_bias(tape, z, self.b_in))
        for layer, bns in zip(self.layers, self.layer_bns):
            masks = None
            if mode == "train":
                inner = None
                if param.map_kind(layer.proposal_map) != "full":
                    inner = cells.dropout_mask(drop_rng, p_hidden, (layer.proposal_map.d, batch))
                masks = cells.HighwayMasks(
                    outer=cells.dropout_mask(drop_rng, p_hidden, (n, batch)), inner=inner)
            h = cells.highway_forward(layer, h, mode, masks, bns, tape)
        if mode == "train":
            h = ad.cmul(tape, h, cells.dropout_mask(drop_rng, p_out, (n, batch)))
        return ad.add_bias(tape, ad.matmul(tape, self.w_out, h), self.b_out)


class SeqModel:
    """Recurrent cell plus a dense head at the loss-masked steps."""

    def __init__(self, cfg: TrainConfig, rng: Rng):
        n, d = cfg.n, cfg.d
        in_dim, out_dim = task_dims(cfg)
        self.kind = cfg.model
        if cfg.model == "gru":
            self.cell = cells.init_gru_cell(n, in_dim, cfg.param, d, rng.fork("cell"),
                                            carry_bias=cfg.carry_bias)
        else:
            self.cell = cells.init_vanilla_cell(n, in_dim, cfg.param, d, rng.fork("cell"))
        self.w_out = Var(uniform_init(rng.fork("output"), out_dim, n, n))
        self.b_out = Var(np.zeros((out_dim, 1)))
        self.l2_target = None
        self.params = self._named_params()

    def _named_params(self):
        out = []
        c = self.cell
        if self.kind == "gru":
            for gate in ("reset", "carry", "prop"):
                out.append((f"cell.u_{gate}", getattr(c, f"u_{gate}")))
            for gate in ("reset", "carry", "prop"):
                for suffix, v in param.map_vars(getattr(c, f"w_{gate}")):
                    out.append((f"cell.w_{gate}.{suffix}", v))
            for gate in ("reset", "carry", "prop"):
                out.append((f"cell.b_{gate}", getattr(c, f"b_{gate}")))
            out.append(("cell.state0", c.state0))
        else:
            out.append(("cell.u_in", c.u_in))
            for suffix, v in param.map_vars(c.w):
                out.append((f"cell.w.{suffix}", v))
            out.append(("cell.b", c.b))
        out += [("output.w", self.w_out), ("output.b", self.b_out)]
        return out

    def bn_buffers(self):
        return []

    def initial_state(self, batch: int, tape=None):
        if self.kind == "gru":
            return ad.matmul(tape, self.cell.state0, np.ones((1, batch)))
        return np.zeros((self.cell.n, batch))

    def forward_sequence(self, inputs: np.ndarray, step_mask: np.ndarray, tape=None):
        """inputs is (T, m, batch); returns logits at the masked steps,
        shape (out_dim, n_masked_steps * batch), step-major columns."""
        batch = inputs.shape[2]
        x = self.initial_state(batch, tape)
        step = cells.gru_step if self.kind == "gru" else cells.vanilla_rnn_step
        kept = []
        for t in range(inputs.shape[0]):
            x = step(self.cell, x, inputs[t], tape)
            if step_mask[t]:
                kept.append(x)
        if not kept:
            raise DegenerateInputError("loss mask selects no steps")
        states = kept[0] if len(kept) == 1 else ad.hstack(tape, kept)
        return ad.add_bias(tape, ad.matmul(tape, self.w_out, states), self.b_out)


def build_model(cfg: TrainConfig, rng: Rng):
    cfg.validate()
    if cfg.model == "highway":
        if cfg.task != "mnist":
            raise ConfigError("the highway classifier runs on the mnist task")
        return HighwayClassifier(cfg, rng)
    if cfg.task == "mnist":
        raise ConfigError("recurrent models take sequence tasks (copy/addition/pmnist)")
    return SeqModel(cfg, rng)


def count_params(model) -> dict:
    """Per-block and total trainable parameter counts."""
    blocks = {}
    for name, var in model.params:
        block = name.split(".")[0]
        blocks[block] = blocks.get(block, 0) + var.value.size
    if isinstance(model, SeqModel) and model.kind == "gru":
        recurrent = sum(v.value.size for name, v in model.params
                        if name.startswith("cell.w_") or name.startswith("cell.b_"))
        blocks["recurrent (state maps + biases)"] = recurrent
    blocks["total"] = sum(v.value.size for _, v in model.params)
    return blocks


# ---------------------------------------------------------------------------
# evaluation


def _batched_indices(size: int, batch: int):
    for lo in range(0, size, batch):
        yield np.arange(lo, min(lo + batch, size))


def evaluate(model, dataset, loss_kind: str, batch: int = 200) -> dict:
    """Mean masked loss (and accuracy for classification) in infer mode."""
    if dataset.size == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    total, hits, count = 0.0, 0.0, 0
    classification = loss_kind in ("cross_entropy", "l2_hinge")
    for idx in _batched_indices(dataset.size, batch):
        if isinstance(model, HighwayClassifier):
            logits = model.forward(dataset.inputs_for(idx), "infer")
            targets = dataset.targets_for(idx)
        else:
            logits = model.forward_sequence(dataset.inputs_for(idx), dataset.loss_mask)
            targets = dataset.targets_for(idx)[dataset.loss_mask].reshape(-1)
        ones = np.ones(logits.shape[1], dtype=bool)
        value, _ = cells.loss(loss_kind, logits, targets, ones)
        total += value * logits.shape[1]
        count += logits.shape[1]
        if classification:
            hits += cells.accuracy(logits, targets, ones) * logits.shape[1]
    out = {"loss": total / count}
    if classification:
        out["accuracy"] = hits / count
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _write_tensor(f, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype=np.float64)
    raw_name = name.encode("utf-8")
    f.write(struct.pack("<Q", len(raw_name)))
    f.write(raw_name)
    f.write(struct.pack("<Q", data.ndim))
    for dim in data.shape:
        f.write(struct.pack("<Q", dim))
    f.write(data.tobytes())


def _read_exact(f, size: int, path: str, what: str) -> bytes:
    raw = f.read(size)
    if len(raw) < size:
        raise FormatError(f"{path}: truncated while reading {what}")
    return raw


def _read_tensor(f, path: str):
    head = f.read(8)
    if not head:
        return None
    if len(head) < 8:
        raise FormatError(f"{path}: truncated tensor header")
    (name_len,) = struct.unpack("<Q", head)
    name = _read_exact(f, name_len, path, "tensor name").decode("utf-8")
    (rank,) = struct.unpack("<Q", _read_exact(f, 8, path, f"rank of {name!r}"))
    dims = struct.unpack(
        f"<{rank}Q", _read_exact(f, 8 * rank, path, f"dims of {name!r}")) if rank else ()
    size = int(np.prod(dims)) if dims else 1
    payload = _read_exact(f, 8 * size, path, f"payload of {name!r}")
    return name, np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def _bytes_tensor(blob: bytes) -> np.ndarray:
    return np.frombuffer(blob, dtype=np.uint8).astype(np.float64)


def _tensor_bytes(arr: np.ndarray) -> bytes:
    return arr.astype(np.uint8).tobytes()


def save_checkpoint(model, path, config: TrainConfig | None = None, optimizer=None,
                    rng_state: dict | None = None, update: int = 0) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, var in model.params:
            _write_tensor(f, name, var.value)
        for name, bn in model.bn_buffers():
            _write_tensor(f, f"{name}.running_mean", bn.running_mean)
            _write_tensor(f, f"{name}.running_var", bn.running_var)
        if optimizer is not None:
            state = optimizer.state_dict()
            arrays = state.pop("arrays")
            for key, arrs in arrays.items():
                for (pname, _), arr in zip(model.params, arrs):
                    _write_tensor(f, f"opt.{pname}.{key}", arr)
            _write_tensor(f, "meta:optimizer", _bytes_tensor(json.dumps(state).encode()))
        if config is not None:
            _write_tensor(f, "meta:config", _bytes_tensor(json.dumps(config.to_dict()).encode()))
        if rng_state is not None:
            _write_tensor(f, "meta:rng", _bytes_tensor(json.dumps(rng_state).encode()))
        _write_tensor(f, "meta:update", np.array([float(update)]))


def read_checkpoint_tensors(path) -> dict:
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC), str(path), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, str(path), "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        out = {}
        while True:
            item = _read_tensor(f, str(path))
            if item is None:
                return out
            out[item[0]] = item[1]


def load_checkpoint(path):
    """Rebuild the model from the stored config echo and parameter tensors.

    Returns (model, info) where info carries the config, update counter,
    optimizer scalars and RNG state when present.
    """
    tensors = read_checkpoint_tensors(path)
    if "meta:config" not in tensors:
        raise FormatError(f"{path}: checkpoint lacks a config echo")
    cfg = TrainConfig.from_dict(json.loads(_tensor_bytes(tensors["meta:config"]).decode()))
    model = build_model(cfg, Rng(cfg.seed).fork("init"))
    for name, var in model.params:
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != var.value.shape:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"model expects {var.value.shape}"
            )
        var.value = tensors[name]
    for name, bn in model.bn_buffers():
        for part in ("running_mean", "running_var"):
            key = f"{name}.{part}"
            if key not in tensors:
                raise FormatError(f"{path}: missing tensor {key!r}")
            setattr(bn, part, tensors[key])
    info = {"config": cfg, "update": int(tensors.get("meta:update", np.zeros(1))[0])}
    if "meta:optimizer" in tensors:
        info["optimizer"] = json.loads(_tensor_bytes(tensors["meta:optimizer"]).decode())
    if "meta:rng" in tensors:
        info["rng"] = json.loads(_tensor_bytes(tensors["meta:rng"]).decode())
    return model, info


# ---------------------------------------------------------------------------
# metrics


class MetricsWriter:
    """Append-only CSV, one flushed line per row."""

    def __init__(self, path):
        self.path = path
        self._f = None
        if path is not None:
            self._f = open(path, "w", buffering=1)
            self._f.write(",".join(METRICS_COLUMNS) + "\n")
        self.rows = []

    @staticmethod
    def _fmt(v) -> str:
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def write(self, **kw):
        row = {c: kw.get(c) for c in METRICS_COLUMNS}
        self.rows.append(row)
        if self._f is not None:
            self._f.write(",".join(self._fmt(row[c]) for c in METRICS_COLUMNS) + "\n")
            self._f.flush()

    def close(self):
        if self._f is not None:
            self._f.close()
            self._f = None


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: object
    history: list
    skipped_updates: int
    best_valid_loss: float
    datasets: dict = field(repr=False, default=None)


def _clip_policy(cfg: TrainConfig):
    if cfg.clip == "component":
        return optim.ComponentClip(cfg.clip_limit)
    if cfg.clip == "norm":
        return optim.NormClip(cfg.clip_limit)
    return None


def _make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return optim.Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return optim.RmsProp(params, cfg.lr, cfg.rho, cfg.rms_eps)


def train(cfg: TrainConfig, datasets: dict | None = None, log=None) -> TrainResult:
    cfg.validate()
    root = Rng(cfg.seed)
    if datasets is None:
        datasets = build_datasets(cfg)
    train_set, valid_set = datasets["train"], datasets["valid"]
    model = build_model(cfg, root.fork("init"))
    loss_kind = loss_kind_for(cfg)
    params = [v for _, v in model.params]
    optimizer = _make_optimizer(cfg, params)
    policy = _clip_policy(cfg)
    schedule = optim.PlateauSchedule(cfg.patience, cfg.lr_factor) if cfg.schedule == "plateau" else None
    drop_rng = root.fork("dropout")
    shuffle_rng = root.fork("shuffle")

    steps_per_epoch = max(1, train_set.size // cfg.batch)
    max_updates = cfg.updates
    if cfg.epochs is not None:
        by_epochs = cfg.epochs * steps_per_epoch
        max_updates = by_epochs if max_updates is None else min(max_updates, by_epochs)

    l2_index = None
    if getattr(model, "l2_target", None) is not None and cfg.l2_output > 0:
        l2_index = [name for name, _ in model.params].index(model.l2_target)

    writer = MetricsWriter(cfg.metrics_out)
    start = time.monotonic()
    skipped = 0
    best_valid = float("inf")
    loss_acc, loss_count = 0.0, 0
    last_norm = None

    def wall() -> float:
        return time.monotonic() - start if cfg.record_wall_time else 0.0

    def run_eval(update: int, epoch: int) -> float:
        nonlocal best_valid, loss_acc, loss_count
        metrics = evaluate(model, valid_set, loss_kind, cfg.eval_batch)
        row_train = loss_acc / loss_count if loss_count else None
        writer.write(update=update, epoch=epoch, train_loss=row_train,
                     valid_loss=metrics["loss"], valid_accuracy=metrics.get("accuracy"),
                     learning_rate=optimizer.lr, grad_norm=last_norm,
                     wall_seconds=wall(), skipped_updates=skipped)
        loss_acc, loss_count = 0.0, 0
        if log:
            acc = metrics.get("accuracy")
            log(f"update {update:>7d} epoch {epoch:>3d} valid {loss_kind} {metrics['loss']:.6f}"
                + (f" acc {acc:.4f}" if acc is not None else "")
                + f" lr {optimizer.lr:.2e}")
        if metrics["loss"] < best_valid:
            best_valid = metrics["loss"]
            if cfg.checkpoint_out:
                save_checkpoint(model, str(cfg.checkpoint_out) + ".best", cfg, optimizer,
                                root.get_state(), update)
        return metrics["loss"]

    run_eval(0, 0)
    update = 0
    epoch = 0
    order = None
    while update < max_updates:
        if update % steps_per_epoch == 0:
            order = shuffle_rng.fork(f"epoch{epoch}").permutation(train_set.size)
        pos = (update % steps_per_epoch) * cfg.batch
        idx = order[pos : pos + cfg.batch]
        update += 1

        tape = Tape()
        zero_grads(params)
        if isinstance(model, HighwayClassifier):
            logits = model.forward(train_set.inputs_for(idx), "train", drop_rng, tape)
            targets = train_set.targets_for(idx)
        else:
            logits = model.forward_sequence(train_set.inputs_for(idx), train_set.loss_mask, tape)
            targets = train_set.targets_for(idx)[train_set.loss_mask].reshape(-1)
        value, dlogits = cells.loss(loss_kind, logits.value, targets,
                                    np.ones(logits.value.shape[1], dtype=bool))
        if l2_index is not None:
            value += cfg.l2_output * float((model.w_out.value ** 2).sum())
        if not np.isfinite(value):
            if isinstance(policy, optim.NormClip):
                skipped += 1
                continue
            raise NonFiniteGradientError(
                f"non-finite training loss at update {update}; "
                "use the norm clip policy for NaN recovery"
            )
        tape.backward((logits, dlogits))
        grads = [grad_of(p) for p in params]
        if l2_index is not None:
            grads[l2_index] = grads[l2_index] + 2.0 * cfg.l2_output * model.w_out.value
        result = optim.clip(policy, grads)
        last_norm = result.grad_norm if np.isfinite(result.grad_norm) else None
        if result.skip:
            skipped += 1
        else:
            optimizer.step(result.grads)
        loss_acc += value
        loss_count += 1

        epoch_done = update % steps_per_epoch == 0
        if epoch_done:
            epoch += 1
        if update % cfg.eval_interval == 0 or update == max_updates or (epoch_done and schedule):
            valid_loss = run_eval(update, epoch)
            if epoch_done and schedule is not None:
                optimizer.lr = schedule.step(valid_loss, optimizer.lr)

    writer.close()
    if cfg.checkpoint_out:
        save_checkpoint(model, str(cfg.checkpoint_out), cfg, optimizer, root.get_state(), update)
    return TrainResult(model=model, history=writer.rows, skipped_updates=skipped,
                       best_valid_loss=best_valid, datasets=datasets)
