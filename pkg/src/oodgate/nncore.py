"""Small dense feed-forward network trained from scratch with numpy.

Supports batch normalization, inverted dropout, softmax cross-entropy,
SGD/Adam with step-decay learning-rate scheduling, a penultimate-layer
embedding extractor, and finite-difference gradient verification.

Everything is seeded: init, dropout masks, and batch order all derive from
explicit seeds, so a training run is bit-reproducible.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from oodgate.errors import UserError
from oodgate.seeding import sub_seed

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass
class MlpConfig:
    layer_dims: list[int]
    dropout_rate: float = 0.0
    use_batchnorm: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise UserError(f"bad layer_dims {self.layer_dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise UserError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation != "relu":
            raise UserError(f"unsupported activation {self.activation!r}")

    @property
    def n_affine(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-2]


@dataclass
class MlpModel:
    config: MlpConfig
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    rng_seed: int
    meta: dict[str, str] = field(default_factory=dict)

    def clone(self) -> "MlpModel":
        return MlpModel(config=self.config,
                        params={k: v.copy() for k, v in self.params.items()},
                        state={k: v.copy() for k, v in self.state.items()},
                        rng_seed=self.rng_seed, meta=dict(self.meta))


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    base_lr: float = 1e-3
    lr_schedule: str = "constant"  # constant | step_decay
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    epochs: int = 20
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise UserError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "step_decay"):
            raise UserError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise UserError("epochs must be >= 0 and batch_size >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise UserError("adam betas must lie in (0, 1)")
        if self.base_lr < 0:
            raise UserError("base_lr must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-indexed epoch."""
        if self.lr_schedule == "constant":
            return self.base_lr
        return self.base_lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1


def init_model(config: MlpConfig, seed: int) -> MlpModel:
    """He-style init: W ~ N(0, 2/h_in), biases zero, batchnorm identity."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    dims = config.layer_dims
    for i in range(config.n_affine):
        h_in, h_out = dims[i], dims[i + 1]
        params[f"W{i}"] = rng.standard_normal((h_out, h_in)) * np.sqrt(2.0 / h_in)
        params[f"b{i}"] = np.zeros(h_out)
        if config.use_batchnorm and i < config.n_affine - 1:
            params[f"gamma{i}"] = np.ones(h_out)
            params[f"beta{i}"] = np.zeros(h_out)
            state[f"run_mean{i}"] = np.zeros(h_out)
            state[f"run_var{i}"] = np.ones(h_out)
    return MlpModel(config=config, params=params, state=state, rng_seed=seed)


def forward(model: MlpModel, batch: np.ndarray, mode: str = "eval",
            seed: int | None = None, rng: np.random.Generator | None = None,
            update_stats: bool = False):
    """Run the network; returns (logits, cache).

    Train mode uses batch statistics for batchnorm and applies inverted
    dropout with a mask drawn from `rng` (or a fresh generator from `seed`,
    giving a fixed mask per call). Eval mode uses running statistics and is
    deterministic and batch-size invariant.
    """
    if mode not in ("train", "eval"):
        raise UserError(f"bad forward mode {mode!r}")
    cfg = model.config
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if X.shape[1] != cfg.layer_dims[0]:
        raise UserError(f"input dim {X.shape[1]} != model d_in {cfg.layer_dims[0]}")
    if mode == "train" and cfg.dropout_rate > 0 and rng is None:
        if seed is None:
            raise UserError("train-mode forward with dropout needs a seed or rng")
        rng = np.random.default_rng(seed)

    cache = {"X": X, "layers": []}
    a = X
    for i in range(cfg.n_affine):
        layer: dict = {"input": a}
        z = a @ model.params[f"W{i}"].T + model.params[f"b{i}"]
        last = i == cfg.n_affine - 1
        if not last:
            if cfg.use_batchnorm:
                if mode == "train":
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    if update_stats:
                        model.state[f"run_mean{i}"] *= BN_MOMENTUM
                        model.state[f"run_mean{i}"] += (1 - BN_MOMENTUM) * mu
                        model.state[f"run_var{i}"] *= BN_MOMENTUM
                        model.state[f"run_var{i}"] += (1 - BN_MOMENTUM) * var
                else:
                    mu = model.state[f"run_mean{i}"]
                    var = model.state[f"run_var{i}"]
                std = np.sqrt(var + BN_EPS)
                xhat = (z - mu) / std
                layer.update(z=z, xhat=xhat, std=std)
                z = model.params[f"gamma{i}"] * xhat + model.params[f"beta{i}"]
            h = np.maximum(z, 0.0)
            layer["pre_relu"] = z
            if mode == "train" and cfg.dropout_rate > 0:
                mask = (rng.random(h.shape) >= cfg.dropout_rate) / (1 - cfg.dropout_rate)
                layer["drop_mask"] = mask
                h = h * mask
            layer["output"] = h
            a = h
        else:
            a = z
        cache["layers"].append(layer)
    return a, cache


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy; returns (loss, dlogits)."""
    logits = np.atleast_2d(logits)
    if logits.shape[1] < 2:
        raise UserError("cross-entropy needs >= 2 classes")
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - logsumexp[:, None])
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def backward(model: MlpModel, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Backprop through the cached forward pass; returns gradients per parameter."""
    cfg = model.config
    grads: dict[str, np.ndarray] = {}
    da = dlogits
    for i in reversed(range(cfg.n_affine)):
        layer = cache["layers"][i]
        last = i == cfg.n_affine - 1
        if not last:
            if "drop_mask" in layer:
                da = da * layer["drop_mask"]
            da = da * (layer["pre_relu"] > 0)
            if cfg.use_batchnorm:
                xhat, std = layer["xhat"], layer["std"]
                grads[f"gamma{i}"] = (da * xhat).sum(axis=0)
                grads[f"beta{i}"] = da.sum(axis=0)
                g = model.params[f"gamma{i}"] / std
                da = g * (da - da.mean(axis=0) - xhat * (da * xhat).mean(axis=0))
        grads[f"W{i}"] = da.T @ layer["input"]
        grads[f"b{i}"] = da.sum(axis=0)
        da = da @ model.params[f"W{i}"]
    return grads


def train(model: MlpModel, X_train: np.ndarray, y_train: np.ndarray,
          X_val: np.ndarray, y_val: np.ndarray, config: TrainConfig):
    """Mini-batch training; returns (model at best validation accuracy, report)."""
    model = model.clone()
    n = len(X_train)
    if n == 0:
        raise UserError("empty training set")
    rng_batch = np.random.default_rng(sub_seed(config.seed, "batch"))
    rng_drop = np.random.default_rng(sub_seed(config.seed, "dropout"))
    report = TrainReport()
    best = model.clone()
    best_acc = -1.0

    adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}
    t = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng_batch.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, cache = forward(model, X_train[idx], mode="train",
                                    rng=rng_drop, update_stats=True)
            loss, dlogits = cross_entropy_loss(logits, y_train[idx])
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}")
            grads = backward(model, cache, dlogits)
            t += 1
            for k, g in grads.items():
                if config.optimizer == "sgd":
                    model.params[k] -= lr * g
                else:
                    adam_m[k] = config.beta1 * adam_m[k] + (1 - config.beta1) * g
                    adam_v[k] = config.beta2 * adam_v[k] + (1 - config.beta2) * g * g
                    mhat = adam_m[k] / (1 - config.beta1 ** t)
                    vhat = adam_v[k] / (1 - config.beta2 ** t)
                    model.params[k] -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)
            losses.append(loss)
        val_logits, _ = forward(model, X_val, mode="eval")
        val_loss, _ = cross_entropy_loss(val_logits, y_val)
        val_acc = float(np.mean(val_logits.argmax(axis=1) == y_val))
        report.train_loss.append(float(np.mean(losses)))
        report.val_loss.append(val_loss)
        report.val_accuracy.append(val_acc)
        report.lr.append(lr)
        if val_acc > best_acc:
            best_acc = val_acc
            best = model.clone()
            report.best_epoch = epoch
    return best, report


def embed(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Penultimate activation (post-relu, pre-final-affine) in eval mode."""
    single = np.asarray(features).ndim == 1
    _, cache = forward(model, features, mode="eval")
    emb = cache["layers"][-2]["output"]
    return emb[0] if single else emb


def grad_check(model: MlpModel, X: np.ndarray, y: np.ndarray,
               epsilon: float = 1e-5, dropout_seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise UserError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    mode = "train"  # exercises batchnorm batch statistics and dropout

    def loss_fn():
        logits, cache = forward(model, X, mode=mode, seed=dropout_seed)
        loss, dlogits = cross_entropy_loss(logits, y)
        return loss, cache, dlogits

    loss, cache, dlogits = loss_fn()
    analytic = backward(model, cache, dlogits)
    worst = 0.0
    for name, p in model.params.items():
        flat = p.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lp = loss_fn()[0]
            flat[j] = orig - epsilon
            lm = loss_fn()[0]
            flat[j] = orig
            numeric = (lp - lm) / (2 * epsilon)
            a = analytic[name].ravel()[j]
            scale = max(abs(a), abs(numeric))
            # absolute error when both gradients vanish (e.g. dropped-out units)
            err = abs(a - numeric) if scale < 1e-7 else abs(a - numeric) / scale
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format: text header, then named float64 little-endian tensors.
#
#   MLPCKPT v1\n
#   layer_dims=8,16,4\n  dropout_rate=0.5\n  use_batchnorm=1\n
#   activation=relu\n    rng_seed=7\n        meta.<key>=<value>\n ...
#   \n
#   repeated: "tensor <kind>:<name> <dim0> <dim1>...\n" + raw float64 bytes

def save_checkpoint(model: MlpModel, path: str) -> None:
    cfg = model.config
    with open(path, "wb") as f:
        header = ["MLPCKPT v1",
                  "layer_dims=" + ",".join(map(str, cfg.layer_dims)),
                  f"dropout_rate={cfg.dropout_rate!r}",
                  f"use_batchnorm={int(cfg.use_batchnorm)}",
                  f"activation={cfg.activation}",
                  f"rng_seed={model.rng_seed}"]
        header += [f"meta.{k}={v}" for k, v in sorted(model.meta.items())]
        f.write(("\n".join(header) + "\n\n").encode())
        for kind, table in (("param", model.params), ("state", model.state)):
            for name, arr in table.items():
                shape = " ".join(map(str, arr.shape))
                f.write(f"tensor {kind}:{name} {shape}\n".encode())
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> MlpModel:
    with open(path, "rb") as f:
        magic = f.readline().decode().strip()
        if magic != "MLPCKPT v1":
            raise UserError(f"{path}: expected header 'MLPCKPT v1', found {magic!r}")
        fields: dict[str, str] = {}
        meta: dict[str, str] = {}
        while True:
            line = f.readline().decode().rstrip("\n")
            if not line:
                break
            key, _, val = line.partition("=")
            if key.startswith("meta."):
                meta[key[5:]] = val
            else:
                fields[key] = val
        config = MlpConfig(layer_dims=[int(x) for x in fields["layer_dims"].split(",")],
                           dropout_rate=float(fields["dropout_rate"]),
                           use_batchnorm=bool(int(fields["use_batchnorm"])),
                           activation=fields["activation"])
        params: dict[str, np.ndarray] = {}
        state: dict[str, np.ndarray] = {}
        while True:
            line = f.readline().decode()
            if not line:
                break
            parts = line.split()
            if parts[0] != "tensor":
                raise UserError(f"{path}: malformed tensor record {line!r}")
            kind, name = parts[1].split(":")
            shape = tuple(int(x) for x in parts[2:])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
            (params if kind == "param" else state)[name] = arr
        return MlpModel(config=config, params=params, state=state,
                        rng_seed=int(fields["rng_seed"]), meta=meta)
