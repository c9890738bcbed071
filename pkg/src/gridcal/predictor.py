"""Reference predictors, SGD training and the batch-norm machinery used by MCBN.

Every predictor maps an input window of shape ``(12, h, w, c)`` (or a batch
``(n, 12, h, w, c)``) to the frame one horizon ahead, ``(h, w, c)`` (or
``(n, h, w, c)``).  The trainable networks stack the 12 frames along the
channel axis and are fully convolutional, so they accept any grid size.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .io import load_checkpoint, save_checkpoint
from .tensor import N_INPUT_FRAMES, TARGET_STEPS, SampleSequence, ShapeError, stack_frames

log = logging.getLogger(__name__)

DEFAULT_HORIZON = len(TARGET_STEPS) - 1  # the 60-minute target


class TrainingError(RuntimeError):
    pass


class UnsupportedCapabilityError(TypeError):
    pass


# ---------------------------------------------------------------------------
# layers

class Conv2D:
    """'same'-padded 2-D convolution on (n, h, w, f) arrays."""

    def __init__(self, f_in: int, f_out: int, k: int, rng: np.random.Generator, bias: bool = True):
        bound = np.sqrt(1.0 / (f_in * k * k))
        self.k = k
        self.weight = rng.uniform(-bound, bound, size=(k, k, f_in, f_out))
        self.bias = rng.uniform(-bound, bound, size=f_out) if bias else None
        self._cols_cache = None

    def params(self):
        if self.bias is None:
            return {"weight": self.weight}
        return {"weight": self.weight, "bias": self.bias}

    def _cols(self, x):
        """im2col: (n, h, w, f) -> (n, h, w, k*k*f) with 'same' zero padding."""
        p = self.k // 2
        if not p:
            return x
        xpad = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xpad, (self.k, self.k), axis=(1, 2))  # (n, h, w, f, k, k)
        n, h, w = x.shape[:3]
        return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, h, w, -1)

    def forward(self, x, cache=False):
        cols = self._cols(x)
        out = cols @ self.weight.reshape(-1, self.weight.shape[-1])
        if self.bias is not None:
            out += self.bias
        if cache:
            self._cols_cache = cols
        return out

    def backward(self, dout, need_input_grad=True):
        cols = self._cols_cache
        f_out = self.weight.shape[-1]
        grads = {"weight": (cols.reshape(-1, cols.shape[-1]).T @ dout.reshape(-1, f_out)).reshape(self.weight.shape)}
        if self.bias is not None:
            grads["bias"] = dout.sum(axis=(0, 1, 2))
        if not need_input_grad:
            return None, grads
        # input gradient: 'same' correlation with the flipped, transposed kernel
        w_back = self.weight[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, self.weight.shape[2])
        return self._cols(dout) @ w_back, grads


class ChannelLinear:
    """Per-channel linear map over the stacked frames: out_c = sum_t w[t, c] x[t, c] + b[c]."""

    def __init__(self, n_frames: int, n_channels: int, rng: np.random.Generator):
        bound = np.sqrt(1.0 / n_frames)
        self.weight = rng.uniform(-bound, bound, size=(n_frames, n_channels))
        self.bias = rng.uniform(-bound, bound, size=n_channels)
        self._x = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, cache=False):
        t, c = self.weight.shape
        xr = x.reshape(x.shape[:-1] + (t, c))
        if cache:
            self._x = xr
        return np.einsum("nhwtc,tc->nhwc", xr, self.weight) + self.bias

    def backward(self, dout):
        xr = self._x
        grads = {
            "weight": np.einsum("nhwtc,nhwc->tc", xr, dout),
            "bias": dout.sum(axis=(0, 1, 2)),
        }
        dx = dout[..., None, :] * self.weight
        return dx.reshape(xr.shape[:-2] + (-1,)), grads


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return {}

    def forward(self, x, cache=False):
        if cache:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout):
        return dout * self._mask, {}


class BatchNorm:
    """Per-feature batch normalization over the (n, h, w) axes.

    ``mode`` is ``"train"`` (batch statistics, running statistics updated),
    ``"test"`` (running statistics) or ``"fixed"`` (caller-supplied
    ``(mean, var)``, used for stochastic test-time passes).
    """

    def __init__(self, n_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = np.ones(n_features)
        self.beta = np.zeros(n_features)
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.eps = eps
        self.momentum = momentum
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    @staticmethod
    def batch_stats(x):
        return x.mean(axis=(0, 1, 2)), x.var(axis=(0, 1, 2))

    def forward(self, x, cache=False, mode="test", stats=None, update=True):
        if mode == "train":
            mean, var = self.batch_stats(x)
            if update:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mean
                self.running_var = (1 - m) * self.running_var + m * var
        elif mode == "test":
            mean, var = self.running_mean, self.running_var
        elif mode == "fixed":
            mean, var = stats
        else:
            raise ValueError(f"unknown batch-norm mode {mode!r}")
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        if cache:
            self._cache = (xhat, inv_std, mode == "train")
        return xhat * self.gamma + self.beta

    def backward(self, dout):
        xhat, inv_std, batch_mode = self._cache
        grads = {"gamma": (dout * xhat).sum(axis=(0, 1, 2)), "beta": dout.sum(axis=(0, 1, 2))}
        dxhat = dout * self.gamma
        if not batch_mode:
            return dxhat * inv_std, grads
        m = dout.shape[0] * dout.shape[1] * dout.shape[2]
        dx = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
        )
        return dx, grads


# ---------------------------------------------------------------------------
# predictors

class Predictor:
    """Base predictor: ``forward`` maps input windows to the horizon frame."""

    has_batch_norm = False
    is_deterministic = True
    arch = "base"

    def __init__(self, horizon: int = DEFAULT_HORIZON):
        self.horizon = horizon

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, inputs):
        return self.forward(inputs)


def _as_batch(inputs) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs)
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ShapeError(f"expected (12, h, w, c) or (n, 12, h, w, c) inputs, got {x.shape}")


class PersistencePredictor(Predictor):
    """Predicts that the future equals the last observed frame."""

    arch = "persistence"

    def forward(self, inputs):
        x, single = _as_batch(inputs)
        out = x[:, -1].astype(np.float64)
        return out[0] if single else out


class NetPredictor(Predictor):
    """A stack of layers applied to frames stacked on the channel axis.

    Values are divided by ``scale`` on the way in and multiplied on the way
    out, so the layers see roughly unit-range data.
    """

    def __init__(self, layers, n_channels: int, scale: float = 255.0,
                 horizon: int = DEFAULT_HORIZON, seed: int = 0):
        super().__init__(horizon)
        self.layers = layers
        self.n_channels = n_channels
        self.scale = float(scale)
        self.seed = seed
        self.train_batch_size = 12

    @property
    def has_batch_norm(self):
        return any(isinstance(layer, BatchNorm) for layer in self.layers)

    @property
    def bn_layers(self):
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    # parameters ---------------------------------------------------------
    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{k}"] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                for k, v in layer.buffers().items():
                    out[f"{i}.{k}"] = v
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        idx, attr = name.split(".", 1)
        layer = self.layers[int(idx)]
        current = getattr(layer, attr)
        if np.shape(value) != current.shape:
            raise ShapeError(f"{name}: expected shape {current.shape}, got {np.shape(value)}")
        setattr(layer, attr, np.array(value, dtype=np.float64))

    def weight_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.named_params().values()])

    # forward ------------------------------------------------------------
    def _prep(self, inputs):
        x, single = _as_batch(inputs)
        if x.shape[1] != N_INPUT_FRAMES or x.shape[-1] != self.n_channels:
            raise ShapeError(
                f"expected (n, {N_INPUT_FRAMES}, h, w, {self.n_channels}) inputs, got {x.shape}"
            )
        return stack_frames(x).astype(np.float64) / self.scale, single

    def _run(self, z, cache=False, bn_mode="test", bn_stats=None, update=True):
        bn_i = 0
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                if bn_stats is not None and bn_i < len(bn_stats):
                    z = layer.forward(z, cache, mode="fixed", stats=bn_stats[bn_i])
                else:
                    z = layer.forward(z, cache, mode=bn_mode, update=update)
                bn_i += 1
            else:
                z = layer.forward(z, cache)
        return z

    def forward(self, inputs, chunk: int = 64):
        z, single = self._prep(inputs)
        out = np.concatenate([self._run(z[i:i + chunk]) for i in range(0, len(z), chunk)])
        out *= self.scale
        return out[0] if single else out

    def reference_stats(self, reference_batch, n_stochastic: int = 2):
        """Batch statistics of the first ``n_stochastic`` BN layers on a reference batch.

        Deeper BN layers use running statistics when computing the
        statistics of shallower ones.
        """
        z, _ = self._prep(reference_batch)
        stats = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                if len(stats) < n_stochastic:
                    mean, var = layer.batch_stats(z)
                    stats.append((mean, var))
                    z = layer.forward(z, mode="fixed", stats=(mean, var))
                else:
                    z = layer.forward(z, mode="test")
            else:
                z = layer.forward(z)
        return stats

    def forward_with_stats(self, inputs, stats):
        z, single = self._prep(inputs)
        out = self._run(z, bn_stats=stats) * self.scale
        return out[0] if single else out

    # training -----------------------------------------------------------
    def loss_and_grads(self, x, y):
        """MSE in scaled units on a batch; returns (loss, {name: grad}).

        ``x`` is (n, 12, h, w, c) raw inputs, ``y`` is (n, h, w, c) raw targets.
        Runs batch-norm layers in train mode and updates running statistics.
        """
        z, _ = self._prep(x)
        yn = np.asarray(y, dtype=np.float64) / self.scale
        pred = self._run(z, cache=True, bn_mode="train")
        diff = pred - yn
        loss = float(np.mean(diff**2))
        dz = 2.0 * diff / diff.size
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            if i == 0 and isinstance(self.layers[0], Conv2D):
                dz, g = self.layers[0].backward(dz, need_input_grad=False)
            else:
                dz, g = self.layers[i].backward(dz)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return loss, grads

    # persistence --------------------------------------------------------
    def save(self, path) -> None:
        meta = {"arch": self.arch, "n_channels": self.n_channels, "scale": self.scale,
                "horizon": self.horizon, "seed": self.seed,
                "train_batch_size": self.train_batch_size}
        save_checkpoint({**self.named_params(), **self.named_buffers()}, path, meta)


class LinearPredictor(NetPredictor):
    """Per-channel linear combination of the 12 input frames."""

    arch = "linear"

    def __init__(self, n_channels: int = 8, scale: float = 255.0,
                 horizon: int = DEFAULT_HORIZON, seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__([ChannelLinear(N_INPUT_FRAMES, n_channels, rng)],
                         n_channels, scale, horizon, seed)


class ConvBNPredictor(NetPredictor):
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> conv1x1.

    The convolutions feeding a BN layer carry no bias (BN's shift replaces it).
    """

    arch = "conv"

    def __init__(self, n_channels: int = 8, hidden: int = 16, scale: float = 255.0,
                 horizon: int = DEFAULT_HORIZON, seed: int = 0):
        rng = np.random.default_rng(seed)
        f_in = N_INPUT_FRAMES * n_channels
        layers = [
            Conv2D(f_in, hidden, 3, rng, bias=False), BatchNorm(hidden), ReLU(),
            Conv2D(hidden, hidden, 3, rng, bias=False), BatchNorm(hidden), ReLU(),
            Conv2D(hidden, n_channels, 1, rng),
        ]
        super().__init__(layers, n_channels, scale, horizon, seed)
        self.hidden = hidden


ARCHITECTURES: dict[str, Callable[..., Predictor]] = {
    "persistence": PersistencePredictor,
    "linear": LinearPredictor,
    "conv": ConvBNPredictor,
}


def make_predictor(arch: str, **kwargs) -> Predictor:
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None
    if cls is PersistencePredictor:
        # nothing to initialize; seed and shape arguments are accepted and ignored
        return cls(horizon=kwargs.get("horizon", DEFAULT_HORIZON))
    return cls(**kwargs)


def load_predictor(path) -> Predictor:
    params, meta = load_checkpoint(path)
    arch = meta["arch"]
    if arch == "persistence":
        return PersistencePredictor(horizon=int(meta.get("horizon", DEFAULT_HORIZON)))
    kwargs = dict(n_channels=int(meta["n_channels"]), scale=float(meta["scale"]),
                  horizon=int(meta["horizon"]), seed=int(meta["seed"]))
    if arch == "conv":
        kwargs["hidden"] = params["0.weight"].shape[-1]
    model = make_predictor(arch, **kwargs)
    for name, value in params.items():
        model.set_param(name, value)
    model.train_batch_size = int(meta.get("train_batch_size", 12))
    return model


def save_predictor(model: Predictor, path) -> None:
    if isinstance(model, NetPredictor):
        model.save(path)
    else:
        save_checkpoint({}, path, {"arch": model.arch, "horizon": model.horizon})


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 12
    epochs: int = 5
    seed: int = 0
    shuffle: bool = True
    optimizer: str = "sgd"  # or "adam"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError(f"invalid training config {self}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, grads):
        self.t += 1
        out = {}
        for name, g in grads.items():
            m = self.m[name] = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            out[name] = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def _dataset_arrays(data, horizon: int):
    """Return a callable mapping an index array to (x, y) batches, and the length."""
    if isinstance(data, tuple) and len(data) == 2:
        x, y = (np.asarray(a) for a in data)
        if len(x) != len(y):
            raise ShapeError("inputs and targets differ in length")
        return (lambda idx: (x[idx], y[idx])), len(x)
    samples: Sequence[SampleSequence] = list(data)

    def fetch(idx):
        return (np.stack([samples[i].inputs for i in idx]),
                np.stack([samples[i].target(horizon) for i in idx]))

    return fetch, len(samples)


def train(model: Predictor, data, cfg: TrainConfig) -> tuple[Predictor, list[float]]:
    """Mini-batch gradient descent on MSE.  Mutates and returns ``model`` with the per-epoch loss trace.

    ``data`` is a list of :class:`SampleSequence` or an ``(inputs, targets)``
    pair of arrays.
    """
    fetch, n = _dataset_arrays(data, model.horizon)
    if n == 0:
        raise ValueError("training data is empty")
    if not isinstance(model, NetPredictor):
        return model, []
    model.train_batch_size = cfg.batch_size
    rng = np.random.default_rng(cfg.seed)
    adam = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else None
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and model.has_batch_norm:
                continue  # a single-sample batch has degenerate batch statistics
            x, y = fetch(idx)
            loss, grads = model.loss_and_grads(x, y)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            steps = adam.step(grads) if adam else {k: cfg.learning_rate * g for k, g in grads.items()}
            for name, step in steps.items():
                idx_, attr = name.split(".", 1)
                layer = model.layers[int(idx_)]
                setattr(layer, attr, getattr(layer, attr) - step)
            losses.append(loss)
        trace.append(float(np.mean(losses)) if losses else float("nan"))
        log.debug("epoch %d loss %.6g", epoch, trace[-1])
    return model, trace


def derive_seeds(seed: int, m: int) -> list[int]:
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(m)]


@dataclass
class EnsembleModel:
    members: list[Predictor]
    member_seeds: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    def forward_all(self, inputs) -> np.ndarray:
        """Stack of member outputs, member axis first."""
        return np.stack([m.forward(inputs) for m in self.members])


def train_ensemble(arch: str | Callable[..., Predictor], data, cfg: TrainConfig, m: int = 5,
                   **model_kwargs) -> EnsembleModel:
    """Train ``m`` members that differ only in initialization and shuffling seed."""
    if m < 1:
        raise ValueError("ensemble size must be >= 1")
    factory = (lambda **kw: make_predictor(arch, **kw)) if isinstance(arch, str) else arch
    seeds = derive_seeds(cfg.seed, m)
    members = []
    for s in seeds:
        model = factory(seed=s, **model_kwargs)
        train(model, data, dataclasses.replace(cfg, seed=s))
        members.append(model)
    return EnsembleModel(members, seeds)


def forward_stochastic_bn(model: Predictor, inputs, reference_batch, n_stochastic: int = 2):
    """Forward pass with the first ``n_stochastic`` BN layers normalized by a reference batch."""
    if not getattr(model, "has_batch_norm", False):
        raise UnsupportedCapabilityError(f"{type(model).__name__} has no batch-norm layers")
    ref = np.asarray(reference_batch)
    if len(ref) != model.train_batch_size:
        raise ValueError(
            f"reference batch has {len(ref)} samples; training used batches of {model.train_batch_size}"
        )
    stats = model.reference_stats(ref, n_stochastic)
    return model.forward_with_stats(inputs, stats)
