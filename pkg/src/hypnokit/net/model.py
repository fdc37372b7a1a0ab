"""Fully-convolutional encoder/decoder sleep stager with a segment classifier."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import UsageError
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Filter count at level ``j`` is ``ceil(n0 * pf ** (j / 2))`` with
    ``n0 = floor(5 * sqrt(cf))`` unless ``base_filters`` is given.
    """

    depth: int = 12
    progression_factor: float = 2.0
    complexity_factor: float = 1.67
    kernel_size: int = 9
    base_filters: int | None = None
    input_channels: int = 2
    stage_count: int = 5
    epoch_samples: int = 3840
    up_kernel_size: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise UsageError("depth must be at least 1")
        if not self.progression_factor > 1:
            raise UsageError("progression_factor must exceed 1")
        if not self.complexity_factor > 0:
            raise UsageError("complexity_factor must be positive")
        if self.epoch_samples % 2:
            raise UsageError("epoch_samples must be even")
        if self.kernel_size < 1 or self.up_kernel_size < 1:
            raise UsageError("kernel sizes must be positive")
        if self.base_filters is not None and self.base_filters < 1:
            raise UsageError("base_filters must be positive")

    @property
    def n0(self) -> int:
        if self.base_filters is not None:
            return self.base_filters
        return max(1, int(5 * math.sqrt(self.complexity_factor)))

    def filters(self) -> list[int]:
        return [math.ceil(self.n0 * self.progression_factor ** (j / 2)) for j in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class BatchNormState:
    mean: np.ndarray
    var: np.ndarray


class USleep:
    """Encoder/decoder stager.

    ``params`` maps names to leaf tensors in a fixed order; ``bn`` holds the
    running statistics of each batch-norm layer.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        k = config.kernel_size
        filters = config.filters()
        cin = config.input_channels
        for j, nf in enumerate(filters):
            self._conv(f"enc{j}.conv", cin, nf, k, rng)
            self._norm(f"enc{j}.bn", nf)
            cin = nf
        below = filters[-1]
        for j in reversed(range(config.depth)):
            nf = filters[j]
            self._conv(f"dec{j}.up", below, nf, config.up_kernel_size, rng)
            self._norm(f"dec{j}.up_bn", nf)
            self._conv(f"dec{j}.conv", 2 * nf, nf, k, rng)
            self._norm(f"dec{j}.bn", nf)
            below = nf
        s = config.stage_count
        self._conv("head.dense", filters[0], s, 1, rng)
        self._conv("head.fc1", s, s, 1, rng)
        self._conv("head.fc2", s, s, 1, rng)

    def _conv(self, name, cin, cout, k, rng):
        w = _glorot(rng, (cout, cin, k), cin * k, cout * k, self.dtype)
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True, name=f"{name}.b")

    def _norm(self, name, n):
        self.params[f"{name}.gamma"] = Tensor(np.ones(n, self.dtype), requires_grad=True, name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Tensor(np.zeros(n, self.dtype), requires_grad=True, name=f"{name}.beta")
        self.bn[name] = BatchNormState(np.zeros(n, self.dtype), np.ones(n, self.dtype))

    # ------------------------------------------------------------------

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _block(self, x, conv, norm, training):
        p = self.params
        y = T.conv1d(x, p[f"{conv}.w"], p[f"{conv}.b"])
        st = self.bn[norm]
        y = T.batch_norm(y, p[f"{norm}.gamma"], p[f"{norm}.beta"], st.mean, st.var, training)
        return T.elu(y)

    def n_epochs(self, length: int) -> int:
        """Epochs covered by ``length`` samples; a partial tail counts if at least half full."""
        es = self.config.epoch_samples
        full, rest = divmod(length, es)
        return full + (1 if rest * 2 >= es else 0)

    def __call__(self, x, training: bool = False) -> tuple[Tensor, Tensor]:
        """Run on a ``(batch, channels, L)`` array.

        Returns ``(dense_scores, epoch_probs)`` tensors shaped
        ``(batch, S, L)`` and ``(batch, S, E)``.
        """
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        n, c, length = x.shape
        if c != cfg.input_channels:
            raise UsageError(f"expected {cfg.input_channels} input channels, got {c}")
        n_epochs = self.n_epochs(length)
        if length < cfg.epoch_samples:
            raise UsageError(f"input of {length} samples is shorter than one epoch")
        multiple = 2 ** cfg.depth
        padded = -(-length // multiple) * multiple
        left = (padded - length) // 2
        h = T.pad_time(x, left, padded - length - left)

        skips = []
        for j in range(cfg.depth):
            h = self._block(h, f"enc{j}.conv", f"enc{j}.bn", training)
            skips.append(h)
            h = T.maxpool2(h)
        for j in reversed(range(cfg.depth)):
            h = T.upsample2(h)
            h = self._block(h, f"dec{j}.up", f"dec{j}.up_bn", training)
            h = T.concat([skips[j], h], axis=1)
            h = self._block(h, f"dec{j}.conv", f"dec{j}.bn", training)

        p = self.params
        dense = T.tanh(T.conv1d(h, p["head.dense.w"], p["head.dense.b"]))
        dense = T.crop_time(dense, left, left + length)
        usable = min(length, n_epochs * cfg.epoch_samples)
        pooled = T.epoch_mean(T.crop_time(dense, 0, usable), cfg.epoch_samples, n_epochs)
        hidden = T.elu(T.conv1d(pooled, p["head.fc1.w"], p["head.fc1.b"]))
        logits = T.conv1d(hidden, p["head.fc2.w"], p["head.fc2.b"])
        return dense, T.softmax(logits, axis=1)

    # ------------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping of parameters and batch-norm statistics."""
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if arrays[name].shape != t.data.shape:
                raise UsageError(f"shape mismatch for {name}: {arrays[name].shape} vs {t.data.shape}")
            t.data = np.array(arrays[name], dtype=self.dtype)
        for name, st in self.bn.items():
            st.mean = np.array(arrays[f"{name}.running_mean"], dtype=self.dtype)
            st.var = np.array(arrays[f"{name}.running_var"], dtype=self.dtype)

    def copy(self) -> "USleep":
        clone = USleep.__new__(USleep)
        clone.config = self.config
        clone.dtype = self.dtype
        clone.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        clone.bn = {k: BatchNormState(v.mean.copy(), v.var.copy()) for k, v in self.bn.items()}
        return clone


def params(model: USleep) -> int:
    """Trainable parameter count."""
    return model.n_params()


def forward(model: USleep, signal) -> tuple[np.ndarray, np.ndarray]:
    """Inference on one ``(2, L)`` signal.

    Returns dense scores ``(S, L)`` and epoch probabilities ``(E, S)``.
    """
    signal = np.asarray(signal)
    if signal.ndim != 2:
        raise UsageError("signal must have shape (channels, samples)")
    with T.no_grad():
        dense, probs = model(signal[None].astype(model.dtype), training=False)
    return dense.data[0], probs.data[0].T
