"""Dense ReLU multilayer perceptron with hand-written backprop and Adam."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DivergenceError

DEFAULT_DIMS = (287, 100, 100, 40)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    hidden: tuple = (100, 100)
    init: str = "he-uniform"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    standardize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate: must be positive")
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("epochs: must be an integer >= 1")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("batch_size: must be an integer >= 1")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden: layer widths must be positive")
        if self.init != "he-uniform":
            raise ConfigError(f"init: unsupported initializer {self.init!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ConfigError("adam: need 0 <= beta < 1 and epsilon > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"train config: unknown field {sorted(unknown)[0]!r}")
        return cls(**d)


@dataclass
class MlpModel:
    """Affine layers ``(W, b)`` with ``W`` shaped ``out x in``.

    ReLU follows every layer except the last.
    """

    weights: list
    biases: list
    config: TrainConfig | None = None
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DataError("model needs matching, non-empty weight and bias lists")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise DataError(f"layer {k}: weight {W.shape} and bias {b.shape} disagree")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise DataError(f"layer {k}: input width {W.shape[1]} does not chain")

    @property
    def dims(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def params(self) -> list:
        """Flat parameter list in layer order: W1, b1, W2, b2, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params) -> "MlpModel":
        return MlpModel(list(params[0::2]), list(params[1::2]), self.config,
                        self.input_mean, self.input_std)

    def prepare(self, X):
        """Apply the stored input standardization, if any."""
        X = np.asarray(X, dtype=float)
        if self.input_mean is not None:
            X = (X - self.input_mean) / self.input_std
        return X

    def predict(self, X):
        return forward(self, self.prepare(X))

    def __call__(self, X):
        return forward(self, X)

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "dims": list(self.dims),
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "config": self.config.to_dict() if self.config else None,
        }
        if self.input_mean is not None:
            d["input_mean"] = np.asarray(self.input_mean).tolist()
            d["input_std"] = np.asarray(self.input_std).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        try:
            dims = d["dims"]
            weights = [np.asarray(w, dtype=float).reshape(dims[k + 1], dims[k])
                       for k, w in enumerate(d["weights"])]
            biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        except (KeyError, ValueError, IndexError) as exc:
            raise DataError(f"malformed model document: {exc}") from None
        config = TrainConfig.from_dict(d["config"]) if d.get("config") else None
        mean = np.asarray(d["input_mean"]) if "input_mean" in d else None
        std = np.asarray(d["input_std"]) if "input_std" in d else None
        return cls(weights, biases, config, mean, std)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_model(dims=DEFAULT_DIMS, seed: int = 0) -> MlpModel:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases."""
    dims = tuple(int(x) for x in dims)
    if len(dims) < 2 or any(x < 1 for x in dims):
        raise ConfigError(f"dims: need at least two positive sizes, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


def _check_input(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.dims[0]:
        raise DataError(f"input shape {X.shape} does not match input width {model.dims[0]}")
    return X


def _forward_cache(model, X):
    acts = [X]
    pre = []
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ W.T + b
        pre.append(z)
        acts.append(z if k == last else np.maximum(z, 0.0))
    return pre, acts


def forward(model: MlpModel, X) -> np.ndarray:
    X = _check_input(model, X)
    return _forward_cache(model, X)[1][-1]


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def backward(model: MlpModel, X, Y):
    """Analytic gradients of :func:`mse_loss` for every parameter.

    Returns ``(loss, grads)`` where ``grads`` follows :meth:`MlpModel.params`
    ordering. The ReLU derivative at exactly zero is taken as zero.
    """
    X = _check_input(model, X)
    Y = np.asarray(Y, dtype=float)
    pre, acts = _forward_cache(model, X)
    pred = acts[-1]
    if Y.shape != pred.shape:
        raise DataError(f"target shape {Y.shape} does not match output {pred.shape}")
    resid = pred - Y
    loss = float(np.mean(resid ** 2))
    delta = 2.0 * resid / resid.size
    grads = [None] * (2 * len(model.weights))
    for k in range(len(model.weights) - 1, -1, -1):
        grads[2 * k] = delta.T @ acts[k]
        grads[2 * k + 1] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k]) * (pre[k - 1] > 0)
    return loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(params', state')``."""
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


@dataclass
class LossHistory:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def __len__(self):
        return len(self.train)


def train(X, Y, config: TrainConfig = TrainConfig(), validation=None):
    """Fit a fresh MLP of topology ``(d, *config.hidden, 40)`` with Adam.

    ``validation`` is an optional ``(X_val, Y_val)`` pair scored per epoch.
    Raises :class:`DivergenceError` when the epoch loss is non-finite.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DataError(f"X {X.shape} and Y {Y.shape} are not row-aligned matrices")
    n = X.shape[0]
    if config.batch_size > n:
        raise ConfigError(f"batch_size: {config.batch_size} exceeds {n} training samples")
    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    dims = (X.shape[1],) + config.hidden + (Y.shape[1],)
    model = init_model(dims, seed=init_seq)
    model.config = config
    params = model.params()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(shuffle_seq)
    history = LossHistory()
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                batch = order[start:start + config.batch_size]
                _, grads = backward(model, X[batch], Y[batch])
                params, state = adam_step(params, grads, state, config.learning_rate,
                                          config.beta1, config.beta2, config.epsilon)
                model = model.with_params(params)
            loss = mse_loss(forward(model, X), Y)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            history.train.append(loss)
            if validation is not None:
                history.validation.append(mse_loss(forward(model, validation[0]), validation[1]))
    return model, history
