"""
Small differentiable-network substrate.

Dense layers, GRU cells and a bidirectional wrapper with hand-written
backward passes, the usual activations, BCE, Adagrad, a central
finite-difference gradient checker and a flat checkpoint format.

Conventions: parameters are float64 numpy arrays owned by their layer and
exposed through ``named_parameters()`` (references, never copies), so
optimizers and the gradient checker update them in place. Backward
functions return gradients; they never mutate parameters.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "LSCKPT 1"
BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    """Array shapes do not line up."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the model."""


def check_shape(name: str, array: np.ndarray, expected: tuple):
    if tuple(array.shape) != tuple(expected):
        raise ShapeError(f"{name}: expected shape {tuple(expected)}, got {tuple(array.shape)}")


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{name}": array for name, array in params.items()}


class Layer:
    """Anything with named float64 parameters."""

    def named_parameters(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def num_parameters(self) -> int:
        return sum(a.size for a in self.named_parameters().values())

    def save(self, path):
        save_params(path, self.named_parameters())

    def load(self, path):
        load_params(path, self.named_parameters())


# -- activations and losses ---------------------------------------------------------


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def tanh_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


def softmax(v, mask: Optional[np.ndarray] = None, axis: int = -1) -> np.ndarray:
    """
    Numerically shifted softmax. Entries where ``mask`` is False get
    probability 0 and are left out of the normalization.
    """
    v = np.asarray(v, dtype=np.float64)
    if mask is None:
        shifted = v - v.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=axis).all():
        raise ValueError("softmax mask leaves an empty slice")
    masked = np.where(mask, v, -np.inf)
    shifted = masked - masked.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


def bce(p, label) -> float:
    """Binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    p = float(np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP))
    y = float(label)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def bce_backward(p, label) -> float:
    """dBCE/dp at the clamped probability."""
    p = float(np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP))
    y = float(label)
    return (p - y) / (p * (1.0 - p))


def cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of flat logits against one class; returns (loss, probs)."""
    probs = softmax(np.ravel(logits))
    shifted = np.ravel(logits) - np.max(logits)
    log_z = math.log(np.exp(shifted).sum())
    return float(log_z - shifted[target]), probs


def cross_entropy_backward(probs: np.ndarray, target: int) -> np.ndarray:
    grad = probs.copy()
    grad[target] -= 1.0
    return grad


# -- dense --------------------------------------------------------------------------


class Dense(Layer):
    """y = x W^T + b over the last axis of x."""

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = xavier_uniform(rng, out_dim, in_dim) if rng is not None else np.zeros((out_dim, in_dim))
        self.b = np.zeros(out_dim)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"dense input: expected (..., {self.in_dim}), got {x.shape}; W is {self.W.shape}")
        return x @ self.W.T + self.b

    def backward(self, x: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.asarray(x, dtype=np.float64)
        if dy.shape != x.shape[:-1] + (self.out_dim,):
            raise ShapeError(f"dense upstream gradient: expected {x.shape[:-1] + (self.out_dim,)}, got {dy.shape}")
        x2 = x.reshape(-1, self.in_dim)
        dy2 = dy.reshape(-1, self.out_dim)
        grads = {"W": dy2.T @ x2, "b": dy2.sum(axis=0)}
        return dy @ self.W, grads


def dense_forward(layer: Dense, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def dense_backward(layer: Dense, x: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx, grads = layer.backward(x, dy)
    return dx, grads["W"], grads["b"]


# -- GRU ----------------------------------------------------------------------------


@dataclass
class GruCache:
    xs: np.ndarray       # (T, I)
    h_prevs: np.ndarray  # (T, H)
    z: np.ndarray
    r: np.ndarray
    n: np.ndarray
    hn: np.ndarray       # U_n h_prev, before the reset gate


class GruCell(Layer):
    """
    Gate blocks are stacked z, r, n in W (3H x I), U (3H x H) and b (3H):

        z = sigmoid(W_z x + U_z h + b_z)
        r = sigmoid(W_r x + U_r h + b_r)
        n = tanh(W_n x + r * (U_n h) + b_n)
        h' = (1 - z) * h + z * n
    """

    def __init__(self, input_size: int, hidden_size: int, rng: Optional[np.random.Generator] = None):
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        if rng is not None:
            self.W = np.vstack([xavier_uniform(rng, H, input_size) for _ in range(3)])
            self.U = np.vstack([xavier_uniform(rng, H, H) for _ in range(3)])
        else:
            self.W = np.zeros((3 * H, input_size))
            self.U = np.zeros((3 * H, H))
        self.b = np.zeros(3 * H)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "U": self.U, "b": self.b}

    def forward_sequence(self, xs: np.ndarray, h0: Optional[np.ndarray] = None) -> tuple[np.ndarray, GruCache]:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 2 or xs.shape[1] != self.input_size:
            raise ShapeError(f"GRU input: expected (T, {self.input_size}), got {xs.shape}")
        T, H = xs.shape[0], self.hidden_size
        if T == 0:
            raise ValueError("GRU needs a non-empty sequence")
        h = np.zeros(H) if h0 is None else np.asarray(h0, dtype=np.float64)
        check_shape("GRU initial state", h, (H,))

        a_x = xs @ self.W.T + self.b
        hs = np.empty((T, H))
        h_prevs = np.empty((T, H))
        z_all, r_all, n_all, hn_all = (np.empty((T, H)) for _ in range(4))
        for t in range(T):
            a_h = self.U @ h
            z = sigmoid(a_x[t, :H] + a_h[:H])
            r = sigmoid(a_x[t, H : 2 * H] + a_h[H : 2 * H])
            hn = a_h[2 * H :]
            n = np.tanh(a_x[t, 2 * H :] + r * hn)
            h_prevs[t] = h
            h = (1.0 - z) * h + z * n
            hs[t] = h
            z_all[t], r_all[t], n_all[t], hn_all[t] = z, r, n, hn
        return hs, GruCache(xs, h_prevs, z_all, r_all, n_all, hn_all)

    def backward_sequence(self, cache: GruCache, dhs: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
        """BPTT. Returns (d inputs (T, I), d initial state (H,), parameter grads)."""
        T, H = cache.h_prevs.shape
        check_shape("GRU output gradient", dhs, (T, H))
        da_x = np.empty((T, 3 * H))
        da_h = np.empty((T, 3 * H))
        dh_next = np.zeros(H)
        for t in range(T - 1, -1, -1):
            z, r, n, hn, h_prev = cache.z[t], cache.r[t], cache.n[t], cache.hn[t], cache.h_prevs[t]
            dh = dhs[t] + dh_next
            dn_pre = dh * z * (1.0 - n * n)
            dz_pre = dh * (n - h_prev) * z * (1.0 - z)
            dr_pre = dn_pre * hn * r * (1.0 - r)
            da_x[t] = np.concatenate([dz_pre, dr_pre, dn_pre])
            da_h[t] = np.concatenate([dz_pre, dr_pre, dn_pre * r])
            dh_next = dh * (1.0 - z) + self.U.T @ da_h[t]
        grads = {
            "W": da_x.T @ cache.xs,
            "U": da_h.T @ cache.h_prevs,
            "b": da_x.sum(axis=0),
        }
        return da_x @ self.W, dh_next, grads


def gru_step(cell: GruCell, x_t: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    hs, _ = cell.forward_sequence(np.asarray(x_t, dtype=np.float64)[None, :], h_prev)
    return hs[0]


def gru_backward(cell: GruCell, cache: GruCache, dhs: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    return cell.backward_sequence(cache, dhs)


@dataclass
class BiGruCache:
    forward: GruCache
    backward: GruCache


class BiGru(Layer):
    """Forward and backward GRU passes concatenated per step: (T, 2H)."""

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        rng: Optional[np.random.Generator] = None,
        fwd: Optional[GruCell] = None,
        bwd: Optional[GruCell] = None,
    ):
        self.fwd = fwd or GruCell(input_size, hidden_size, rng)
        self.bwd = bwd or GruCell(input_size, hidden_size, rng)
        self.hidden_size = hidden_size

    def named_parameters(self) -> dict[str, np.ndarray]:
        if self.fwd is self.bwd:
            return prefixed("fwd", self.fwd.named_parameters())
        return {**prefixed("fwd", self.fwd.named_parameters()), **prefixed("bwd", self.bwd.named_parameters())}

    def forward(self, xs: np.ndarray) -> tuple[np.ndarray, BiGruCache]:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 2 or xs.shape[0] == 0:
            raise ValueError(f"BiGRU needs a non-empty (T, I) sequence, got shape {xs.shape}")
        hf, cf = self.fwd.forward_sequence(xs)
        hb_rev, cb = self.bwd.forward_sequence(xs[::-1])
        return np.concatenate([hf, hb_rev[::-1]], axis=1), BiGruCache(cf, cb)

    def backward(self, cache: BiGruCache, dout: np.ndarray) -> tuple[np.ndarray, dict]:
        H = self.hidden_size
        dxf, _, gf = self.fwd.backward_sequence(cache.forward, dout[:, :H])
        dxb_rev, _, gb = self.bwd.backward_sequence(cache.backward, dout[::-1, H:])
        if self.fwd is self.bwd:
            grads = prefixed("fwd", {k: gf[k] + gb[k] for k in gf})
        else:
            grads = {**prefixed("fwd", gf), **prefixed("bwd", gb)}
        return dxf + dxb_rev[::-1], grads


def bigru_forward(fwd_cell: GruCell, bwd_cell: GruCell, xs: np.ndarray) -> np.ndarray:
    out, _ = BiGru(fwd_cell.input_size, fwd_cell.hidden_size, fwd=fwd_cell, bwd=bwd_cell).forward(xs)
    return out


# -- optimizer ------------------------------------------------------------------------


class Adagrad:
    """acc += g^2; theta -= lr * g / (sqrt(acc) + eps), per named parameter."""

    def __init__(self, learning_rate: float, epsilon: float = 1e-10):
        self.learning_rate = learning_rate
        self.epsilon = epsilon
        self.accumulators: dict[str, np.ndarray] = {}

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name, grad in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            param = params[name]
            check_shape(f"gradient {name}", grad, param.shape)
            acc = self.accumulators.setdefault(name, np.zeros_like(param))
            acc += grad * grad
            denom = np.sqrt(acc) + self.epsilon
            step = np.divide(grad, denom, out=np.zeros_like(grad), where=denom > 0)
            param -= self.learning_rate * step


def adagrad_update(state: Adagrad, params: dict, grads: dict) -> dict:
    state.update(params, grads)
    return params


# -- gradient checking ----------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


class LossAdapter:
    """
    Turns a forward/backward pair into a scalar loss sum(R * f(inputs)) with a
    fixed random R, so grad_check applies to any layer.

    ``forward(inputs) -> (output, cache)``;
    ``backward(cache, d_output) -> (input_grads, param_grads)``.
    """

    def __init__(
        self, named_parameters: Callable[[], dict], forward: Callable, backward: Callable, seed: int = 0
    ):
        self._named_parameters = named_parameters
        self._forward = forward
        self._backward = backward
        self._seed = seed
        self._projection = None

    def named_parameters(self) -> dict[str, np.ndarray]:
        return self._named_parameters()

    def _project(self, output: np.ndarray) -> np.ndarray:
        if self._projection is None or self._projection.shape != np.shape(output):
            self._projection = np.random.default_rng(self._seed).normal(size=np.shape(output))
        return self._projection

    def loss(self, inputs: dict) -> float:
        output, _ = self._forward(inputs)
        return float(np.sum(self._project(output) * output))

    def loss_and_grads(self, inputs: dict) -> tuple[float, dict, dict]:
        output, cache = self._forward(inputs)
        projection = self._project(output)
        input_grads, param_grads = self._backward(cache, projection)
        return float(np.sum(projection * output)), param_grads, input_grads


def grad_check(
    module,
    inputs: dict,
    tolerance: float,
    step: float = 1e-5,
    max_checks_per_array: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences.

    ``module`` exposes ``named_parameters()``, ``loss(inputs)`` and
    ``loss_and_grads(inputs) -> (loss, param_grads, input_grads)``. Every
    parameter and every input with a returned gradient is perturbed; large
    arrays can be subsampled with ``max_checks_per_array``.
    """
    _, param_grads, input_grads = module.loss_and_grads(inputs)
    targets = [(f"param {n}", a, param_grads[n]) for n, a in module.named_parameters().items()]
    targets += [(f"input {n}", inputs[n], g) for n, g in input_grads.items()]

    rng = np.random.default_rng(seed)
    worst_error, worst_name, n_checked = 0.0, "", 0
    for name, array, grad in targets:
        check_shape(f"analytic gradient of {name}", grad, array.shape)
        indices = np.arange(array.size)
        if max_checks_per_array is not None and array.size > max_checks_per_array:
            indices = np.sort(rng.choice(array.size, max_checks_per_array, replace=False))
        flat = array.reshape(-1)
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + step
            plus = module.loss(inputs)
            flat[idx] = original - step
            minus = module.loss(inputs)
            flat[idx] = original
            numeric = (plus - minus) / (2 * step)
            analytic = grad.reshape(-1)[idx]
            error = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            n_checked += 1
            if error > worst_error:
                worst_error, worst_name = error, f"{name}[{idx}]"
    report = GradCheckReport(worst_error, worst_name, n_checked, tolerance)
    logger.debug(f"grad_check: {n_checked} entries, max rel error {worst_error:.3e} at {worst_name}")
    return report


# -- checkpoints ----------------------------------------------------------------------


def save_params(path, params: dict[str, np.ndarray]):
    """Text manifest (name and shape per array) followed by little-endian float64 data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    lines = [CHECKPOINT_MAGIC, str(len(names))]
    for name in names:
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        shape = ",".join(str(d) for d in params[name].shape) or "-"
        lines.append(f"{name} {shape}")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for name in names:
            f.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii", errors="replace").strip()
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (header {magic!r})")
        try:
            count = int(f.readline())
        except ValueError:
            raise CheckpointError(f"{path}: bad parameter count") from None
        manifest = []
        for _ in range(count):
            parts = f.readline().decode("ascii").split()
            if len(parts) != 2:
                raise CheckpointError(f"{path}: malformed manifest line {' '.join(parts)!r}")
            name, shape_text = parts
            shape = () if shape_text == "-" else tuple(int(d) for d in shape_text.split(","))
            manifest.append((name, shape))
        arrays = {}
        for name, shape in manifest:
            n = int(np.prod(shape)) if shape else 1
            data = f.read(8 * n)
            if len(data) != 8 * n:
                raise CheckpointError(f"{path}: truncated data for {name}")
            arrays[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the last array")
    return arrays


def load_params(path, params: dict[str, np.ndarray]):
    """Copy checkpoint values into ``params`` in place; names and shapes must match exactly."""
    stored = read_checkpoint(path)
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))
        extra = sorted(set(stored) - set(params))
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing}, unexpected {extra})")
    for name, values in stored.items():
        if values.shape != params[name].shape:
            raise CheckpointError(
                f"{path}: {name} has shape {values.shape}, model expects {params[name].shape}"
            )
        params[name][...] = values
    logger.info(f"Loaded {len(stored)} arrays from {path}")
