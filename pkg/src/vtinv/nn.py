"""Small numpy neural-network substrate with explicit reverse-mode gradients.

Layers operate on padded batches ``(batch, time, features)``. Padding must
sit at the end of each sequence; padded steps never influence valid ones, and
as long as the upstream gradient is zero on padded steps they contribute
nothing to parameter gradients either.

LSTM gate order in the stacked weight matrices is (input, forget, cell,
output).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from vtinv.errors import DataError, DimensionError, NumericError

CHECKPOINT_MAGIC = b"VTM1"


class ParameterStore:
    """Ordered name -> array mapping. Gradients use the same class."""

    def __init__(self, dtype=np.float64):
        self._arrays: dict[str, np.ndarray] = {}
        self.dtype = np.dtype(dtype)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter {name!r}")
        self._arrays[name] = np.asarray(value, dtype=self.dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        if np.shape(value) != self._arrays[name].shape:
            raise DimensionError(f"dimension error: {name} expects {self._arrays[name].shape}")
        self._arrays[name] = np.asarray(value, dtype=self.dtype)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def zeros_like(self) -> "ParameterStore":
        out = ParameterStore(self.dtype)
        for k, v in self._arrays.items():
            out.add(k, np.zeros_like(v))
        return out

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.dtype)
        for k, v in self._arrays.items():
            out.add(k, v.copy())
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        for k, v in self._arrays.items():
            out.add(k, v)
        return out

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.size:
            raise DimensionError(f"dimension error: flat vector has {vec.size} values, store has {self.size}")
        pos = 0
        for k, a in self._arrays.items():
            self._arrays[k] = vec[pos:pos + a.size].reshape(a.shape).astype(self.dtype)
            pos += a.size

    def locate(self, flat_index: int) -> tuple[str, tuple]:
        """Map a flat coordinate to ``(name, index)``."""
        pos = 0
        for k, a in self._arrays.items():
            if flat_index < pos + a.size:
                return k, np.unravel_index(flat_index - pos, a.shape)
            pos += a.size
        raise IndexError(flat_index)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self._arrays.values())


def init_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


_ACTIVATIONS = ("tanh", "identity")


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                  activation: str = "identity") -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"dimension error: input has {x.shape[-1]} features, layer expects {weights.shape[1]}")
    z = x @ weights.T + bias
    return np.tanh(z) if activation == "tanh" else z


@dataclass
class LstmParams:
    """Stacked gate weights: ``w_x`` (4H, in), ``w_h`` (4H, H), ``b`` (4H,)."""

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]


def lstm_step(x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
              p: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM update; works on single vectors or on batches of row vectors."""
    H = p.hidden
    if p.w_x.shape != (4 * H, np.shape(x_t)[-1]) or np.shape(h_prev)[-1] != H or np.shape(c_prev)[-1] != H:
        raise DimensionError("dimension error: lstm_step shapes are inconsistent")
    z = x_t @ p.w_x.T + h_prev @ p.w_h.T + p.b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def _lstm_scan(xp: np.ndarray, w_h: np.ndarray):
    """Run K independent recurrences at once.

    ``xp`` holds precomputed input projections plus bias, shape (K, B, T, 4H);
    ``w_h`` is (K, 4H, H). Returns hidden states (K, B, T, H) and a cache.
    """
    K, B, T, G = xp.shape
    H = G // 4
    h = np.zeros((K, B, H), dtype=xp.dtype)
    c = np.zeros((K, B, H), dtype=xp.dtype)
    hs = np.empty((K, B, T, H), dtype=xp.dtype)
    cs = np.empty((K, B, T, H), dtype=xp.dtype)
    acts = np.empty((K, B, T, G), dtype=xp.dtype)
    w_hT = w_h.transpose(0, 2, 1)
    for t in range(T):
        z = xp[:, :, t] + h @ w_hT
        a = acts[:, :, t]
        a[..., :2 * H] = sigmoid(z[..., :2 * H])
        a[..., 2 * H:3 * H] = np.tanh(z[..., 2 * H:3 * H])
        a[..., 3 * H:] = sigmoid(z[..., 3 * H:])
        c = a[..., H:2 * H] * c + a[..., :H] * a[..., 2 * H:3 * H]
        h = a[..., 3 * H:] * np.tanh(c)
        hs[:, :, t] = h
        cs[:, :, t] = c
    return hs, (hs, cs, acts)


def _lstm_scan_backward(dhs: np.ndarray, cache, w_h: np.ndarray):
    hs, cs, acts = cache
    K, B, T, H = hs.shape
    dxp = np.empty_like(acts)
    dh_next = np.zeros((K, B, H), dtype=hs.dtype)
    dc_next = np.zeros((K, B, H), dtype=hs.dtype)
    zeros = np.zeros((K, B, H), dtype=hs.dtype)
    for t in range(T - 1, -1, -1):
        a = acts[:, :, t]
        i, f, g, o = a[..., :H], a[..., H:2 * H], a[..., 2 * H:3 * H], a[..., 3 * H:]
        tc = np.tanh(cs[:, :, t])
        dh = dhs[:, :, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = cs[:, :, t - 1] if t > 0 else zeros
        dz = dxp[:, :, t]
        dz[..., :H] = dc * g * i * (1.0 - i)
        dz[..., H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[..., 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[..., 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ w_h
    h_prev = np.concatenate([np.zeros((K, B, 1, H), dtype=hs.dtype), hs[:, :, :-1]], axis=2)
    dw_h = dxp.reshape(K, -1, 4 * H).transpose(0, 2, 1) @ h_prev.reshape(K, -1, H)
    return dxp, dw_h


def reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row gather index reversing the first ``length`` steps, padding left in place."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def _gather_time(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(x, idx[:, :, None], axis=1)


class Layer:
    """Interface: ``forward`` caches what ``backward`` needs."""

    params: ParameterStore

    def forward(self, x, lengths):
        raise NotImplementedError

    def backward(self, dy, grads: ParameterStore):
        raise NotImplementedError

    def _cached(self):
        if getattr(self, "_cache", None) is None:
            raise NumericError("no forward state: call forward before backward")
        return self._cache


class Dense(Layer):
    def __init__(self, params: ParameterStore, name: str, n_in: int, n_out: int,
                 activation: str, rng: np.random.Generator):
        if activation not in _ACTIVATIONS:
            raise DataError(f"unknown activation {activation!r}")
        self.params, self.name = params, name
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        params.add(f"{name}.weight", init_uniform(rng, (n_out, n_in), n_in))
        params.add(f"{name}.bias", np.zeros(n_out))
        self._cache = None

    def forward(self, x, lengths=None):
        y = dense_forward(x, self.params[f"{self.name}.weight"], self.params[f"{self.name}.bias"],
                          self.activation)
        self._cache = (x, y)
        return y

    def backward(self, dy, grads):
        x, y = self._cached()
        dz = dy * (1.0 - y * y) if self.activation == "tanh" else dy
        dz2 = dz.reshape(-1, self.n_out)
        grads[f"{self.name}.weight"] += dz2.T @ x.reshape(-1, self.n_in)
        grads[f"{self.name}.bias"] += dz2.sum(axis=0)
        return dz @ self.params[f"{self.name}.weight"]


class LSTM(Layer):
    """Unidirectional LSTM over padded batches; also the building block of BiLSTM."""

    def __init__(self, params: ParameterStore, name: str, n_in: int, hidden: int,
                 rng: np.random.Generator):
        self.params, self.name, self.n_in, self.hidden = params, name, n_in, hidden
        params.add(f"{name}.w_x", init_uniform(rng, (4 * hidden, n_in), n_in))
        params.add(f"{name}.w_h", init_uniform(rng, (4 * hidden, hidden), hidden))
        params.add(f"{name}.b", np.zeros(4 * hidden))
        self._cache = None

    def lstm_params(self) -> LstmParams:
        return LstmParams(self.params[f"{self.name}.w_x"], self.params[f"{self.name}.w_h"],
                          self.params[f"{self.name}.b"])

    def forward(self, x, lengths=None):
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"dimension error: LSTM {self.name} expects {self.n_in} inputs")
        p = self.lstm_params()
        xp = (x @ p.w_x.T + p.b)[None]
        hs, cache = _lstm_scan(xp, p.w_h[None])
        self._cache = (x, cache)
        return hs[0]

    def backward(self, dy, grads):
        x, cache = self._cached()
        p = self.lstm_params()
        dxp, dw_h = _lstm_scan_backward(dy[None], cache, p.w_h[None])
        dxp = dxp[0]
        grads[f"{self.name}.w_x"] += dxp.reshape(-1, 4 * self.hidden).T @ x.reshape(-1, self.n_in)
        grads[f"{self.name}.w_h"] += dw_h[0]
        grads[f"{self.name}.b"] += dxp.reshape(-1, 4 * self.hidden).sum(axis=0)
        return dxp @ p.w_x


class BiLSTM(Layer):
    """Forward and backward LSTMs whose outputs are concatenated per step.

    Both directions run in one stacked recurrence; the backward direction
    sees each sequence reversed within its own length.
    """

    def __init__(self, params: ParameterStore, name: str, n_in: int, hidden: int,
                 rng: np.random.Generator):
        self.params, self.name, self.n_in, self.hidden = params, name, n_in, hidden
        self.directions = (LSTM(params, f"{name}.fwd", n_in, hidden, rng),
                           LSTM(params, f"{name}.bwd", n_in, hidden, rng))
        self._cache = None

    def _stacked(self):
        names = [d.name for d in self.directions]
        w_x = np.stack([self.params[f"{n}.w_x"] for n in names])
        w_h = np.stack([self.params[f"{n}.w_h"] for n in names])
        b = np.stack([self.params[f"{n}.b"] for n in names])
        return w_x, w_h, b

    def forward(self, x, lengths=None):
        B, T, D = x.shape
        if D != self.n_in:
            raise DimensionError(f"dimension error: BiLSTM {self.name} expects {self.n_in} inputs")
        if T == 0:
            raise DataError("empty sequence")
        if lengths is None:
            lengths = np.full(B, T)
        rev = reverse_index(lengths, T)
        xs = np.stack([x, _gather_time(x, rev)])
        w_x, w_h, b = self._stacked()
        xp = xs @ w_x.transpose(0, 2, 1)[:, None] + b[:, None, None, :]
        hs, cache = _lstm_scan(xp, w_h)
        self._cache = (xs, rev, cache)
        return np.concatenate([hs[0], _gather_time(hs[1], rev)], axis=-1)

    def backward(self, dy, grads):
        xs, rev, cache = self._cached()
        H = self.hidden
        w_x, w_h, _ = self._stacked()
        dhs = np.stack([dy[..., :H], _gather_time(np.ascontiguousarray(dy[..., H:]), rev)])
        dxp, dw_h = _lstm_scan_backward(dhs, cache, w_h)
        K = 2
        dxp2 = dxp.reshape(K, -1, 4 * H)
        dw_x = dxp2.transpose(0, 2, 1) @ xs.reshape(K, -1, self.n_in)
        db = dxp2.sum(axis=1)
        for k, d in enumerate(self.directions):
            grads[f"{d.name}.w_x"] += dw_x[k]
            grads[f"{d.name}.w_h"] += dw_h[k]
            grads[f"{d.name}.b"] += db[k]
        dxs = dxp @ w_x[:, None]
        return dxs[0] + _gather_time(dxs[1], rev)


def bilstm_forward(seq: np.ndarray, fwd: LstmParams, bwd: LstmParams) -> np.ndarray:
    """Reference single-sequence BiLSTM built directly from ``lstm_step``."""
    seq = np.asarray(seq)
    if len(seq) == 0:
        raise DataError("empty sequence")
    T = len(seq)

    def run(p, order):
        h = np.zeros(p.hidden)
        c = np.zeros(p.hidden)
        out = np.empty((T, p.hidden))
        for t in order:
            h, c = lstm_step(seq[t], h, c, p)
            out[t] = h
        return out

    return np.hstack([run(fwd, range(T)), run(bwd, range(T - 1, -1, -1))])


# --- gradient checking ---------------------------------------------------------

@dataclass
class LossTerms:
    """A loss kept as unreduced pieces: ``sum(w * r**2)`` plus ``sum(w * v)``.

    Differencing two of these term by term avoids the cancellation of
    subtracting two nearly equal totals, which matters for coordinates whose
    gradient is many orders of magnitude below the loss value.
    """

    squares: list = field(default_factory=list)  # (weight, residual array)
    linear: list = field(default_factory=list)   # (weight, value array)

    def value(self) -> float:
        return float(sum(w * np.sum(r * r) for w, r in self.squares)
                     + sum(w * np.sum(v) for w, v in self.linear))

    def minus(self, other: "LossTerms") -> float:
        total = 0.0
        for (w, a), (_, b) in zip(self.squares, other.squares):
            total += w * np.sum((a - b) * (a + b))
        for (w, a), (_, b) in zip(self.linear, other.linear):
            total += w * np.sum(a - b)
        return float(total)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst_parameter: str
    tolerance: float
    per_parameter: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max relative error {self.max_rel_error:.3e} over {self.n_checked} "
                f"coordinates (worst: {self.worst_parameter}, tolerance {self.tolerance:g})")


def gradient_check(objective: Callable[[], "float | LossTerms"], params: ParameterStore, analytic: ParameterStore,
                   eps: float = 1e-4, tolerance: float = 1e-4, n_coords: int = 200,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``objective``.

    ``objective`` re-evaluates the loss with the current contents of
    ``params``, either as a float or as ``LossTerms``. Checks ``n_coords`` coordinates drawn without replacement (all
    of them if the store is smaller).
    """
    if params.dtype != np.float64:
        raise NumericError("gradient checks require 64-bit parameters")
    rng = rng or np.random.default_rng(0)
    total = params.size
    coords = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, n_coords, replace=False))
    worst, worst_name = 0.0, ""
    per_param: dict[str, float] = {}
    for flat_i in coords:
        name, idx = params.locate(int(flat_i))
        arr = params[name]
        orig = arr[idx]
        arr[idx] = orig + eps
        up = objective()
        arr[idx] = orig - eps
        down = objective()
        arr[idx] = orig
        delta = up.minus(down) if isinstance(up, LossTerms) else up - down
        fd = delta / (2 * eps)
        ga = analytic[name][idx]
        err = abs(ga - fd) / max(abs(ga), abs(fd), 1e-12)
        per_param[name] = max(per_param.get(name, 0.0), err)
        if err >= worst:
            worst, worst_name = err, name
    return GradCheckReport(float(worst), len(coords), worst_name, tolerance, per_param)


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, spec: dict, params: ParameterStore) -> None:
    """``VTM1``, uint32 header length, JSON header, then float64 arrays in store order."""
    header = {"spec": spec, "parameters": [[k, list(v.shape)] for k, v in params.items()]}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, v in params.items():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a VTM1 checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    return json.loads(data[8:8 + n])


def load_checkpoint_into(path, params: ParameterStore) -> dict:
    """Fill ``params`` from a checkpoint after validating names and shapes; returns the spec."""
    data = Path(path).read_bytes()
    header = read_checkpoint_header(path)
    expected = [[k, list(v.shape)] for k, v in params.items()]
    if header["parameters"] != expected:
        raise DataError(f"{path}: checkpoint parameters do not match the model spec")
    pos = 8 + struct.unpack_from("<I", data, 4)[0]
    body = data[pos:]
    if len(body) != 8 * params.size:
        raise DataError(f"{path}: checkpoint body has wrong length")
    params.set_flat(np.frombuffer(body, dtype="<f8"))
    return header["spec"]
