"""Small dense/LSTM network core with hand-written backprop and Adam.

Parameters live in :class:`ParamBlock` objects (value, grad and Adam
moments).  Layers are plain functions over numpy arrays; an LSTM segment
is run forward step by step and differentiated through time in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
from scipy.special import expit

WEIGHTS_HEADER = "cfnav-weights v1"
BCE_EPS = 1e-7


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ParamBlock:
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)
        shapes = {a.shape for a in (self.value, self.grad, self.adam_m, self.adam_v)}
        if len(shapes) != 1:
            raise ValueError(f"{self.name}: value/grad/moment shapes differ: {shapes}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def astype(self, dtype) -> "ParamBlock":
        return ParamBlock(self.name, self.value.astype(dtype), self.grad.astype(dtype),
                          self.adam_m.astype(dtype), self.adam_v.astype(dtype), self.step_count)


def flatten_blocks(blocks: list[ParamBlock], name: str = "flat") -> ParamBlock:
    """Move ``blocks`` into one contiguous buffer and rebind them as views.

    Returns a block spanning the whole buffer, so a group of parameters can
    be synchronised, clipped and stepped with a handful of vector ops.
    """
    dtype = blocks[0].value.dtype if blocks else np.float32
    n = sum(b.value.size for b in blocks)
    flat = ParamBlock(name, np.zeros(n, dtype=dtype),
                      step_count=blocks[0].step_count if blocks else 0)
    off = 0
    for b in blocks:
        k = b.value.size
        for attr in ("value", "grad", "adam_m", "adam_v"):
            view = getattr(flat, attr)[off:off + k].reshape(b.value.shape)
            view[...] = getattr(b, attr)
            setattr(b, attr, view)
        off += k
    return flat


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")


# --------------------------------------------------------------------------
# elementwise

def sigmoid(z):
    return expit(z)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def bce(p_true, p_hat, eps: float = BCE_EPS):
    """Binary cross-entropy with ``p_hat`` clamped to [eps, 1 - eps]."""
    q = np.clip(p_hat, eps, 1.0 - eps)
    return -p_true * np.log(q) - (1.0 - p_true) * np.log(1.0 - q)


def bce_logit_grad(p_true, p_hat, eps: float = BCE_EPS):
    """d bce / d logit where ``p_hat = sigmoid(logit)``; zero while clamped."""
    g = p_hat - p_true
    return np.where((p_hat < eps) | (p_hat > 1.0 - eps), 0.0, g)


# --------------------------------------------------------------------------
# dense

def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``y = W x + b`` for a vector, or row-wise for a (T, in) batch."""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense shape mismatch: W{W.shape} b{b.shape} x{x.shape}")
    if x.ndim == 1:
        return W @ x + b
    return x @ W.T + b


def dense_backward(W: np.ndarray, x: np.ndarray, dy: np.ndarray):
    """Gradients ``(dW, db, dx)`` of a dense layer given upstream ``dy``."""
    if dy.shape[-1] != W.shape[0] or x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense shape mismatch: W{W.shape} x{x.shape} dy{dy.shape}")
    if x.ndim == 1:
        return np.outer(dy, x), dy.copy(), W.T @ dy
    return dy.T @ x, dy.sum(axis=0), dy @ W


class Dense:
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 scale: float | None = None, dtype=np.float32):
        self.n_in, self.n_out = n_in, n_out
        if rng is None:
            w = np.zeros((n_out, n_in))
        else:
            # normalised-row init; scale sets each output row's norm
            w = rng.standard_normal((n_out, n_in))
            s = np.sqrt(2.0) if scale is None else scale
            w *= s / np.sqrt((w ** 2).sum(axis=1, keepdims=True))
        self.W = ParamBlock(f"{name}.W", w.astype(dtype))
        self.b = ParamBlock(f"{name}.b", np.zeros(n_out, dtype=dtype))

    @property
    def params(self) -> list[ParamBlock]:
        return [self.W, self.b]

    def __call__(self, x):
        return dense_forward(self.W.value, self.b.value, x)

    def backward(self, x, dy):
        dW, db, dx = dense_backward(self.W.value, x, dy)
        self.W.grad += dW
        self.b.grad += db
        return dx


# --------------------------------------------------------------------------
# LSTM

class LstmCell:
    """Single LSTM layer; gate order (input, forget, cell, output)."""

    def __init__(self, name: str, input_size: int, hidden_size: int,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 forget_bias: float = 1.0):
        self.input_size, self.hidden_size = input_size, hidden_size
        n = 4 * hidden_size
        if rng is None:
            w = np.zeros((n, input_size + hidden_size))
            b = np.zeros(n)
        else:
            k = 1.0 / np.sqrt(hidden_size)
            w = rng.uniform(-k, k, (n, input_size + hidden_size))
            b = np.zeros(n)
            b[hidden_size:2 * hidden_size] = forget_bias
        self.W = ParamBlock(f"{name}.W", w.astype(dtype))
        self.b = ParamBlock(f"{name}.b", b.astype(dtype))

    @property
    def params(self) -> list[ParamBlock]:
        return [self.W, self.b]

    def zero_state(self):
        dt = self.W.value.dtype
        return np.zeros(self.hidden_size, dtype=dt), np.zeros(self.hidden_size, dtype=dt)


@dataclass
class LstmCache:
    xh: np.ndarray
    gates: np.ndarray  # activated gates, cell-candidate part is tanh
    c_prev: np.ndarray
    tanh_c: np.ndarray


def lstm_forward(cell: LstmCell, x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """One LSTM step.  Returns ``(h_t, c_t, cache)``."""
    H = cell.hidden_size
    if x_t.shape != (cell.input_size,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ValueError(f"lstm shape mismatch: x{x_t.shape} h{h_prev.shape} c{c_prev.shape}")
    xh = np.concatenate((x_t, h_prev))
    z = cell.W.value @ xh + cell.b.value
    gates = expit(z)
    gates[2 * H:3 * H] = np.tanh(z[2 * H:3 * H])
    c = gates[H:2 * H] * c_prev + gates[:H] * gates[2 * H:3 * H]
    tc = np.tanh(c)
    h = gates[3 * H:] * tc
    return h, c, LstmCache(xh, gates, c_prev, tc)


def lstm_backward(cell: LstmCell, caches: list[LstmCache], dh_seq: np.ndarray,
                  dh_next: np.ndarray | None = None, dc_next: np.ndarray | None = None):
    """Backprop through an unrolled segment.

    ``dh_seq[t]`` is the loss gradient w.r.t. ``h_t``; ``dh_next``/``dc_next``
    carry gradient from beyond the segment (zero when truncated).  Parameter
    gradients accumulate into the cell's blocks.  Returns
    ``(dx_seq, dh_prev, dc_prev)`` for the segment's inputs and initial state.
    """
    H, I = cell.hidden_size, cell.input_size
    T = len(caches)
    W = cell.W.value
    dt = W.dtype
    dh = np.zeros(H, dtype=dt) if dh_next is None else dh_next.astype(dt, copy=True)
    dc = np.zeros(H, dtype=dt) if dc_next is None else dc_next.astype(dt, copy=True)
    dZ = np.empty((T, 4 * H), dtype=dt)
    dX = np.empty((T, I), dtype=dt)
    for t in range(T - 1, -1, -1):
        k = caches[t]
        g = k.gates
        dh = dh + dh_seq[t]
        dc = dc + dh * g[3 * H:] * (1.0 - k.tanh_c * k.tanh_c)
        dg = np.concatenate((dc * g[2 * H:3 * H], dc * k.c_prev, dc * g[:H], dh * k.tanh_c))
        deriv = g * (1.0 - g)
        deriv[2 * H:3 * H] = 1.0 - g[2 * H:3 * H] ** 2
        dz = dg * deriv
        dZ[t] = dz
        dc = dc * g[H:2 * H]
        dxh = W.T @ dz
        dX[t] = dxh[:I]
        dh = dxh[I:]
    XH = np.stack([k.xh for k in caches])
    cell.W.grad += dZ.T @ XH
    cell.b.grad += dZ.sum(axis=0)
    return dX, dh, dc


# --------------------------------------------------------------------------
# optimiser

def adam_step(block: ParamBlock, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamBlock:
    """Bias-corrected Adam update in place; zeroes ``block.grad`` afterwards."""
    g = block.grad
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient in {block.name}")
    block.step_count += 1
    t = block.step_count
    block.adam_m *= beta1
    block.adam_m += (1.0 - beta1) * g
    block.adam_v *= beta2
    block.adam_v += (1.0 - beta2) * g * g
    m_hat = block.adam_m / (1.0 - beta1 ** t)
    v_hat = block.adam_v / (1.0 - beta2 ** t)
    block.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(block.value.dtype)
    g.fill(0.0)
    return block


def clip_grad_norm(blocks: Iterable[ParamBlock], max_norm: float) -> float:
    blocks = list(blocks)
    total = float(np.sqrt(sum(float(np.sum(b.grad.astype(np.float64) ** 2)) for b in blocks)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for b in blocks:
            b.grad *= scale
    return total


# --------------------------------------------------------------------------
# gradient checking

class Differentiable(Protocol):
    params: list[ParamBlock]

    def loss(self, inputs) -> float: ...

    def loss_and_grad(self, inputs) -> float: ...


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        lines = [f"{n}: {e:.3e}" for n, e in self.errors.items()]
        lines.append(f"max rel err {self.max_rel_error:.3e} ({'pass' if self.passed else 'FAIL'})")
        return "\n".join(lines)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def grad_check(network: Differentiable, inputs, tolerance: float = 1e-4,
               h: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central differences for every block.

    The error per block is ``|g_a - g_n| / (|g_a| + |g_n|)`` in the 2-norm.
    Run on float64 networks; float32 central differences are too noisy.
    """
    report = GradCheckReport(tolerance=tolerance)
    blocks = list(network.params)
    if not blocks:
        return report
    for b in blocks:
        b.zero_grad()
    network.loss_and_grad(inputs)
    analytic = {b.name: b.grad.astype(np.float64).copy() for b in blocks}
    for b in blocks:
        numeric = np.zeros(b.value.shape, dtype=np.float64)
        flat = b.value.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = network.loss(inputs)
            flat[i] = old - h
            down = network.loss(inputs)
            flat[i] = old
            nflat[i] = (up - down) / (2 * h)
        report.errors[b.name] = relative_error(analytic[b.name], numeric)
    for b in blocks:
        b.zero_grad()
    return report


# --------------------------------------------------------------------------
# weight files

def save_weights(blocks: Iterable[ParamBlock], path) -> None:
    Path(path).write_bytes(weights_to_bytes(blocks))


def weights_to_bytes(blocks: Iterable[ParamBlock]) -> bytes:
    out = bytearray((WEIGHTS_HEADER + "\n").encode())
    for b in blocks:
        shape = "x".join(str(d) for d in b.value.shape) or "scalar"
        out += f"{b.name} {shape} {b.step_count}\n".encode()
        for arr in (b.value, b.adam_m, b.adam_v):
            out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        out += b"\n"
    out += b"end\n"
    return bytes(out)


def weights_from_bytes(data: bytes, source: str = "<bytes>") -> list[ParamBlock]:
    pos = data.find(b"\n")
    if pos < 0 or data[:pos].decode(errors="replace") != WEIGHTS_HEADER:
        raise ValueError(f"{source}: not a '{WEIGHTS_HEADER}' file")
    pos += 1
    blocks = []
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise ValueError(f"{source}: truncated weight file")
        line = data[pos:end].decode()
        pos = end + 1
        if line == "end":
            return blocks
        try:
            name, shape_s, steps = line.split(" ")
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            step_count = int(steps)
        except ValueError:
            raise ValueError(f"{source}: malformed block header {line!r}") from None
        n = int(np.prod(shape)) if shape else 1
        arrays = []
        for _ in range(3):
            chunk = data[pos:pos + 4 * n]
            if len(chunk) != 4 * n:
                raise ValueError(f"{source}: truncated data for block {name}")
            arrays.append(np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape))
            pos += 4 * n
        if data[pos:pos + 1] != b"\n":
            raise ValueError(f"{source}: missing block terminator after {name}")
        pos += 1
        blocks.append(ParamBlock(name, arrays[0], None, arrays[1], arrays[2], step_count))


def load_weights(path) -> list[ParamBlock]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"weight file not found: {path}")
    return weights_from_bytes(path.read_bytes(), source=str(path))


def assign_weights(targets: Iterable[ParamBlock], loaded: Iterable[ParamBlock],
                   strict: bool = True) -> None:
    """Copy loaded values and optimiser state into ``targets`` by name."""
    by_name = {b.name: b for b in loaded}
    for t in targets:
        src = by_name.pop(t.name, None)
        if src is None:
            raise KeyError(f"weight block {t.name} missing from file")
        if src.value.shape != t.value.shape:
            raise ValueError(f"{t.name}: shape {src.value.shape} != expected {t.value.shape}")
        t.value[...] = src.value
        t.adam_m[...] = src.adam_m
        t.adam_v[...] = src.adam_v
        t.step_count = src.step_count
    if strict and by_name:
        raise KeyError(f"unexpected weight blocks: {sorted(by_name)}")

