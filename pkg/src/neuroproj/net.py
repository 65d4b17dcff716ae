"""Fully-connected constraint network, its derivatives, Adam, and checkpoints."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Var, current_tape, leaky_relu
from .formats import MODEL_MAGIC, FormatError, read_keyvalue, sidecar_path, write_keyvalue

__all__ = [
    "NetArch",
    "ConstraintNet",
    "TapedNet",
    "AdamState",
    "mlp_apply",
    "net_init",
    "net_forward",
    "net_input_grad",
    "param_grad_through_input_grad",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class NetArch:
    """Layer widths ``(input, hidden..., output)`` with LeakyReLU between layers."""

    widths: tuple[int, ...]
    slope: float = 0.01

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        object.__setattr__(self, "widths", widths)

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def require_scalar(self) -> None:
        if self.output_width != 1:
            raise ValueError(f"a constraint network must output one scalar, arch ends in {self.output_width}")


def mlp_apply(params: Sequence[Var], x: Var, slope: float) -> Var:
    """Dense layers ``W @ a + b`` on a batch ``x`` of shape (B, in); params alternate W, b."""
    a = x
    n_layers = len(params) // 2
    for k in range(n_layers):
        w, b = params[2 * k], params[2 * k + 1]
        a = a @ w.T + b
        if k < n_layers - 1:
            a = leaky_relu(a, slope)
    return a


@dataclass
class ConstraintNet:
    """Scalar-output network ``C_net``; weights are (out, in), biases (out,)."""

    arch: NetArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    _const: list[Var] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        pairs = list(zip(self.arch.widths[:-1], self.arch.widths[1:]))
        if len(self.weights) != len(pairs) or len(self.biases) != len(pairs):
            raise ValueError("layer count does not match architecture")
        for (fan_in, fan_out), w, b in zip(pairs, self.weights, self.biases):
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ValueError(f"layer shapes {w.shape}/{b.shape} do not match ({fan_out}, {fan_in})")

    @property
    def input_width(self) -> int:
        return self.arch.input_width

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> ConstraintNet:
        return ConstraintNet(self.arch, [np.array(p) for p in params[0::2]], [np.array(p) for p in params[1::2]])

    def copy(self) -> ConstraintNet:
        return self.with_params(self.params())

    def bind(self, param_vars: Sequence[Var] | None = None) -> TapedNet:
        if param_vars is None:
            if self._const is None:
                self._const = [Var(p) for p in self.params()]
            param_vars = self._const
        return TapedNet(self, list(param_vars))

    def evaluate(self, x: Var) -> tuple[Var, Var]:
        return self.bind().evaluate(x)

    def __call__(self, x) -> np.ndarray:
        return mlp_apply(self.bind().params, Var(np.atleast_2d(x)), self.arch.slope).value


class TapedNet:
    """A network whose parameters are graph variables.

    :meth:`evaluate` returns ``(C, dC/dx)`` for a batch.  On an active tape the
    input gradient is recorded with ``create_graph=True`` so later sweeps can
    differentiate through it; otherwise a private tape is used and the
    results are plain constants.
    """

    def __init__(self, net: ConstraintNet, params: list[Var]):
        self.net = net
        self.params = params

    @property
    def input_width(self) -> int:
        return self.net.input_width

    def evaluate(self, x: Var) -> tuple[Var, Var]:
        if x.shape[-1] != self.net.input_width:
            raise ValueError(f"net expects {self.net.input_width} inputs, got {x.shape[-1]}")
        slope = self.net.arch.slope
        tape = current_tape()
        if tape is None:
            with Tape() as t:
                xv = t.watch(x.value)
                c = mlp_apply(self.params, xv, slope)
                (g,) = t.gradient(c.sum(), [xv])
            return Var(c.value), Var(g.value)
        c = mlp_apply(self.params, x, slope)
        (g,) = tape.gradient(c.sum(), [x], create_graph=True)
        return c, g


def _as_batch(net: ConstraintNet, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != net.input_width:
        raise ValueError(f"net expects {net.input_width} inputs, got {arr.shape[1]}")
    return arr, single


def net_forward(net: ConstraintNet, x):
    """``C_net(x)``; a float for one input vector, an array for a (B, n) batch."""
    arr, single = _as_batch(net, x)
    out = net(arr)[:, 0]
    return float(out[0]) if single else out


def net_input_grad(net: ConstraintNet, x) -> np.ndarray:
    arr, single = _as_batch(net, x)
    _, g = net.evaluate(Var(arr))
    return g.value[0] if single else g.value


def param_grad_through_input_grad(
    net: ConstraintNet, loss_fn: Callable[[TapedNet], Var]
) -> tuple[float, list[np.ndarray]]:
    """Value and parameter gradient of a scalar loss built from ``net``.

    ``loss_fn`` receives the network bound to watched parameters; anything it
    computes through :meth:`TapedNet.evaluate` (values and input gradients)
    is differentiated exactly, the latter by a second reverse sweep.
    """
    with Tape(persistent=True) as tape:
        pv = [tape.watch(p) for p in net.params()]
        loss = loss_fn(TapedNet(net, pv))
    if loss.value.size != 1:
        raise ValueError("loss must be a scalar")
    grads = tape.gradient(loss, pv)
    return float(loss.value.reshape(())), [g.value for g in grads]


def init_bound(fan_in: int, slope: float) -> float:
    """Kaiming-uniform bound ``gain * sqrt(3 / fan_in)``, ``gain = sqrt(2 / (1 + slope^2))``."""
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    return gain * math.sqrt(3.0 / fan_in)


def net_init(arch: NetArch, seed: int) -> ConstraintNet:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch.widths[:-1], arch.widths[1:]):
        bound = init_bound(fan_in, arch.slope)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ConstraintNet(arch, weights, biases)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_lr: float = 1e-3
    lr_step: int = 20
    lr_gamma: float = 0.8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)

    def lr_at(self, epoch: int) -> float:
        """Step schedule: ``init_lr * gamma ** (epoch // lr_step)``."""
        return self.init_lr * self.lr_gamma ** (epoch // self.lr_step)


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float | None = None
) -> list[np.ndarray]:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    lr = state.init_lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def checkpoint_bytes(net: ConstraintNet) -> bytes:
    widths = net.arch.widths
    head = MODEL_MAGIC + struct.pack(f"<I{len(widths)}Id", len(widths), *widths, net.arch.slope)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params())
    return head + body


def checkpoint_from_bytes(data: bytes) -> ConstraintNet:
    if data[:6] != MODEL_MAGIC:
        raise FormatError("not an NPRJM1 checkpoint (bad magic)")
    off = 6
    (nw,) = struct.unpack_from("<I", data, off)
    off += 4
    widths = struct.unpack_from(f"<{nw}I", data, off)
    off += 4 * nw
    (slope,) = struct.unpack_from("<d", data, off)
    off += 8
    arch = NetArch(tuple(widths), slope)
    if len(data) - off != 8 * arch.num_params:
        raise FormatError(f"expected {arch.num_params} parameters, found {(len(data) - off) // 8}")
    flat = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in))
        pos += fan_in * fan_out
        biases.append(flat[pos : pos + fan_out].copy())
        pos += fan_out
    return ConstraintNet(arch, weights, biases)


def save_checkpoint(path, net: ConstraintNet, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))
    write_keyvalue(sidecar_path(path), dict(meta or {}))


def load_checkpoint(path) -> tuple[ConstraintNet, dict[str, str]]:
    path = Path(path)
    meta_file = sidecar_path(path)
    meta = read_keyvalue(meta_file) if meta_file.exists() else {}
    return checkpoint_from_bytes(path.read_bytes()), meta
