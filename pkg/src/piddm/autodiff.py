"""Time-conditioned MLP with hand-written reverse mode.

The network is a stack of dense affine layers. ``forward`` records the
activations it needs on a :class:`Tape`; ``grad_params`` / ``grad_input``
replay the tape backwards once. Parameters live in one flat vector so the
optimizers and checkpoints never need to know the layer structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(z):
    inner = _GELU_C * (z + 0.044715 * z ** 3)
    return 0.5 * z * (1.0 + np.tanh(inner))


def _gelu_grad(z):
    inner = _GELU_C * (z + 0.044715 * z ** 3)
    th = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * z ** 2)
    return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th ** 2) * dinner


def time_embedding(t, n_pairs: int, batch: int) -> np.ndarray:
    """Sinusoidal features ``[sin(f t), cos(f t)]`` with geometric frequencies."""
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (batch, 1))
    freqs = np.geomspace(1.0, 100.0, n_pairs)
    arg = t * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class TapeConsumedError(RuntimeError):
    pass


@dataclass
class Tape:
    net: "ParamNet"
    inputs: list          # input to each affine layer
    pre: list             # pre-activation of each hidden layer
    single: bool
    consumed: bool = False


@dataclass
class ParamNet:
    """Dense network ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    ``layer_sizes[0]`` includes the ``2 * time_pairs`` time features appended
    to the data input; ``time_pairs == 0`` gives a time-free network.
    """

    layer_sizes: list
    activation: str = "relu"
    time_pairs: int = 0
    params: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {self.layer_sizes}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.layer_sizes[0] <= self.time_width:
            raise ValueError("input layer narrower than the time embedding")
        if self.params is None:
            self.params = np.zeros(self.n_params)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @classmethod
    def init(cls, layer_sizes, rng, activation="relu", time_pairs=0, out_scale=1.0):
        """He-normal weights, zero biases; ``out_scale`` shrinks the last layer."""
        net = cls(list(layer_sizes), activation, time_pairs)
        chunks = []
        n_layers = len(net.layer_sizes) - 1
        for k, (fi, fo) in enumerate(zip(net.layer_sizes[:-1], net.layer_sizes[1:])):
            std = math.sqrt(2.0 / fi) * (out_scale if k == n_layers - 1 else 1.0)
            chunks.append(std * rng.normal((fi, fo)).ravel())
            chunks.append(np.zeros(fo))
        net.params = np.concatenate(chunks)
        return net

    @property
    def time_width(self) -> int:
        return 2 * self.time_pairs

    @property
    def in_width(self) -> int:
        return self.layer_sizes[0] - self.time_width

    @property
    def out_width(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum((fi + 1) * fo for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def layers(self, params=None):
        """Views ``(W, b)`` into the flat parameter vector."""
        p = self.params if params is None else params
        out, off = [], 0
        for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = p[off : off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = p[off : off + fo]
            off += fo
            out.append((W, b))
        return out

    def copy(self) -> "ParamNet":
        return ParamNet(list(self.layer_sizes), self.activation, self.time_pairs, self.params.copy())

    def __call__(self, x, t=None):
        return forward(self, x, t)[0]


def forward(net: ParamNet, x, t=None):
    """Evaluate the network; returns ``(output, tape)``.

    ``x`` is a vector or a ``(B, in_width)`` batch; ``t`` is a scalar or a
    length-``B`` array and is required iff the network has time features.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != net.in_width:
        raise ValueError(f"input width {X.shape[1]} != network input width {net.in_width}")
    if net.time_pairs:
        if t is None:
            raise ValueError("this network needs a time input")
        X = np.concatenate([X, time_embedding(t, net.time_pairs, X.shape[0])], axis=1)
    act = _gelu if net.activation == "gelu" else (lambda z: np.maximum(z, 0.0))
    inputs, pre = [], []
    h = X
    layers = net.layers()
    for k, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        if k < len(layers) - 1:
            pre.append(z)
            h = act(z)
        else:
            h = z
    out = h[0] if single else h
    return out, Tape(net, inputs, pre, single)


def backward(tape: Tape, upstream, need_params=True, need_input=True):
    """Reverse pass of ``upstream . output``; consumes the tape."""
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a backward pass")
    tape.consumed = True
    net = tape.net
    g = np.atleast_2d(np.asarray(upstream, dtype=float))
    if g.shape[1] != net.out_width or g.shape[0] != tape.inputs[0].shape[0]:
        raise ValueError(f"upstream shape {g.shape} does not match network output")
    layers = net.layers()
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        if need_params:
            grads[k] = (tape.inputs[k].T @ g, g.sum(axis=0))
        if k == 0 and not need_input:
            break
        g = g @ W.T
        if k > 0:
            z = tape.pre[k - 1]
            if net.activation == "relu":
                g = g * (z > 0)
            else:
                g = g * _gelu_grad(z)
    gp = None
    if need_params:
        gp = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    gx = None
    if need_input:
        gx = g[:, : net.in_width]
        if tape.single:
            gx = gx[0]
    return gp, gx


def grad_params(tape: Tape, upstream) -> np.ndarray:
    """Gradient of ``upstream . output`` with respect to the flat parameters."""
    return backward(tape, upstream, need_input=False)[0]


def grad_input(tape: Tape, upstream) -> np.ndarray:
    """Gradient of ``upstream . output`` with respect to the data input."""
    return backward(tape, upstream, need_params=False)[1]


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, net: ParamNet, **meta) -> None:
    """``PCK1`` header, a metadata line, then little-endian float64 parameters."""
    info = {"layers": ",".join(map(str, net.layer_sizes)), "activation": net.activation,
            "time_pairs": net.time_pairs}
    info.update({k: v for k, v in meta.items()})
    meta_line = " ".join(f"{k}={v}" for k, v in info.items())
    with open(path, "wb") as fh:
        fh.write(f"PCK1 {net.n_params}\n".encode())
        fh.write((meta_line + "\n").encode())
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path):
    """Return ``(net, meta)`` from a file written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if len(header) != 2 or header[0] != "PCK1":
            raise ValueError(f"{path}: not a PCK1 checkpoint")
        n = int(header[1])
        meta = dict(tok.split("=", 1) for tok in fh.readline().decode().split())
        params = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    if params.size != n:
        raise ValueError(f"{path}: expected {n} parameters, found {params.size}")
    layers = [int(s) for s in meta.pop("layers").split(",")]
    net = ParamNet(layers, meta.pop("activation"), int(meta.pop("time_pairs")), params)
    return net, meta
