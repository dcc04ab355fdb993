"""Fully-connected ReLU network with hand-written reverse-mode gradients.

Everything runs in float64 so finite-difference checks stay tight. Inputs are
batches of shape (n, N); a single vector is treated as a batch of one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, UsageError, ValidationError

CHECKPOINT_MAGIC = b"NNCM"
CHECKPOINT_VERSION = 1
DEFAULT_HIDDEN = (256, 128)


class Mlp:
    """``layers`` is a list of (W, b) with W of shape (fan_out, fan_in)."""

    def __init__(self, layers, rng_seed: int | None = None):
        self.layers = [(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64))
                       for w, b in layers]
        self.rng_seed = rng_seed
        self._velocity = None
        self._check()

    def _check(self):
        if not self.layers:
            raise ValidationError("an Mlp needs at least one layer")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValidationError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.layers[k - 1][0].shape[0]:
                raise ValidationError(f"layer {k} input size does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {k} has non-finite parameters")

    @classmethod
    def create(cls, n_inputs: int, hidden=DEFAULT_HIDDEN, n_outputs: int = 2, seed: int = 0) -> Mlp:
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        dims = [n_inputs, *hidden, n_outputs]
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
            layers.append((w, np.zeros(fan_out)))
        return cls(layers, rng_seed=seed)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[1], *(w.shape[0] for w, _ in self.layers))

    @property
    def n_inputs(self) -> int:
        return self.dims[0]

    def parameters(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def copy(self) -> Mlp:
        return Mlp([(w.copy(), b.copy()) for w, b in self.layers], self.rng_seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.parameters()])

    # attack-facing interface, shared with knn.NNSurrogate
    def logits(self, X) -> np.ndarray:
        return forward(self, X)[0]

    def input_grad(self, X, d_logits) -> np.ndarray:
        out, tape = forward(self, X)
        return backward(self, tape, d_logits, need_params=False).d_input

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)


class Tape:
    """Activations of one forward pass; a backward pass consumes it."""

    def __init__(self, inputs, pre_activations):
        self.inputs = inputs
        self.pre_activations = pre_activations
        self.used = False


@dataclass
class GradientBundle:
    d_params: list[tuple[np.ndarray, np.ndarray]]
    d_input: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for layer in self.d_params for a in layer])

    def __add__(self, other: GradientBundle) -> GradientBundle:
        params = [(w1 + w2, b1 + b2) for (w1, b1), (w2, b2) in zip(self.d_params, other.d_params)]
        return GradientBundle(params, None)


def _batch(x, n_inputs):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != n_inputs:
        raise ValidationError(f"input has {x.shape[-1]} features, network expects {n_inputs}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("input contains NaN or Inf")
    return x


def forward(mlp: Mlp, x) -> tuple[np.ndarray, Tape]:
    h = _batch(x, mlp.n_inputs)
    inputs, pre = [], []
    last = len(mlp.layers) - 1
    for k, (w, b) in enumerate(mlp.layers):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = z if k == last else np.maximum(z, 0.0)
    return h, Tape(inputs, pre)


def backward(mlp: Mlp, tape: Tape, d_logits, need_params: bool = True) -> GradientBundle:
    """Gradients of sum_i <d_logits[i], logits[i]> w.r.t. parameters and input."""
    if tape.used:
        raise UsageError("this tape was already consumed by a backward pass")
    if len(tape.pre_activations) != len(mlp.layers):
        raise UsageError("tape does not belong to this network")
    tape.used = True
    g = np.asarray(d_logits, dtype=np.float64).reshape(tape.pre_activations[-1].shape)
    d_params = [None] * len(mlp.layers)
    for k in range(len(mlp.layers) - 1, -1, -1):
        w, _ = mlp.layers[k]
        if k != len(mlp.layers) - 1:
            g = g * (tape.pre_activations[k] > 0)
        if need_params:
            d_params[k] = (g.T @ tape.inputs[k], g.sum(axis=0))
        g = g @ w
    return GradientBundle(d_params if need_params else [], g)


def _log_softmax(z):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def loss_ce(logits, label) -> float:
    """Cross-entropy, averaged when given a batch."""
    lp = _log_softmax(logits)
    label = np.broadcast_to(np.asarray(label, dtype=np.int64), (len(lp),))
    return float(-lp[np.arange(len(lp)), label].mean())


def loss_ce_grad(logits, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-example losses and d(sum of losses)/d logits."""
    lp = _log_softmax(logits)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(lp),))
    rows = np.arange(len(lp))
    g = np.exp(lp)
    g[rows, labels] -= 1.0
    return -lp[rows, labels], g


def loss_boundary(logits_clean, logits_adv) -> float:
    """KL(softmax(clean) || softmax(adv)), averaged over a batch."""
    return float(loss_boundary_grad(logits_clean, logits_adv)[0].mean())


def loss_boundary_grad(logits_clean, logits_adv):
    """Per-example KL and its gradients w.r.t. the clean and adversarial logits."""
    lc, la = _log_softmax(logits_clean), _log_softmax(logits_adv)
    pc, pa = np.exp(lc), np.exp(la)
    kl = np.maximum((pc * (lc - la)).sum(axis=1), 0.0)
    d_clean = pc * (lc - la - kl[:, None])
    d_adv = pa - pc
    return kl, d_clean, d_adv


def sgd_step(mlp: Mlp, grads: GradientBundle, lr: float, momentum: float = 0.9) -> Mlp:
    """v <- momentum*v + g; theta <- theta - lr*v (in place, buffers kept on the net)."""
    if len(grads.d_params) != len(mlp.layers):
        raise ValidationError("gradient bundle does not match the network")
    if mlp._velocity is None:
        mlp._velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in mlp.layers]
    for (w, b), (dw, db), (vw, vb) in zip(mlp.layers, grads.d_params, mlp._velocity):
        if dw.shape != w.shape or db.shape != b.shape:
            raise ValidationError("gradient shapes do not match parameters")
        vw *= momentum
        vw += dw
        vb *= momentum
        vb += db
        w -= lr * vw
        b -= lr * vb
    return mlp


def checkpoint_bytes(mlp: Mlp) -> bytes:
    dims = mlp.dims
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(mlp.layers)),
             struct.pack(f"<{len(dims)}I", *dims)]
    for w, b in mlp.layers:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(blob: bytes) -> Mlp:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError("not an NNCM checkpoint")
    if len(blob) < 12:
        raise DataFormatError("checkpoint header truncated")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    off = 12
    dims = struct.unpack_from(f"<{n_layers + 1}I", blob, off)
    off += 4 * (n_layers + 1)
    expected = off + 8 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(blob) != expected:
        raise DataFormatError(f"checkpoint has {len(blob)} bytes, expected {expected}")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(blob, "<f8", fan_in * fan_out, off).reshape(fan_out, fan_in)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(blob, "<f8", fan_out, off)
        off += 8 * fan_out
        layers.append((w.astype(np.float64), b.astype(np.float64)))
    return Mlp(layers)


def save_checkpoint(mlp: Mlp, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(mlp))
    tmp.replace(path)


def load_checkpoint(path) -> Mlp:
    return checkpoint_from_bytes(Path(path).read_bytes())
