"""Minimal batched multilayer perceptron with exact backpropagation and Adam.

Inputs are row-major batches of shape ``(batch, features)``.  Each layer
computes ``act(drop(x) @ W + b)`` where ``drop`` is inverted dropout applied to
the layer input in training mode only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import Rng, ShapeError, as_matrix

ACTIVATIONS = ("tanh", "relu", "identity")


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - post * post
    if name == "relu":
        # subgradient at 0 is 0
        return (pre > 0.0).astype(np.float64)
    return np.ones_like(pre)


@dataclass
class Layer:
    weight: np.ndarray  # (n_in, n_out)
    bias: np.ndarray  # (n_out,)
    activation: str = "identity"
    dropout: float = 0.0  # drop probability on this layer's input

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class Tape:
    """Cache of a forward pass, consumed by :meth:`Mlp.backward`."""

    net_id: int
    inputs: list = field(default_factory=list)  # layer inputs after dropout
    masks: list = field(default_factory=list)  # scaled keep masks or None
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


class Mlp:
    """Stack of fully connected layers."""

    def __init__(self, layers: list[Layer]):
        for a, b in zip(layers[:-1], layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer sizes do not chain: {a.n_out} -> {b.n_in}")
        self.layers = layers

    @classmethod
    def build(cls, sizes, activations, rng: Rng, dropouts=None) -> "Mlp":
        """Randomly initialised network.

        ``sizes`` lists layer widths including input and output, so
        ``len(activations) == len(sizes) - 1``.  Glorot-uniform init is used for
        tanh/identity layers and He-uniform for ReLU layers; biases start at 0.
        """
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per weight layer")
        dropouts = dropouts or [0.0] * len(activations)
        layers = []
        for n_in, n_out, act, p in zip(sizes[:-1], sizes[1:], activations, dropouts):
            if act == "relu":
                limit = np.sqrt(6.0 / n_in)
            else:
                limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, (n_in, n_out))
            layers.append(Layer(w, np.zeros(n_out), act, p))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def forward(self, x, train: bool = False, rng: Rng | None = None):
        x = as_matrix(x)
        if x.shape[1] != self.n_in:
            raise ShapeError(f"input has {x.shape[1]} features, network expects {self.n_in}")
        tape = Tape(net_id=id(self))
        h = x
        for layer in self.layers:
            mask = None
            if train and layer.dropout > 0.0:
                if rng is None:
                    raise ValueError("training-mode dropout needs an rng")
                keep = 1.0 - layer.dropout
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            pre = h @ layer.weight + layer.bias
            post = _activate(layer.activation, pre)
            tape.inputs.append(h)
            tape.masks.append(mask)
            tape.pre.append(pre)
            tape.post.append(post)
            h = post
        return h, tape

    def backward(self, tape: Tape, grad_out):
        """Gradients of a scalar loss given ``dL/d(output)``.

        Returns ``(param_grads, grad_input)`` with ``param_grads`` ordered like
        :meth:`params`.
        """
        if tape.net_id != id(self) or len(tape.pre) != len(self.layers):
            raise ValueError("tape was not produced by this network")
        g = as_matrix(grad_out)
        if g.shape != tape.post[-1].shape:
            raise ShapeError(f"output gradient {g.shape} != output {tape.post[-1].shape}")
        grads = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            g = g * _activation_grad(layer.activation, tape.pre[k], tape.post[k])
            grads[2 * k] = tape.inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ layer.weight.T
            if tape.masks[k] is not None:
                g = g * tape.masks[k]
        return grads, g

    def __call__(self, x):
        return self.forward(x)[0]


def forward(net: Mlp, x, train_mode: bool = False, rng: Rng | None = None):
    return net.forward(x, train_mode, rng)


def backward(net: Mlp, tape: Tape, output_gradient):
    return net.backward(tape, output_gradient)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state: AdamState):
    """In-place Adam update; weight decay is added to the gradient as an L2 term."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    per_param: list  # max relative error for each parameter array
    tolerance: float


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def gradient_check(params, loss_fn, tolerance: float = 1e-4, h: float = 1e-5,
                   floor: float = 1e-8, max_entries: int | None = None,
                   rng: Rng | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``params`` is a list of arrays (e.g. ``net.params()``) that ``loss_fn``
    reads; ``loss_fn()`` returns ``(loss, grads)`` for the current values.
    Entries are perturbed in place and restored.  Any stochasticity inside
    ``loss_fn`` (dropout, sampling noise) must be frozen by the caller.
    ``max_entries`` subsamples entries per array to bound cost.
    """
    _, analytic = loss_fn()
    analytic = [np.array(g, copy=True) for g in analytic]
    per_param = []
    for p, ga in zip(params, analytic):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or Rng(0)).choice(flat.size, max_entries)
        worst = 0.0
        ga_flat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()[0]
            flat[i] = orig - h
            fm = loss_fn()[0]
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, float(relative_error(ga_flat[i], num, floor)))
        per_param.append(worst)
    max_err = max(per_param) if per_param else 0.0
    return GradCheckReport(max_err < tolerance, max_err, per_param, tolerance)
