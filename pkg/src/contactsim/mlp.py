"""Minimal dense networks with analytic input gradients.

Everything here is plain numpy so a forward pass over a large node batch is
a couple of BLAS calls.  Networks are tiny (a few thousand weights), so the
trainer is deliberately simple: full-batch shuffled minibatch gradient
descent with momentum, seeded for reproducibility.

Serialized layout (little-endian), one section per network:

    magic   4 bytes  b"TSNN"
    version u32      currently 1
    layers  u32
    per layer:
        rows u32, cols u32, activation u8,
        weight f64[rows*cols] row-major, bias f64[rows]

Sections are written back to back when a file holds several networks;
callers append their own metadata (input bounds, feature flags) after the
sections they own.
"""

import struct
from dataclasses import dataclass

import numpy as np

ACT_RELU = 0
ACT_TANH = 1
ACT_SIGMOID = 2
ACT_LINEAR = 3

_MAGIC = b"TSNN"
_VERSION = 1


def _act(z, kind):
    if kind == ACT_RELU:
        return np.maximum(z, 0.0)
    if kind == ACT_TANH:
        return np.tanh(z)
    if kind == ACT_SIGMOID:
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _act_deriv(a, kind):
    """Derivative written in terms of the activation value."""
    if kind == ACT_RELU:
        return (a > 0.0).astype(float)
    if kind == ACT_TANH:
        return 1.0 - a * a
    if kind == ACT_SIGMOID:
        return a * (1.0 - a)
    return np.ones_like(a)


@dataclass
class Mlp:
    weights: list  # each (n_out, n_in)
    biases: list  # each (n_out,)
    activations: list  # activation tag per layer

    @staticmethod
    def create(sizes, activations, seed=0):
        """He initialization for relu layers, Xavier otherwise."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for i, act in enumerate(activations):
            n_in, n_out = sizes[i], sizes[i + 1]
            scale = np.sqrt(2.0 / n_in) if act == ACT_RELU else np.sqrt(1.0 / n_in)
            weights.append(rng.normal(0.0, scale, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return Mlp(weights, biases, list(activations))

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    def parameter_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x):
        """x: (batch, n_in) -> (batch, n_out)."""
        a = np.asarray(x, dtype=float)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = _act(a @ w.T + b, act)
        return a

    def forward_cached(self, x):
        """Forward pass keeping every layer activation for backprop."""
        acts = [np.asarray(x, dtype=float)]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            acts.append(_act(acts[-1] @ w.T + b, act))
        return acts

    def backward(self, acts, grad_out):
        """Gradients of sum(grad_out * output) w.r.t. weights and biases."""
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        delta = np.asarray(grad_out, dtype=float)
        for i in range(len(self.weights) - 1, -1, -1):
            delta = delta * _act_deriv(acts[i + 1], self.activations[i])
            gw[i] = delta.T @ acts[i]
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.weights[i]
        return gw, gb

    def input_gradient(self, x):
        """d(output_j)/d(input_i) for each sample: (batch, n_out, n_in).

        Uses the same chain rule as backward() but keeps the full Jacobian,
        which is cheap because layer widths are tiny.
        """
        acts = self.forward_cached(x)
        batch = acts[0].shape[0]
        jac = np.broadcast_to(
            np.eye(self.n_out), (batch, self.n_out, self.n_out)
        ).copy()
        for i in range(len(self.weights) - 1, -1, -1):
            d = _act_deriv(acts[i + 1], self.activations[i])
            jac = (jac * d[:, None, :]) @ self.weights[i]
        return jac

    def scalar_input_gradient(self, x):
        """Gradient of a single-output network: (batch, n_in)."""
        if self.n_out != 1:
            raise ValueError("network has more than one output")
        return self.input_gradient(x)[:, 0, :]

    def flatten(self):
        return np.concatenate([w.ravel() for w in self.weights] + [b for b in self.biases])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        k = 0
        for i, w in enumerate(self.weights):
            self.weights[i] = vec[k : k + w.size].reshape(w.shape).copy()
            k += w.size
        for i, b in enumerate(self.biases):
            self.biases[i] = vec[k : k + b.size].copy()
            k += b.size
        if k != vec.size:
            raise ValueError("flat vector length mismatch")

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))


def write_section(f, net):
    f.write(_MAGIC)
    f.write(struct.pack("<II", _VERSION, len(net.weights)))
    for w, b, act in zip(net.weights, net.biases, net.activations):
        f.write(struct.pack("<IIB", w.shape[0], w.shape[1], act))
        f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def read_section(f):
    magic = f.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad network section magic {magic!r}")
    version, n_layers = struct.unpack("<II", f.read(8))
    if version != _VERSION:
        raise ValueError(f"unsupported network format version {version}")
    weights, biases, acts = [], [], []
    for _ in range(n_layers):
        rows, cols, act = struct.unpack("<IIB", f.read(9))
        w = np.frombuffer(f.read(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
        b = np.frombuffer(f.read(8 * rows), dtype="<f8").copy()
        weights.append(w)
        biases.append(b)
        acts.append(act)
    return Mlp(weights, biases, acts)


def train(net, x, y, *, epochs, batch_size, lr, momentum=0.9, seed=0, callback=None):
    """Minibatch MSE descent with momentum; returns per-epoch mean loss.

    Deterministic for a fixed seed: shuffling uses its own generator and the
    update order never depends on dict iteration or threading.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    rng = np.random.default_rng(seed)
    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    n = x.shape[0]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            acts = net.forward_cached(xb)
            err = acts[-1] - yb
            total += float((err * err).sum())
            gw, gb = net.backward(acts, 2.0 * err / xb.shape[0])
            for i in range(len(net.weights)):
                vel_w[i] = momentum * vel_w[i] - lr * gw[i]
                vel_b[i] = momentum * vel_b[i] - lr * gb[i]
                net.weights[i] += vel_w[i]
                net.biases[i] += vel_b[i]
        history.append(total / n)
        if callback is not None:
            callback(epoch, history[-1])
    return history
