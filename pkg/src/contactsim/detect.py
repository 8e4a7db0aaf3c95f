"""Learned contact detection.

A small dense network predicts the signed distance of a query point to a
shape, clipped to a few millimetres of depth, and its input gradient gives
the contact normal.  Queries are batched: the box normalization (and, for
box-aligned features, the world-to-shape transform) folds into the first
layer, the forward pass runs in float32 through three matrix products, and
normals are backpropagated only for the points that get reported.

Threaded shapes use a derotated feature map (radius, folded thread-plane
coordinate, height) that turns the screw symmetry into an exact invariance
of the inputs, so the network only has to learn a planar profile.

Predicted depths saturate at +-depth_scale; the field is only trusted within
the clip band, which covers contact handling.
"""

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .geometry import sdf, sdf_grad

TWO_PI = 2.0 * np.pi

_FOOTER_MAGIC = b"DNET"
_FEATURE_KINDS = ("cartesian", "helical")
_CHUNK = 4096


def feature_kind(shape):
    return "helical" if shape.kind in ("bolt", "nut") else "cartesian"


def _helical_features(pts, pitch):
    """(r, folded u, z) with u = z - pitch * theta / 2pi.

    The fold maps u into [0, pitch/2] using the profile's mirror symmetry;
    the returned sign column records the fold branch for the Jacobian."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    r = np.hypot(x, y)
    u = np.mod(z - pitch * np.arctan2(y, x) / TWO_PI, pitch)
    flip = u > 0.5 * pitch
    uf = np.where(flip, pitch - u, u)
    sgn = np.where(flip, -1.0, 1.0)
    return np.column_stack([r, uf, z]), sgn


def _helical_pullback(pts, pitch, sgn, g_feat):
    """Map feature-space gradients back to shape-frame point gradients."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    r2 = np.maximum(x * x + y * y, 1e-18)
    r = np.sqrt(r2)
    k = pitch / (TWO_PI * r2)
    gu = g_feat[:, 1] * sgn
    out = np.empty_like(pts)
    out[:, 0] = g_feat[:, 0] * (x / r) + gu * (k * y)
    out[:, 1] = g_feat[:, 0] * (y / r) + gu * (-k * x)
    out[:, 2] = gu + g_feat[:, 2]
    return out


def feature_bounds(shape, pad=0.1):
    """Per-feature (lo, hi) covering the padded shape box.

    For threaded shapes the radius bound hugs the thread band instead of the
    whole cross section; points outside it normalize past +-1 where the
    clipped field is flat anyway, and the band itself gets full resolution."""
    lo, hi = shape.aabb()
    span = hi - lo
    lo = lo - pad * span
    hi = hi + pad * span
    if feature_kind(shape) == "helical":
        pitch = shape.params[1]
        rpad = 0.5 * pitch + 0.001
        if shape.kind == "bolt":
            rmin, rout = shape.params[3], 0.5 * shape.params[0]
        else:
            rmin, rout = shape.params[5], shape.params[4]
        rlo = max(0.0, rmin - rpad)
        return np.array([rlo, 0.0, lo[2]]), np.array([rout + rpad, 0.5 * pitch, hi[2]])
    return lo, hi


@dataclass
class DepthNet:
    """Depth network plus everything needed to evaluate it on raw points."""

    net: mlp.Mlp
    lo: np.ndarray
    hi: np.ndarray
    feature: str
    pitch: float
    depth_scale: float
    report: dict = field(default=None, repr=False, compare=False)
    _fused: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(3)
        self.hi = np.asarray(self.hi, dtype=float).reshape(3)
        if self.feature not in _FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.feature!r}")

    # -- reference path (float64) --------------------------------------

    def _features(self, pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        if self.feature == "helical":
            f, sgn = _helical_features(pts, self.pitch)
            return f, sgn
        return pts, None

    def _normalize(self, feats):
        return (feats - self.lo) * (2.0 / (self.hi - self.lo)) - 1.0

    def predict(self, pts):
        """Clipped signed distance at shape-frame points, float64 path."""
        feats, _ = self._features(pts)
        return self.net.forward(self._normalize(feats))[:, 0] * self.depth_scale

    def predict_with_normals(self, pts):
        """Depths and unnormalized shape-frame gradients, float64 path."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        feats, sgn = self._features(pts)
        xn = self._normalize(feats)
        d = self.net.forward(xn)[:, 0] * self.depth_scale
        g_norm = self.net.scalar_input_gradient(xn) * self.depth_scale
        g_feat = g_norm * (2.0 / (self.hi - self.lo))
        if self.feature == "helical":
            g = _helical_pullback(pts, self.pitch, sgn, g_feat)
        else:
            g = g_feat
        return d, g

    # -- fused float32 path ---------------------------------------------

    def fusable(self):
        """The fast path is specialized to the relu-relu-tanh stack."""
        return list(self.net.activations) == [mlp.ACT_RELU, mlp.ACT_RELU, mlp.ACT_TANH]

    def _fold(self):
        """First layer with the box normalization folded in, cast to f32."""
        if self._fused is None:
            w1, w2, w3 = self.net.weights
            b1, b2, b3 = self.net.biases
            s = 2.0 / (self.hi - self.lo)
            c = self.lo + 0.5 * (self.hi - self.lo)
            w1s = w1 * s[None, :]
            b1s = b1 - w1s @ c
            self._fused = {
                "w1": np.ascontiguousarray(w1s.T, dtype=np.float32),
                "b1": b1s.astype(np.float32),
                "w2": np.ascontiguousarray(w2.T, dtype=np.float32),
                "b2": b2.astype(np.float32),
                "w3": np.ascontiguousarray(w3[0], dtype=np.float32),
                "b3": np.float32(b3[0]),
            }
        return self._fused

    # -- serialization ---------------------------------------------------

    def save(self, path):
        with open(path, "wb") as f:
            mlp.write_section(f, self.net)
            kind = _FEATURE_KINDS.index(self.feature)
            f.write(_FOOTER_MAGIC)
            f.write(
                struct.pack(
                    "<Bd3d3dd",
                    kind,
                    self.pitch,
                    *self.lo,
                    *self.hi,
                    self.depth_scale,
                )
            )

    @staticmethod
    def load(path):
        with open(path, "rb") as f:
            net = mlp.read_section(f)
            magic = f.read(4)
            if magic != _FOOTER_MAGIC:
                raise ValueError(f"bad depth net footer magic {magic!r}")
            vals = struct.unpack("<Bd3d3dd", f.read(struct.calcsize("<Bd3d3dd")))
        kind = _FEATURE_KINDS[vals[0]]
        return DepthNet(
            net,
            np.array(vals[2:5]),
            np.array(vals[5:8]),
            kind,
            vals[1],
            vals[8],
        )


# ---------------------------------------------------------------------------
# Training.

def training_samples(shape, n_shell, n_volume, band, clip, seed):
    """Query points and clipped distance targets.

    Shell points are rejection-sampled inside a |d| < band slab around the
    surface, where fidelity matters; volume points cover the padded box so
    the network saturates cleanly far away."""
    lo, hi = shape.aabb()
    span = hi - lo
    lo = lo - 0.1 * span
    hi = hi + 0.1 * span
    rng = np.random.default_rng(seed)
    shell = []
    got = 0
    while got < n_shell:
        pts = rng.uniform(lo, hi, size=(65536, 3))
        d = sdf(shape, pts)
        keep = pts[np.abs(d) < band]
        shell.append(keep)
        got += len(keep)
    shell = np.vstack(shell)[:n_shell]
    volume = rng.uniform(lo, hi, size=(n_volume, 3))
    pts = np.vstack([shell, volume])
    pts = pts[rng.permutation(len(pts))]
    targets = np.clip(sdf(shape, pts), -clip, clip)
    return pts, targets


def train_depth_net(
    shape,
    seed=0,
    n_shell=150000,
    n_volume=30000,
    band=0.002,
    clip=0.003,
    depth_scale=0.0032,
    epochs=(250, 120, 80, 50),
    lrs=(3e-3, 1e-3, 3e-4, 1e-4),
    batch_size=256,
    rmse_threshold=0.00025,
    verbose=False,
):
    """Fit a depth network to a shape's distance field.

    depth_scale sits above the clip so targets stay inside the saturating
    output range.  The long first phase matters: gradient quality keeps
    improving well after the value loss has seemingly settled.  Reports a
    held-out shell evaluation on dn.report and warns instead of failing when
    the RMSE misses the threshold.  Deterministic for fixed seeds."""
    lo, hi = feature_bounds(shape)
    dn = DepthNet(
        mlp.Mlp.create([3, 64, 64, 1], [mlp.ACT_RELU, mlp.ACT_RELU, mlp.ACT_TANH], seed=seed),
        lo,
        hi,
        feature_kind(shape),
        shape.params[1] if feature_kind(shape) == "helical" else 0.0,
        depth_scale,
    )
    pts, targets = training_samples(shape, n_shell, n_volume, band, clip, seed + 1)
    feats, _ = dn._features(pts)
    x = dn._normalize(feats)
    y = (targets / depth_scale)[:, None]
    for phase, (n_ep, lr) in enumerate(zip(epochs, lrs)):
        losses = mlp.train(
            dn.net, x, y, epochs=n_ep, batch_size=batch_size, lr=lr, seed=seed + 2 + phase
        )
        if verbose:
            print(f"phase {phase}: loss {losses[-1]:.3e}")
    dn._fused = None
    dn.report = holdout_report(dn, shape, band=band, seed=seed + 101)
    if dn.report["rmse"] > rmse_threshold:
        warnings.warn(
            f"depth net held-out RMSE {dn.report['rmse'] * 1000:.3f} mm "
            f"exceeds {rmse_threshold * 1000:.3f} mm",
            stacklevel=2,
        )
    if verbose:
        r = dn.report
        print(
            f"held-out: rmse {r['rmse'] * 1000:.3f} mm, mad {r['mad'] * 1000:.3f} mm, "
            f"normal cos median {r['cos_median']:.4f}"
        )
    return dn


def holdout_report(dn, shape, n=2000, band=0.002, seed=101):
    """Fresh shell points scored against the analytic field."""
    pts, _ = training_samples(shape, n, 0, band, band, seed)
    dref, gref = sdf_grad(shape, pts)
    dhat, ghat = dn.predict_with_normals(pts)
    err = dhat - np.clip(dref, -dn.depth_scale, dn.depth_scale)
    gn = ghat / np.maximum(np.linalg.norm(ghat, axis=1, keepdims=True), 1e-30)
    gr = gref / np.maximum(np.linalg.norm(gref, axis=1, keepdims=True), 1e-30)
    cos = np.sum(gn * gr, axis=1)
    return {
        "rmse": float(np.sqrt(np.mean(err**2))),
        "mad": float(np.mean(np.abs(err))),
        "cos_median": float(np.median(cos)),
        "n": n,
    }


# ---------------------------------------------------------------------------
# Batched detection.

_BUFFERS = {}


def _get_buffers(cap, n1, n2):
    key = (cap, n1, n2)
    buf = _BUFFERS.get(key)
    if buf is None:
        buf = {
            "x": np.empty((cap, 3), dtype=np.float32),
            "h1": np.empty((cap, n1), dtype=np.float32),
            "h2": np.empty((cap, n2), dtype=np.float32),
            "y": np.empty(cap, dtype=np.float32),
        }
        _BUFFERS[key] = buf
    return buf


def _forward_f32(fused, x32, buf):
    h1 = buf["h1"]
    h2 = buf["h2"]
    y = buf["y"]
    np.dot(x32, fused["w1"], out=h1)
    h1 += fused["b1"]
    np.maximum(h1, 0.0, out=h1)
    np.dot(h1, fused["w2"], out=h2)
    h2 += fused["b2"]
    np.maximum(h2, 0.0, out=h2)
    np.dot(h2, fused["w3"], out=y)
    y += fused["b3"]
    np.tanh(y, out=y)
    return h1, h2, y


def detect(nodes, pose_a, net, pose_b, candidates=None, margin=0.0, threads=1):
    """Report contacts of a node cloud against a learned depth field.

    nodes are in body-A frame; candidates (indices into nodes, e.g. from the
    broad phase) restrict the evaluation.  Returns (indices, depths, world
    normals) for nodes with predicted depth < margin.  Depths are clipped
    field values in meters; normals are unit length, computed by
    backpropagation on the reported subset only (finite differences fill in
    where the gradient degenerates).  Output is independent of `threads`.
    """
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 3)
    if candidates is None:
        candidates = np.arange(len(nodes))
    else:
        candidates = np.asarray(candidates, dtype=np.int64)
    n = len(candidates)
    if n == 0:
        return candidates, np.empty(0), np.empty((0, 3))

    rot_a = pose_a.rotation()
    rot_b = pose_b.rotation()
    local = (nodes[candidates] @ rot_a.T + (pose_a.position - pose_b.position)) @ rot_b

    if not net.fusable():
        depth, grad = net.predict_with_normals(local)
        hit = np.nonzero(depth < margin)[0]
        g = grad[hit]
        norms = np.linalg.norm(g, axis=1)
        weak = norms < 1e-8
        if np.any(weak):
            g[weak] = _fd_gradients(net, local[hit][weak])
            norms[weak] = np.linalg.norm(g[weak], axis=1)
        g /= np.maximum(norms, 1e-30)[:, None]
        return candidates[hit], depth[hit], g @ rot_b.T

    fused = net._fold()

    cap = max(_CHUNK, 1 << int(np.ceil(np.log2(n))))
    buf = _get_buffers(cap, fused["w1"].shape[1], fused["w2"].shape[1])
    x32 = buf["x"][:n]
    if net.feature == "helical":
        feats, sgn = _helical_features(local, net.pitch)
        x32[:] = feats
    else:
        sgn = None
        x32[:] = local

    # always evaluate in fixed-size chunks so the arithmetic, and therefore
    # the bits, cannot depend on how many threads split the work
    spans = [(s, min(s + _CHUNK, n)) for s in range(0, n, _CHUNK)]
    run = lambda se: _forward_f32(fused, x32[se[0] : se[1]], _slice_buf(buf, se))
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, spans))
    else:
        for se in spans:
            run(se)
    h1, h2, y = buf["h1"][:n], buf["h2"][:n], buf["y"][:n]

    depth = y.astype(float) * net.depth_scale
    hit = np.nonzero(depth < margin)[0]
    if len(hit) == 0:
        return candidates[hit], depth[hit], np.empty((0, 3))

    # backprop only the reported rows, in f32 like the forward pass
    yh = y[hit]
    gy = (np.float32(1.0) - yh * yh) * np.float32(net.depth_scale)
    g2 = gy[:, None] * fused["w3"][None, :]
    g2 *= h2[hit] > 0.0
    g1 = g2 @ fused["w2"].T
    g1 *= h1[hit] > 0.0
    g_feat = (g1 @ fused["w1"].T).astype(float)
    if net.feature == "helical":
        g_local = _helical_pullback(local[hit], net.pitch, sgn[hit], g_feat)
    else:
        g_local = g_feat
    norms = np.linalg.norm(g_local, axis=1)
    weak = norms < 1e-8
    if np.any(weak):
        g_local[weak] = _fd_gradients(net, local[hit][weak])
        norms[weak] = np.linalg.norm(g_local[weak], axis=1)
    g_local /= np.maximum(norms, 1e-30)[:, None]
    normals = g_local @ rot_b.T
    return candidates[hit], depth[hit], normals


def _slice_buf(buf, span):
    s, e = span
    return {k: buf[k][s:e] for k in ("h1", "h2", "y")}


def _fd_gradients(net, pts, h=1e-5):
    g = np.empty_like(pts)
    for axis in range(3):
        dp = np.zeros(3)
        dp[axis] = h
        g[:, axis] = (net.predict(pts + dp) - net.predict(pts - dp)) / (2.0 * h)
    return g
