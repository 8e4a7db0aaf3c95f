"""Contact clustering.

Detection can report hundreds of penetrating nodes; the solver wants a
dozen.  A pair of small interaction networks turns the node set into a
fixed number of clustered contacts: the first scores every node against
every cluster (softmax per cluster, so each cluster is a convex weighting
of nodes), the second nudges each clustered normal by two learned rotation
angles.  Positions are weighted means pulled back onto the counterpart
surface by Newton steps along the distance gradient.

Cluster weights see each node's 19 dynamics features (position, body
orientation, node velocity, body rates, prior contact force and torque)
plus a summed relation term over its nearest neighbors, which keeps the
cost linear in the node count and the result order-independent.

A seeded K-means baseline with the same projection is included for
comparison.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import mlp
from .geometry import sdf_grad
from .solver import default_tangents

_FOOTER_MAGIC = b"CNET"
_FOOTER_FMT = "<II19d19d"


def default_feature_bounds(position_pad=0.1):
    """Symmetric scales per feature block; quaternions are already unit."""
    lo = np.concatenate(
        [
            -position_pad * np.ones(3),
            -np.ones(4),
            -0.2 * np.ones(3),
            -2.0 * np.ones(3),
            -50.0 * np.ones(3),
            -2.0 * np.ones(3),
        ]
    )
    return lo, -lo


@dataclass
class ClusterNets:
    """Weight and normal-rotation networks plus their feature scaling."""

    f_r1: mlp.Mlp
    f_o1: mlp.Mlp
    f_r2: mlp.Mlp
    f_o2: mlp.Mlp
    m_c: int
    knn: int
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(19)
        self.hi = np.asarray(self.hi, dtype=float).reshape(19)
        if self.f_o1.n_out != self.m_c:
            raise ValueError("f_o1 output width must equal the cluster count")

    def flatten(self):
        return np.concatenate(
            [self.f_r1.flatten(), self.f_o1.flatten(), self.f_r2.flatten(), self.f_o2.flatten()]
        )

    def set_flat(self, v):
        v = np.asarray(v, dtype=float)
        at = 0
        for net in (self.f_r1, self.f_o1, self.f_r2, self.f_o2):
            n = len(net.flatten())
            net.set_flat(v[at : at + n])
            at += n
        if at != len(v):
            raise ValueError("flat vector length mismatch")

    def copy(self):
        return ClusterNets(
            self.f_r1.copy(),
            self.f_o1.copy(),
            self.f_r2.copy(),
            self.f_o2.copy(),
            self.m_c,
            self.knn,
            self.lo.copy(),
            self.hi.copy(),
        )

    def save(self, path):
        with open(path, "wb") as f:
            for net in (self.f_r1, self.f_o1, self.f_r2, self.f_o2):
                mlp.write_section(f, net)
            f.write(_FOOTER_MAGIC)
            f.write(struct.pack(_FOOTER_FMT, self.m_c, self.knn, *self.lo, *self.hi))

    @staticmethod
    def load(path):
        with open(path, "rb") as f:
            nets = [mlp.read_section(f) for _ in range(4)]
            magic = f.read(4)
            if magic != _FOOTER_MAGIC:
                raise ValueError(f"bad cluster net footer magic {magic!r}")
            vals = struct.unpack(_FOOTER_FMT, f.read(struct.calcsize(_FOOTER_FMT)))
        return ClusterNets(
            *nets, vals[0], vals[1], np.array(vals[2:21]), np.array(vals[21:40])
        )


def _fibonacci_directions(n):
    i = np.arange(n) + 0.5
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def create_cluster_nets(m_c=12, knn=10, bounds=None, seed=0, attention_scale=3.0):
    """Fresh nets with a usable starting point.

    The weight net is initialized as spatial attention: the first three
    hidden units of f_o1 pass the (normalized) position through, and each
    cluster row reads them along a distinct direction, so the initial
    clusters spread over the contact patch instead of collapsing onto its
    mean.  The rotation net's output layer starts at zero, which makes the
    initial rotations exact identities."""
    lo, hi = default_feature_bounds() if bounds is None else bounds
    f_r1 = mlp.Mlp.create([38, 16, 16, 4], [mlp.ACT_RELU] * 3, seed=seed)
    f_o1 = mlp.Mlp.create([23, 8, m_c], [mlp.ACT_RELU, mlp.ACT_LINEAR], seed=seed + 1)
    w_h, b_h = f_o1.weights[0], f_o1.biases[0]
    w_h[:3] = 0.0
    w_h[0, 0] = w_h[1, 1] = w_h[2, 2] = 1.0
    b_h[:3] = 2.0  # keeps the passthrough units active over the [-1,1] box
    w_out = f_o1.weights[1]
    w_out[:, 3:] *= 0.1
    w_out[:, :3] = attention_scale * _fibonacci_directions(m_c)
    f_o1.biases[1][:] = 0.0
    f_r2 = mlp.Mlp.create([44, 16, 16, 4], [mlp.ACT_RELU] * 3, seed=seed + 2)
    f_o2 = mlp.Mlp.create([26, 8, 2], [mlp.ACT_RELU, mlp.ACT_LINEAR], seed=seed + 3)
    f_o2.weights[1][:] = 0.0
    f_o2.biases[1][:] = 0.0
    return ClusterNets(f_r1, f_o1, f_r2, f_o2, m_c, knn, lo, hi)


def node_features(positions, pose, twist, forces, torques, lo, hi):
    """Per-node 19-feature rows, normalized by the configured bounds.

    Node velocity is the rigid-body velocity at the node; orientation is
    the body quaternion replicated per node; force and torque come from the
    previous step's solved contacts (zero on a first contact)."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(positions)
    forces = np.zeros((n, 3)) if forces is None else np.asarray(forces, dtype=float)
    torques = np.zeros((n, 3)) if torques is None else np.asarray(torques, dtype=float)
    if forces.shape != (n, 3) or torques.shape != (n, 3):
        raise ValueError("per-node wrench lists misaligned with nodes")
    r = positions - pose.position
    v = twist.linear + np.cross(np.broadcast_to(twist.angular, (n, 3)), r)
    x = np.empty((n, 19))
    x[:, 0:3] = positions
    x[:, 3:7] = pose.quaternion
    x[:, 7:10] = v
    x[:, 10:13] = twist.angular
    x[:, 13:16] = forces
    x[:, 16:19] = torques
    return (x - lo) * (2.0 / (hi - lo)) - 1.0


def _knn_sets(positions, k):
    """Neighbor indices (n, k) excluding self, by Euclidean distance."""
    n = len(positions)
    k = min(k, n - 1)
    if k <= 0:
        return np.empty((n, 0), dtype=np.int64)
    _, idx = cKDTree(positions).query(positions, k=k + 1)
    idx = np.atleast_2d(idx)
    self_mask = idx == np.arange(n)[:, None]
    # stable sort floats non-self entries forward; self (or the overflow
    # column when duplicates hide it) falls off the end
    order = np.argsort(self_mask, axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)[:, :k]


def cluster_weights(features, positions, nets):
    """Column-stochastic (n, m_c) weights from the interaction network."""
    features = np.asarray(features, dtype=float)
    n = len(features)
    if n < 1:
        raise ValueError("need at least one node")
    neigh = _knn_sets(np.asarray(positions, dtype=float), nets.knn)
    k = neigh.shape[1]
    if k > 0:
        pairs = np.empty((n * k, 38))
        pairs[:, :19] = np.repeat(features, k, axis=0)
        pairs[:, 19:] = features[neigh.ravel()]
        effects = nets.f_r1.forward(pairs).reshape(n, k, 4).sum(axis=1)
    else:
        effects = np.zeros((n, 4))
    scores = nets.f_o1.forward(np.hstack([features, effects]))
    scores = scores - scores.max(axis=0)
    w = np.exp(scores)
    return w / w.sum(axis=0)


def project_to_surface(points, shape, pose, tol=1e-6, max_steps=20):
    """Newton steps along the distance gradient, in the shape's frame.

    Returns projected world points and a flag per point; a point that still
    sits farther than 1e-4 m after the step budget keeps its last iterate
    and is flagged."""
    rot = pose.rotation()
    local = (np.asarray(points, dtype=float) - pose.position) @ rot
    for _ in range(max_steps):
        d, g = sdf_grad(shape, local)
        if np.all(np.abs(d) < tol):
            break
        gg = np.sum(g * g, axis=1)
        # a symmetry axis can zero the gradient (weighted means land there);
        # a fixed tiny offset breaks the tie deterministically
        stuck = (gg < 1e-12) & (np.abs(d) >= tol)
        if np.any(stuck):
            local[stuck] += 1e-9
            continue
        local -= (d / np.maximum(gg, 1e-12))[:, None] * g
    d, _ = sdf_grad(shape, local)
    ok = np.abs(d) < 1e-4
    return local @ rot.T + pose.position, ok


def cluster_positions(weights, positions, shape, pose):
    """Weighted means of node positions, pulled back to the surface."""
    raw = weights.T @ np.asarray(positions, dtype=float)
    return project_to_surface(raw, shape, pose)


def cluster_normals(weights, normals):
    """Weighted means of node normals, unit length.

    A degenerate sum falls back to the heaviest node's normal and flags."""
    normals = np.asarray(normals, dtype=float)
    s = weights.T @ normals
    norms = np.linalg.norm(s, axis=1)
    ok = norms >= 1e-9
    if not np.all(ok):
        top = np.argmax(weights, axis=0)
        s[~ok] = normals[top[~ok]]
        norms = np.linalg.norm(s, axis=1)
    return s / norms[:, None], ok


def rotation_angles(clustered_features, nets):
    """Two rotation angles per cluster from the pairwise relation net.

    The relation sum runs over all other clusters.  Angles are clamped to
    a half-turn around each axis so the rotated normal stays in the
    original hemisphere."""
    x = np.asarray(clustered_features, dtype=float)
    m = len(x)
    if m > 1:
        ii, ll = np.nonzero(~np.eye(m, dtype=bool))
        pairs = np.hstack([x[ii], x[ll]])
        effects = np.zeros((m, 4))
        np.add.at(effects, ii, nets.f_r2.forward(pairs))
    else:
        effects = np.zeros((m, 4))
    theta = nets.f_o2.forward(np.hstack([x, effects]))
    return np.clip(theta, -0.5 * np.pi, 0.5 * np.pi)


def _axis_rotation(axis, angle):
    k = axis / np.linalg.norm(axis)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def rotate_normals(normals, theta):
    """Apply n <- R_axis=n(theta1) R_axis=t(theta2) n per cluster."""
    normals = np.asarray(normals, dtype=float)
    out = np.empty_like(normals)
    for j, n in enumerate(normals):
        t1 = default_tangents(n)[:, 0]
        rn = _axis_rotation(n, theta[j, 0])
        rt = _axis_rotation(t1, theta[j, 1])
        out[j] = rn @ (rt @ n)
    return out


@dataclass
class ClusteredContacts:
    """Reduced contact set: positions on the counterpart surface, raw and
    rotated normals, the node-to-cluster weight matrix, and health flags."""

    positions: np.ndarray
    normals: np.ndarray
    rotated_normals: np.ndarray
    weights: np.ndarray
    projected_ok: np.ndarray
    normals_ok: np.ndarray
    clustered: bool = True


def cluster_contacts(positions, normals, features, nets, shape, pose):
    """Full reduction: weights, surface positions, rotated normals.

    When the node count does not exceed the cluster budget the set passes
    through unchanged; clustering reduces, never inflates."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    n = len(positions)
    if n <= nets.m_c:
        return ClusteredContacts(
            positions.copy(),
            normals.copy(),
            normals.copy(),
            np.eye(n),
            np.ones(n, dtype=bool),
            np.ones(n, dtype=bool),
            clustered=False,
        )
    w = cluster_weights(features, positions, nets)
    xr, proj_ok = cluster_positions(w, positions, shape, pose)
    nr, norm_ok = cluster_normals(w, normals)
    feats = np.asarray(features, dtype=float)
    xr_feats = w.T @ feats
    # rebuild the position block from the projected points so the rotation
    # net sees where the cluster actually ended up
    xr_feats[:, 0:3] = (xr - nets.lo[0:3]) * (2.0 / (nets.hi[0:3] - nets.lo[0:3])) - 1.0
    theta = rotation_angles(np.hstack([xr_feats, nr]), nets)
    nbar = rotate_normals(nr, theta)
    return ClusteredContacts(xr, nr, nbar, w, proj_ok, norm_ok)


def kmeans_cluster(positions, normals, m_c, shape, pose, seed=0, iters=50, tol=1e-9):
    """Seeded Lloyd baseline with the same surface projection.

    Empty clusters drop out, so fewer than m_c contacts can come back."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    n = len(positions)
    if n <= m_c:
        return ClusteredContacts(
            positions.copy(),
            normals.copy(),
            normals.copy(),
            np.eye(n),
            np.ones(n, dtype=bool),
            np.ones(n, dtype=bool),
            clustered=False,
        )
    rng = np.random.default_rng(seed)
    centers = positions[rng.choice(n, size=m_c, replace=False)]
    assign = None
    for _ in range(iters):
        d2 = np.sum((positions[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        moved = 0.0
        for j in range(m_c):
            members = assign == j
            if np.any(members):
                new = positions[members].mean(axis=0)
                moved = max(moved, float(np.linalg.norm(new - centers[j])))
                centers[j] = new
        if moved < tol:
            break
    keep = [j for j in range(m_c) if np.any(assign == j)]
    w = np.zeros((n, len(keep)))
    for col, j in enumerate(keep):
        members = assign == j
        w[members, col] = 1.0 / members.sum()
    xr, proj_ok = cluster_positions(w, positions, shape, pose)
    nr, norm_ok = cluster_normals(w, normals)
    return ClusteredContacts(xr, nr, nr.copy(), w, proj_ok, norm_ok)
