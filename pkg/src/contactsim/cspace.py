"""Configuration-space contact guard.

Clustering keeps only a budgeted subset of contact nodes, so thin features
can still sink between clusters.  A second, coarser model watches the whole
configuration at once: a small classifier net learns the sign of contact
over [position; XYZ Euler angles], its zero level set standing in for the
contact surface.  Near that surface, the minimum-kinetic-energy retraction
velocity gives the direction of a virtual wrench, which the solver treats
as one extra unilateral constraint on the body twist.

Labels come from the analytic oracle: a configuration is in contact when
any surface node of the moving body penetrates the counterpart's field.
Half of the training samples hug the contact boundary, located by bisection
along random free-to-colliding rays in configuration space.
"""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .geometry import sdf, sample_surface_nodes
from .spatial import (
    Pose,
    Twist,
    euler_xyz_to_quat,
    integrate_pose,
    quat_to_euler_xyz,
)

_FOOTER_MAGIC = b"CSNT"
_FOOTER_FMT = "<6d6d"


def pose_from_config(q):
    q = np.asarray(q, dtype=float).reshape(6)
    return Pose(q[:3].copy(), euler_xyz_to_quat(q[3:]))


def config_from_pose(pose):
    return np.concatenate([pose.position, quat_to_euler_xyz(pose.quaternion)])


@dataclass
class CSurfaceNet:
    """Sign-of-contact surface over configurations, in [-1, 1].

    Positive means free, negative means some node penetrates, zero is the
    learned contact surface."""

    net: mlp.Mlp
    lo: np.ndarray
    hi: np.ndarray
    report: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(6)
        self.hi = np.asarray(self.hi, dtype=float).reshape(6)

    def h(self, q):
        q = np.asarray(q, dtype=float)
        single = q.ndim == 1
        x = (q.reshape(-1, 6) - self.lo) * (2.0 / (self.hi - self.lo)) - 1.0
        out = 2.0 * self.net.forward(x)[:, 0] - 1.0
        return float(out[0]) if single else out

    def logit(self, q):
        """Pre-sigmoid score; same zero set as h but unsaturated.

        h = tanh(logit / 2), so root finding on the logit sees a live
        gradient even where the sigmoid has flatlined in float64."""
        q = np.asarray(q, dtype=float)
        single = q.ndim == 1
        x = (q.reshape(-1, 6) - self.lo) * (2.0 / (self.hi - self.lo)) - 1.0
        twin = mlp.Mlp(
            self.net.weights, self.net.biases,
            list(self.net.activations[:-1]) + [mlp.ACT_LINEAR],
        )
        out = twin.forward(x)[:, 0]
        return float(out[0]) if single else out

    def save(self, path):
        with open(path, "wb") as f:
            mlp.write_section(f, self.net)
            f.write(_FOOTER_MAGIC)
            f.write(struct.pack(_FOOTER_FMT, *self.lo, *self.hi))

    @staticmethod
    def load(path):
        with open(path, "rb") as f:
            net = mlp.read_section(f)
            magic = f.read(4)
            if magic != _FOOTER_MAGIC:
                raise ValueError(f"bad config surface footer magic {magic!r}")
            vals = struct.unpack(_FOOTER_FMT, f.read(struct.calcsize(_FOOTER_FMT)))
        return CSurfaceNet(net, np.array(vals[:6]), np.array(vals[6:]))


def config_collides(nodes, shape_b, q, margin=0.0):
    """True when any node of the moving body penetrates the counterpart.

    The counterpart sits at the origin; q places the moving body's frame."""
    pose = pose_from_config(q)
    pts = np.asarray(nodes, dtype=float) @ pose.rotation().T + pose.position
    return bool(np.any(sdf(shape_b, pts) < margin))


def default_config_box(shape_a, shape_b, rot_range=0.3):
    """Position box around the counterpart inflated by the moving body's
    half-extent, with a symmetric Euler-angle range."""
    lo_b, hi_b = shape_b.aabb()
    lo_a, hi_a = shape_a.aabb()
    half_a = 0.5 * (hi_a - lo_a)
    lo = np.concatenate([lo_b - half_a, -rot_range * np.ones(3)])
    hi = np.concatenate([hi_b + half_a, rot_range * np.ones(3)])
    return lo, hi


def _bisect_boundary(q_free, q_coll, nodes, shape_b, iters):
    """Parameter of the free/colliding sign change on the segment."""
    t_lo, t_hi = 0.0, 1.0
    for _ in range(iters):
        t = 0.5 * (t_lo + t_hi)
        if config_collides(nodes, shape_b, q_free + t * (q_coll - q_free)):
            t_hi = t
        else:
            t_lo = t
    return 0.5 * (t_lo + t_hi)


def label_configs(
    shape_a,
    shape_b,
    count,
    seed=0,
    box=None,
    nodes=None,
    node_count=1600,
    shell_fraction=0.5,
    shell_width=0.02,
    samples_per_ray=4,
    bisect_iters=30,
):
    """Sample configurations and label them +1 free / -1 in contact.

    The first (1 - shell_fraction) portion is uniform over the box; the
    rest concentrates near the contact surface, at bisection-located
    boundary crossings of random free-to-colliding segments, spread by
    shell_width (in segment parameter) to land on both sides."""
    if nodes is None:
        nodes = sample_surface_nodes(shape_a, node_count, seed=seed)
    lo, hi = default_config_box(shape_a, shape_b) if box is None else box
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    rng = np.random.default_rng(seed)

    def uniform(n):
        return rng.uniform(lo, hi, size=(n, 6))

    def draw_labeled(want_collision, tries=2000):
        for _ in range(tries):
            q = uniform(1)[0]
            if config_collides(nodes, shape_b, q) == want_collision:
                return q
        raise ValueError(
            "config box produced no %s sample" % ("colliding" if want_collision else "free")
        )

    n_shell = int(round(count * shell_fraction))
    n_uniform = count - n_shell
    configs = np.empty((count, 6))
    labels = np.empty(count)
    configs[:n_uniform] = uniform(n_uniform)
    for i in range(n_uniform):
        labels[i] = -1.0 if config_collides(nodes, shape_b, configs[i]) else 1.0

    at = n_uniform
    while at < count:
        q_free = draw_labeled(False)
        q_coll = draw_labeled(True)
        t_star = _bisect_boundary(q_free, q_coll, nodes, shape_b, bisect_iters)
        for _ in range(min(samples_per_ray, count - at)):
            t = np.clip(t_star + rng.uniform(-shell_width, shell_width), 0.0, 1.0)
            q = q_free + t * (q_coll - q_free)
            configs[at] = q
            labels[at] = -1.0 if config_collides(nodes, shape_b, q) else 1.0
            at += 1
    return configs, labels


def train_csurface(
    configs,
    labels,
    seed=0,
    epochs=(600, 300, 300),
    lrs=(3e-2, 1e-2, 3e-3),
    batch_size=128,
    holdout_fraction=0.1,
    accuracy_threshold=0.9,
    verbose=False,
):
    """Fit the surface net to +-1 labels; reports held-out sign accuracy."""
    configs = np.asarray(configs, dtype=float)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    lo = configs.min(axis=0)
    hi = configs.max(axis=0)
    hi = np.where(hi - lo < 1e-12, lo + 1e-12, hi)
    x = (configs - lo) * (2.0 / (hi - lo)) - 1.0
    y = 0.5 * (labels + 1.0)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_hold = max(1, int(len(x) * holdout_fraction))
    hold, fit = order[:n_hold], order[n_hold:]

    net = mlp.Mlp.create(
        [6, 64, 64, 1], [mlp.ACT_TANH, mlp.ACT_TANH, mlp.ACT_SIGMOID], seed=seed
    )
    for phase, (n_ep, lr) in enumerate(zip(epochs, lrs)):
        mlp.train(
            net,
            x[fit],
            y[fit, None],
            epochs=n_ep,
            batch_size=batch_size,
            lr=lr,
            seed=seed + 2 + phase,
        )
        if verbose:
            pred = net.forward(x[hold])[:, 0] > 0.5
            acc = float(np.mean(pred == (y[hold] > 0.5)))
            print(f"phase {phase}: holdout accuracy {acc:.4f}")

    pred = net.forward(x[hold])[:, 0] > 0.5
    accuracy = float(np.mean(pred == (y[hold] > 0.5)))
    cs = CSurfaceNet(net, lo, hi)
    cs.report = {"accuracy": accuracy, "n_fit": len(fit), "n_holdout": len(hold)}
    if accuracy < accuracy_threshold:
        warnings.warn(
            f"configuration surface held-out accuracy {accuracy:.3f} below "
            f"{accuracy_threshold:.3f}",
            stacklevel=2,
        )
    return cs


@dataclass
class CSpaceResult:
    engaged: bool
    converged: bool = False
    normal: np.ndarray = None
    v_opt: np.ndarray = None
    h_start: float = 0.0
    h_end: float = 0.0
    iterations: int = 0


def _config_after(q, v, dt):
    pose = integrate_pose(pose_from_config(q), Twist(v[:3], v[3:]), dt)
    return config_from_pose(pose)


def cspace_solve(q, net, inertia, dt, margin=0.2, max_iters=30, tol=1e-4, fd_step=1e-6):
    """Minimum-energy retraction onto the learned surface, Gauss-Newton KKT.

    Minimizes 0.5 V'MV subject to h(config after moving at V for dt) = 0;
    one equality constraint gives a closed-form KKT step per iteration.
    The wrench direction is M V_opt normalized, with the sign chosen toward
    increasing h so the constraint always opposes penetration growth."""
    q = np.asarray(q, dtype=float).reshape(6)
    h0 = net.h(q)
    if h0 > margin:
        return CSpaceResult(engaged=False, h_start=h0, h_end=h0)

    m = inertia.matrix()
    m_inv = np.linalg.inv(m)

    def probe(v):
        # batched evaluation: the iterate plus central differences per axis,
        # on the logit so saturated regions keep a usable gradient
        probes = np.empty((13, 6))
        probes[0] = _config_after(q, v, dt)
        for i in range(6):
            e = np.zeros(6)
            e[i] = fd_step
            probes[1 + 2 * i] = _config_after(q, v + e, dt)
            probes[2 + 2 * i] = _config_after(q, v - e, dt)
        zv = net.logit(probes)
        return zv[0], (zv[1::2] - zv[2::2]) / (2.0 * fd_step)

    def z_at(v):
        return net.logit(_config_after(q, v, dt))

    v = np.zeros(6)
    a_last = None
    it = 0
    need_polish = False
    if abs(h0) >= 0.5:
        # deep start: damped Newton creeps across the plateau, so bracket
        # the sign change along the minimum-energy ray and bisect onto it
        z0, a0 = probe(v)
        denom = float(a0 @ (m_inv @ a0))
        if denom >= 1e-18:
            ray = m_inv @ a0
            t_hi = -z0 / denom
            for _ in range(12):
                if np.sign(z_at(t_hi * ray)) != np.sign(z0):
                    break
                t_hi *= 2.0
            if np.sign(z_at(t_hi * ray)) != np.sign(z0):
                t_lo = 0.0
                for _ in range(40):
                    t_mid = 0.5 * (t_lo + t_hi)
                    if np.sign(z_at(t_mid * ray)) == np.sign(z0):
                        t_lo = t_mid
                    else:
                        t_hi = t_mid
                v = 0.5 * (t_lo + t_hi) * ray
                a_last = a0
                need_polish = True

    z_band = 1e-3
    for it in range(1, max_iters + 1):
        z_cur, a = probe(v)
        if abs(np.tanh(0.5 * z_cur)) < tol and not need_polish:
            break
        need_polish = False
        denom = float(a @ (m_inv @ a))
        if denom < 1e-18:
            return CSpaceResult(
                engaged=True, converged=False, h_start=h0,
                h_end=float(np.tanh(0.5 * z_cur)), iterations=it,
            )
        a_last = a
        nu = float(a @ v - z_cur) / denom
        # the full step can overshoot the surface band, so backtrack until
        # the residual drops (or at least stays inside the band)
        step = nu * (m_inv @ a) - v
        accepted = False
        alpha = 1.0
        for _ in range(10):
            v_try = v + alpha * step
            if abs(z_at(v_try)) < max(abs(z_cur), z_band):
                v = v_try
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
    h_end = float(net.h(_config_after(q, v, dt)))
    converged = abs(h_end) < 1e-3
    if not converged or np.linalg.norm(v) < 1e-9:
        return CSpaceResult(
            engaged=True, converged=converged, v_opt=v, h_start=h0, h_end=h_end,
            iterations=it,
        )
    n = m @ v
    # orient toward increasing h: at the KKT point n is parallel to the
    # constraint gradient, so align with the last one evaluated
    if a_last is not None and float(n @ a_last) < 0.0:
        n = -n
    n /= np.linalg.norm(n)
    return CSpaceResult(
        engaged=True,
        converged=True,
        normal=n,
        v_opt=v,
        h_start=h0,
        h_end=h_end,
        iterations=it,
    )


def cspace_normal(q, net, inertia, dt, margin=0.2, max_iters=30, tol=1e-4):
    """Unit 6-vector constraint direction, or None when disengaged/failed."""
    res = cspace_solve(q, net, inertia, dt, margin=margin, max_iters=max_iters, tol=tol)
    return res.normal
