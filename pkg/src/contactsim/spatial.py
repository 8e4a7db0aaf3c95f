"""Rigid-body states on SE(3) and the passive midpoint velocity update.

Quaternions are scalar-first [w, x, y, z].  Twists and wrenches stack the
linear part before the angular part, so the 6x6 generalized mass matrix is
diag(m*I3, J) with J expressed in the same frame as the angular velocity.

The velocity update solves

    (M/dt + C/2) v' = (M/dt - C/2) v + f_ext

with C = diag(0, -skew(J*w)).  Because x^T C x = 0 for every x, the discrete
kinetic energy satisfies E' - E = f_ext . (v + v')/2 * dt exactly (up to the
linear-solve residual), so an unforced body neither gains nor loses energy
regardless of step size.
"""

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12


def skew(v):
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < EPS:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return q / n


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])

def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_rotvec(r):
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    r = np.asarray(r, dtype=float)
    angle = np.linalg.norm(r)
    if angle < EPS:
        # First-order expansion keeps the map smooth through zero.
        return quat_normalize(np.array([1.0, 0.5 * r[0], 0.5 * r[1], 0.5 * r[2]]))
    axis = r / angle
    half = 0.5 * angle
    s = np.sin(half)
    return np.array([np.cos(half), s * axis[0], s * axis[1], s * axis[2]])


def quat_to_rotvec(q):
    """Logarithm map, inverse of quat_from_rotvec on the w >= 0 branch."""
    w, x, y, z = quat_normalize(q)
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    sn = np.sqrt(x * x + y * y + z * z)
    if sn < EPS:
        return 2.0 * np.array([x, y, z])
    angle = 2.0 * np.arctan2(sn, w)
    return (angle / sn) * np.array([x, y, z])


def euler_xyz_to_quat(e):
    """Intrinsic XYZ Euler angles to quaternion, R = Rx(a) Ry(b) Rz(c)."""
    a, b, c = e
    qx = np.array([np.cos(a / 2), np.sin(a / 2), 0.0, 0.0])
    qy = np.array([np.cos(b / 2), 0.0, np.sin(b / 2), 0.0])
    qz = np.array([np.cos(c / 2), 0.0, 0.0, np.sin(c / 2)])
    return quat_mul(quat_mul(qx, qy), qz)


def quat_to_euler_xyz(q):
    """Inverse of euler_xyz_to_quat; pitch is clamped to [-pi/2, pi/2]."""
    m = quat_to_matrix(q)
    b = np.arcsin(np.clip(m[0, 2], -1.0, 1.0))
    if np.abs(m[0, 2]) < 1.0 - 1e-9:
        a = np.arctan2(-m[1, 2], m[2, 2])
        c = np.arctan2(-m[0, 1], m[0, 0])
    else:
        # Gimbal lock: roll and yaw are degenerate, fold everything into roll.
        a = np.arctan2(m[2, 1], m[1, 1])
        c = 0.0
    return np.array([a, b, c])


@dataclass
class Pose:
    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.quaternion = quat_normalize(self.quaternion)

    @staticmethod
    def identity():
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def rotation(self):
        return quat_to_matrix(self.quaternion)

    def transform_point(self, p):
        return self.rotation() @ np.asarray(p, dtype=float) + self.position

    def inverse_transform_point(self, p):
        return self.rotation().T @ (np.asarray(p, dtype=float) - self.position)

    def copy(self):
        return Pose(self.position.copy(), self.quaternion.copy())


@dataclass
class Twist:
    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float).reshape(3)
        self.angular = np.asarray(self.angular, dtype=float).reshape(3)

    def as_vector(self):
        return np.concatenate([self.linear, self.angular])

    @staticmethod
    def from_vector(v):
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3].copy(), v[3:].copy())

    def copy(self):
        return Twist(self.linear.copy(), self.angular.copy())


@dataclass
class Wrench:
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.force = np.asarray(self.force, dtype=float).reshape(3)
        self.torque = np.asarray(self.torque, dtype=float).reshape(3)

    def as_vector(self):
        return np.concatenate([self.force, self.torque])

    @staticmethod
    def from_vector(v):
        v = np.asarray(v, dtype=float).reshape(6)
        return Wrench(v[:3].copy(), v[3:].copy())

    def __add__(self, other):
        return Wrench(self.force + other.force, self.torque + other.torque)


@dataclass
class SpatialInertia:
    mass: float
    inertia: np.ndarray  # 3x3, same frame as the angular velocity it meets

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        if self.mass <= 0.0:
            raise ValueError("mass must be positive")
        if not np.allclose(self.inertia, self.inertia.T, atol=1e-9):
            raise ValueError("inertia tensor must be symmetric")
        if np.any(np.linalg.eigvalsh(self.inertia) <= 0.0):
            raise ValueError("inertia tensor must be positive definite")

    def matrix(self):
        m = np.zeros((6, 6))
        m[:3, :3] = self.mass * np.eye(3)
        m[3:, 3:] = self.inertia
        return m

    @staticmethod
    def solid_cylinder(mass, radius, length):
        jt = mass * (3.0 * radius**2 + length**2) / 12.0
        ja = 0.5 * mass * radius**2
        return SpatialInertia(mass, np.diag([jt, jt, ja]))

    @staticmethod
    def solid_ball(mass, radius):
        j = 0.4 * mass * radius**2
        return SpatialInertia(mass, j * np.eye(3))

    def rotated(self, rot):
        return SpatialInertia(self.mass, rot @ self.inertia @ rot.T)


@dataclass
class RigidState:
    pose: Pose
    twist: Twist
    inertia: SpatialInertia

    def copy(self):
        return RigidState(self.pose.copy(), self.twist.copy(), SpatialInertia(self.inertia.mass, self.inertia.inertia.copy()))


def coriolis_matrix(inertia, angular):
    """6x6 C with the gyroscopic block: C = diag(0, -skew(J*w))."""
    c = np.zeros((6, 6))
    c[3:, 3:] = -skew(inertia.inertia @ np.asarray(angular, dtype=float))
    return c


def midpoint_system(inertia, twist, dt, damping=None):
    """Left matrix A and right vector r of A v' = r + f_ext.

    `damping` is an optional 6x6 positive semidefinite matrix treated at the
    midpoint alongside the gyroscopic term, so velocity-proportional
    resistance stays stable at any step size and only ever removes energy."""
    m = inertia.matrix()
    c = coriolis_matrix(inertia, twist.angular)
    if damping is not None:
        c = c + damping
    a = m / dt + 0.5 * c
    r = (m / dt - 0.5 * c) @ twist.as_vector()
    return a, r


def pmi_step(state, external, dt, damping=None):
    """One passive midpoint velocity update; returns the new Twist.

    The inertia in `state` is used as-is on both sides of the solve, so the
    per-step energy identity holds exactly for whatever frame it lives in.
    Callers tracking a rotating body refresh the world-frame inertia between
    steps, not inside them.
    """
    a, r = midpoint_system(state.inertia, state.twist, dt, damping)
    v_next = np.linalg.solve(a, r + external.as_vector())
    return Twist.from_vector(v_next)


def kinetic_energy(state):
    v = state.twist.as_vector()
    return 0.5 * v @ state.inertia.matrix() @ v


def integrate_pose(pose, twist_mid, dt):
    """Advance a pose by a midpoint twist; rotation via the exponential map."""
    position = pose.position + twist_mid.linear * dt
    dq = quat_from_rotvec(twist_mid.angular * dt)
    quaternion = quat_normalize(quat_mul(dq, pose.quaternion))
    return Pose(position, quaternion)


def advance(state, external, dt, damping=None):
    """Full step: midpoint velocity update, then pose update with (v+v')/2.

    The returned state reuses the same SpatialInertia object; callers that
    keep inertia in world frame re-rotate it from the new orientation.
    """
    v_next = pmi_step(state, external, dt, damping)
    mid = Twist(
        0.5 * (state.twist.linear + v_next.linear),
        0.5 * (state.twist.angular + v_next.angular),
    )
    pose = integrate_pose(state.pose, mid, dt)
    return RigidState(pose, v_next, state.inertia)


def contact_jacobian(pose, node_world):
    """3x6 map from body twist to world velocity of a body-fixed point.

    v_point = v + w x r with r from the body origin to the point, so
    J = [I3, -skew(r)].
    """
    r = np.asarray(node_world, dtype=float) - pose.position
    j = np.zeros((3, 6))
    j[:, :3] = np.eye(3)
    j[:, 3:] = -skew(r)
    return j
