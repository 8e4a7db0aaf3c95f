"""Contact force solver for the midpoint velocity update.

Each contact carries a frame (normal plus two tangents) and a force expressed
in that frame: lambda = (normal, tangent1, tangent2).  The solver enforces
complementarity on the end-of-step normal velocity, keeps the tangential
force inside the friction cone, and among cone-boundary forces picks the one
minimizing the dissipation objective: the power the friction force feeds into
the midpoint velocity.  Forces couple through the body's midpoint dynamics
A v' = r + f_ext + sum_i J_i^T R_i lambda_i, solved one contact at a time
with the others frozen and relaxed updates in between.

An optional configuration-space direction adds a scalar unilateral force
along a 6-dim generalized axis, handled with the same complementarity rule
after every sweep.

All forces are in Newtons, velocities in m/s; bodies are treated one at a
time against quasistatic counterparts, whose surface motion enters through
each frame's surface_velocity.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .accel import njit
from .spatial import Twist, Wrench, contact_jacobian, midpoint_system

CASE_NAMES = ("open", "stick", "slip")

_SCAN_STEPS = 72
_SCAN_STEP = 2.0 * math.pi / _SCAN_STEPS
_INADMISSIBLE = 1e300


def default_tangents(normal):
    """Deterministic right-handed tangent pair for a unit normal.

    t1 = normalize(n x e) with e the world axis least aligned with n (lowest
    index on ties), t2 = n x t1, so [n t1 t2] has determinant +1.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    e = np.zeros(3)
    e[int(np.argmin(np.abs(n)))] = 1.0
    t1 = np.cross(n, e)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.column_stack([t1, t2])


@dataclass
class ContactFrame:
    """World-frame contact point with its normal and tangent basis.

    The normal points away from the counterpart, into the free half-space of
    the contacting body.  surface_velocity is the counterpart's surface point
    velocity (zero for static fixtures).
    """

    position: np.ndarray
    normal: np.ndarray
    tangents: np.ndarray = None
    surface_velocity: np.ndarray = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValueError("contact normal is degenerate")
        self.normal = n / norm
        if self.tangents is None:
            self.tangents = default_tangents(self.normal)
        else:
            self.tangents = np.asarray(self.tangents, dtype=float).reshape(3, 2)
            b = self.basis()
            if not np.allclose(b.T @ b, np.eye(3), atol=1e-9):
                raise ValueError("contact basis is not orthonormal")
            if np.linalg.det(b) < 0.0:
                raise ValueError("contact basis is left-handed")
        if self.surface_velocity is None:
            self.surface_velocity = np.zeros(3)
        else:
            self.surface_velocity = np.asarray(self.surface_velocity, dtype=float).reshape(3)

    def basis(self):
        """Columns [n t1 t2]; its transpose maps world vectors to contact coords."""
        return np.column_stack([self.normal, self.tangents[:, 0], self.tangents[:, 1]])


@dataclass
class ContactForce:
    normal: float
    tangent: np.ndarray
    case: str = "open"
    fallback: bool = False

    def world_force(self, frame):
        return frame.basis() @ np.array([self.normal, self.tangent[0], self.tangent[1]])


@dataclass
class SolverConfig:
    dt: float = 0.01
    mu: float = 0.3
    relaxation: float = 0.7
    max_outer_iters: int = 200
    tol_velocity: float = 1e-7
    tol_force: float = 1e-6
    bisection_tol: float = 1e-9
    bisection_max_iters: int = 80

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.relaxation <= 1.0:
            raise ValueError("relaxation must lie in (0, 1]")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")


@dataclass
class SolveResult:
    forces: list
    lambda_c: float
    wrench: Wrench
    v_next: Twist
    iterations: int
    converged: bool
    residuals: dict
    fallback_count: int = 0


# ---------------------------------------------------------------------------
# Scalar kernels.  D is the 3x3 contact-space Delassus block (not symmetric:
# the left matrix of the midpoint update carries a skew gyroscopic term),
# ce the end-of-step contact velocity at zero own force, ch the same at the
# midpoint; both already have the surface velocity removed.

@njit(cache=True)
def _slip_obj(d, ch1, ch2, ce0, mu, beta):
    """Dissipation objective on the friction cone boundary at angle beta.

    Returns a huge sentinel where the coupled normal force would be invalid
    (non-positive denominator)."""
    cb = math.cos(beta)
    sb = math.sin(beta)
    denom = d[0, 0] + mu * (d[0, 1] * cb + d[0, 2] * sb)
    if denom <= 1e-14 * d[0, 0]:
        return 1e300
    ln = -ce0 / denom
    lt1 = mu * ln * cb
    lt2 = mu * ln * sb
    vm1 = ch1 + 0.5 * (d[1, 0] * ln + d[1, 1] * lt1 + d[1, 2] * lt2)
    vm2 = ch2 + 0.5 * (d[2, 0] * ln + d[2, 1] * lt1 + d[2, 2] * lt2)
    return lt1 * vm1 + lt2 * vm2


@njit(cache=True)
def _slip_dobj(d, ch1, ch2, ce0, mu, beta):
    h = 1e-6
    lo = _slip_obj(d, ch1, ch2, ce0, mu, beta - h)
    hi = _slip_obj(d, ch1, ch2, ce0, mu, beta + h)
    if lo >= 1e299 or hi >= 1e299:
        return np.nan
    return (hi - lo) / (2.0 * h)


@njit(cache=True)
def _beta_bisect(d, ch1, ch2, ce0, mu, lo, hi, tol, max_iters):
    """Bisect on the objective derivative; nan when the bracket fails."""
    dlo = _slip_dobj(d, ch1, ch2, ce0, mu, lo)
    dhi = _slip_dobj(d, ch1, ch2, ce0, mu, hi)
    if math.isnan(dlo) or math.isnan(dhi) or not (dlo < 0.0 and dhi > 0.0):
        return np.nan
    it = 0
    while hi - lo > tol and it < max_iters:
        mid = 0.5 * (lo + hi)
        dm = _slip_dobj(d, ch1, ch2, ce0, mu, mid)
        if math.isnan(dm):
            return np.nan
        if dm > 0.0:
            hi = mid
        else:
            lo = mid
        it += 1
    return 0.5 * (lo + hi)


@njit(cache=True)
def _case_solve(d, ce, ch, mu, bis_tol, bis_max, out):
    """Single-contact force with every other force frozen.

    Fills out with (normal, t1, t2); returns (case, fallback) where case is
    0 open, 1 stick, 2 slip.  fallback flags a failed bisection bracket."""
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    if ce[0] >= 0.0:
        return 0, 0

    a00 = d[0, 0]
    a01 = d[0, 1]
    a02 = d[0, 2]
    a10 = d[1, 0]
    a11 = d[1, 1]
    a12 = d[1, 2]
    a20 = d[2, 0]
    a21 = d[2, 1]
    a22 = d[2, 2]
    det = (
        a00 * (a11 * a22 - a12 * a21)
        - a01 * (a10 * a22 - a12 * a20)
        + a02 * (a10 * a21 - a11 * a20)
    )
    big = max(abs(a00), max(abs(a11), abs(a22)))
    if abs(det) > 1e-16 * big * big * big:
        b0 = -ce[0]
        b1 = -ce[1]
        b2 = -ce[2]
        l0 = (
            b0 * (a11 * a22 - a12 * a21)
            - a01 * (b1 * a22 - a12 * b2)
            + a02 * (b1 * a21 - a11 * b2)
        ) / det
        l1 = (
            a00 * (b1 * a22 - a12 * b2)
            - b0 * (a10 * a22 - a12 * a20)
            + a02 * (a10 * b2 - b1 * a20)
        ) / det
        l2 = (
            a00 * (a11 * b2 - b1 * a21)
            - a01 * (a10 * b2 - b1 * a20)
            + b0 * (a10 * a21 - a11 * a20)
        ) / det
        if l0 >= 0.0 and l1 * l1 + l2 * l2 <= (mu * l0) * (mu * l0):
            out[0] = l0
            out[1] = l1
            out[2] = l2
            return 1, 0

    if mu <= 0.0:
        out[0] = -ce[0] / a00
        return 2, 0

    # slip: pick the cone-boundary angle minimizing the dissipation objective
    fallback = 0
    best_beta = np.nan
    best_obj = 1e300
    vt1 = ch[1]
    vt2 = ch[2]
    if vt1 * vt1 + vt2 * vt2 > 1e-24:
        b0a = math.atan2(-vt2, -vt1)
        bb = _beta_bisect(
            d, ch[1], ch[2], ce[0], mu, b0a - 0.5 * math.pi, b0a + 0.5 * math.pi, bis_tol, bis_max
        )
        if not math.isnan(bb):
            ob = _slip_obj(d, ch[1], ch[2], ce[0], mu, bb)
            if ob < best_obj:
                best_obj = ob
                best_beta = bb
        else:
            fallback = 1
    else:
        fallback = 1

    # coarse scan guard: protects against a second minimum inside the bracket
    # and seeds the fallback when the bracket fails
    scan_beta = np.nan
    scan_obj = 1e300
    for k in range(_SCAN_STEPS):
        b = k * _SCAN_STEP
        ob = _slip_obj(d, ch[1], ch[2], ce[0], mu, b)
        if ob < scan_obj:
            scan_obj = ob
            scan_beta = b
    if scan_obj < 1e299:
        rb = _beta_bisect(
            d, ch[1], ch[2], ce[0], mu, scan_beta - _SCAN_STEP, scan_beta + _SCAN_STEP, bis_tol, bis_max
        )
        if not math.isnan(rb):
            ro = _slip_obj(d, ch[1], ch[2], ce[0], mu, rb)
            if ro < scan_obj:
                scan_obj = ro
                scan_beta = rb
        if scan_obj < best_obj:
            best_obj = scan_obj
            best_beta = scan_beta

    if math.isnan(best_beta):
        # no admissible slip direction at all: frictionless normal force
        out[0] = -ce[0] / a00
        return 2, 1
    cb = math.cos(best_beta)
    sb = math.sin(best_beta)
    denom = a00 + mu * (a01 * cb + a02 * sb)
    ln = -ce[0] / denom
    out[0] = ln
    out[1] = mu * ln * cb
    out[2] = mu * ln * sb
    return 2, fallback


@njit(cache=True)
def _sor_kernel(
    vk, vfree, u, gj, sc, d, mu, alpha, max_outer, tol_v, tol_f, bis_tol, bis_max,
    ac, dc, nc, has_c, lam, cases, res,
):
    m = lam.shape[0]
    v = vfree.copy()
    lam_c = 0.0
    lstar = np.zeros(3)
    vwo = np.zeros(6)
    ce = np.zeros(3)
    chv = np.zeros(3)
    fallbacks = 0
    iters = 0
    converged = False
    for _outer in range(max_outer):
        iters += 1
        for i in range(m):
            for k in range(6):
                vwo[k] = v[k] - (
                    u[i, k, 0] * lam[i, 0] + u[i, k, 1] * lam[i, 1] + u[i, k, 2] * lam[i, 2]
                )
            for a in range(3):
                e = 0.0
                h = 0.0
                for k in range(6):
                    e += gj[i, a, k] * vwo[k]
                    h += gj[i, a, k] * 0.5 * (vk[k] + vwo[k])
                ce[a] = e - sc[i, a]
                chv[a] = h - sc[i, a]
            case, fb = _case_solve(d[i], ce, chv, mu, bis_tol, bis_max, lstar)
            cases[i] = case
            fallbacks += fb
            if case == 0:
                # releasing through the relaxation leaves a decaying force
                # that flips the case back and forth; drop it outright
                lam[i, 0] = 0.0
                lam[i, 1] = 0.0
                lam[i, 2] = 0.0
            else:
                for a in range(3):
                    lam[i, a] = alpha * lstar[a] + (1.0 - alpha) * lam[i, a]
            for k in range(6):
                v[k] = vwo[k] + (
                    u[i, k, 0] * lam[i, 0] + u[i, k, 1] * lam[i, 1] + u[i, k, 2] * lam[i, 2]
                )
        if has_c:
            vc = 0.0
            for k in range(6):
                v[k] -= ac[k] * lam_c
            for k in range(6):
                vc += nc[k] * v[k]
            lc_star = -vc / dc if vc < 0.0 else 0.0
            lam_c = alpha * lc_star + (1.0 - alpha) * lam_c
            for k in range(6):
                v[k] += ac[k] * lam_c

        rn = 0.0
        rstick = 0.0
        rcone = 0.0
        rc = 0.0
        for i in range(m):
            vn = -sc[i, 0]
            vt1 = -sc[i, 1]
            vt2 = -sc[i, 2]
            for k in range(6):
                vn += gj[i, 0, k] * v[k]
                vt1 += gj[i, 1, k] * v[k]
                vt2 += gj[i, 2, k] * v[k]
            r_i = max(-vn, 0.0)
            if lam[i, 0] > tol_f:
                r_i += max(vn, 0.0)
            if r_i > rn:
                rn = r_i
            ltn = math.sqrt(lam[i, 1] * lam[i, 1] + lam[i, 2] * lam[i, 2])
            slack = mu * lam[i, 0] - ltn
            if -slack > rcone:
                rcone = -slack
            if slack > tol_f:
                vtn = math.sqrt(vt1 * vt1 + vt2 * vt2)
                if vtn > rstick:
                    rstick = vtn
        if has_c:
            vc = 0.0
            for k in range(6):
                vc += nc[k] * v[k]
            rc = max(-vc, 0.0)
            if lam_c > tol_f:
                rc += max(vc, 0.0)
        res[0] = rn
        res[1] = rstick
        res[2] = max(rcone, 0.0)
        res[3] = rc
        if rn < tol_v and rstick < tol_v and rc < tol_v and res[2] < tol_f:
            converged = True
            break
    return v, lam_c, iters, converged, fallbacks


@njit(cache=True)
def _pgs_kernel(vfree, u, gj, sc, d, mu, alpha, max_outer, tol_v, tol_f, lam, res):
    m = lam.shape[0]
    v = vfree.copy()
    iters = 0
    converged = False
    for _outer in range(max_outer):
        iters += 1
        for i in range(m):
            # normal axis
            vn = -sc[i, 0]
            for k in range(6):
                vn += gj[i, 0, k] * v[k]
            ln = lam[i, 0] - vn / d[i, 0, 0]
            if ln < 0.0:
                ln = 0.0
            ln = alpha * ln + (1.0 - alpha) * lam[i, 0]
            dl = ln - lam[i, 0]
            lam[i, 0] = ln
            for k in range(6):
                v[k] += u[i, k, 0] * dl
            # two tangent axes with independent box bounds
            bound = mu * lam[i, 0]
            for a in range(1, 3):
                vt = -sc[i, a]
                for k in range(6):
                    vt += gj[i, a, k] * v[k]
                lt = lam[i, a] - vt / d[i, a, a]
                lt = alpha * lt + (1.0 - alpha) * lam[i, a]
                if lt > bound:
                    lt = bound
                elif lt < -bound:
                    lt = -bound
                dl = lt - lam[i, a]
                lam[i, a] = lt
                for k in range(6):
                    v[k] += u[i, k, a] * dl

        rn = 0.0
        rstick = 0.0
        rcone = 0.0
        for i in range(m):
            vn = -sc[i, 0]
            vt1 = -sc[i, 1]
            vt2 = -sc[i, 2]
            for k in range(6):
                vn += gj[i, 0, k] * v[k]
                vt1 += gj[i, 1, k] * v[k]
                vt2 += gj[i, 2, k] * v[k]
            r_i = max(-vn, 0.0)
            if lam[i, 0] > tol_f:
                r_i += max(vn, 0.0)
            if r_i > rn:
                rn = r_i
            bound = mu * lam[i, 0]
            for a in range(1, 3):
                la = lam[i, a]
                over = abs(la) - bound
                if over > rcone:
                    rcone = over
                vt = vt1 if a == 1 else vt2
                if bound - abs(la) > tol_f and abs(vt) > rstick:
                    rstick = abs(vt)
        res[0] = rn
        res[1] = rstick
        res[2] = max(rcone, 0.0)
        res[3] = 0.0
        if rn < tol_v and rstick < tol_v and res[2] < tol_f:
            converged = True
            break
    return v, iters, converged


# ---------------------------------------------------------------------------
# Python-level assembly.

def _build_system(contacts, state, external, cfg, damping=None):
    a, r = midpoint_system(state.inertia, state.twist, cfg.dt, damping)
    a_inv = np.linalg.inv(a)
    vfree = a_inv @ (r + external.as_vector())
    m = len(contacts)
    u = np.empty((m, 6, 3))
    gj = np.empty((m, 3, 6))
    sc = np.empty((m, 3))
    dmat = np.empty((m, 3, 3))
    for i, frame in enumerate(contacts):
        jac = contact_jacobian(state.pose, frame.position)
        rot = frame.basis()
        gji = rot.T @ jac
        ui = a_inv @ gji.T
        gj[i] = gji
        u[i] = ui
        dmat[i] = gji @ ui
        sc[i] = rot.T @ frame.surface_velocity
    return a_inv, vfree, u, gj, sc, dmat


def solve_single_contact(frame, state, external_plus_others, cfg, damping=None):
    """Exact force for one contact, every other influence folded into the
    wrench argument.  This is the inner building block of the relaxed sweep."""
    _, vfree, u, gj, sc, dmat = _build_system([frame], state, external_plus_others, cfg, damping)
    vk = state.twist.as_vector()
    ce = gj[0] @ vfree - sc[0]
    ch = gj[0] @ (0.5 * (vk + vfree)) - sc[0]
    lam = np.zeros(3)
    case, fb = _case_solve(
        dmat[0], ce, ch, cfg.mu, cfg.bisection_tol, cfg.bisection_max_iters, lam
    )
    return ContactForce(lam[0], lam[1:].copy(), CASE_NAMES[case], bool(fb))


def solve_contacts(contacts, cspace_normal, state, external, cfg, damping=None):
    """Resolve all contact forces plus the optional configuration-space force.

    Sweeps the contacts in order, solving each exactly with the others frozen
    and relaxing the update, then applies the complementarity rule on the
    configuration-space direction, until residuals fall below tolerance."""
    a_inv, vfree, u, gj, sc, dmat = _build_system(contacts, state, external, cfg, damping)
    vk = state.twist.as_vector()
    m = len(contacts)
    if cspace_normal is not None:
        nc = np.asarray(cspace_normal, dtype=float).reshape(6)
        ac = a_inv @ nc
        dc = float(nc @ ac)
        has_c = dc > 1e-12
    else:
        nc = np.zeros(6)
        ac = np.zeros(6)
        dc = 1.0
        has_c = False

    lam = np.zeros((m, 3))
    cases = np.zeros(m, dtype=np.int64)
    res = np.zeros(4)
    v, lam_c, iters, converged, fallbacks = _sor_kernel(
        vk, vfree, u, gj, sc, dmat, cfg.mu, cfg.relaxation, cfg.max_outer_iters,
        cfg.tol_velocity, cfg.tol_force, cfg.bisection_tol, cfg.bisection_max_iters,
        ac, dc, nc, has_c, lam, cases, res,
    )

    total = nc * lam_c
    for i in range(m):
        total = total + gj[i].T @ lam[i]
    forces = [
        ContactForce(lam[i, 0], lam[i, 1:].copy(), CASE_NAMES[cases[i]]) for i in range(m)
    ]
    return SolveResult(
        forces=forces,
        lambda_c=float(lam_c),
        wrench=Wrench(total[:3], total[3:]),
        v_next=Twist.from_vector(v),
        iterations=int(iters),
        converged=bool(converged),
        residuals={
            "normal": float(res[0]),
            "stick": float(res[1]),
            "cone": float(res[2]),
            "cspace": float(res[3]),
        },
        fallback_count=int(fallbacks),
    )


def pgs_solve(contacts, state, external, cfg, damping=None):
    """Velocity-level projected Gauss-Seidel with boxed friction.

    Baseline solver: each tangent axis is clamped independently to mu times
    the normal force, so the admissible set is a box circumscribing the cone
    and the tangential direction ignores the dissipation objective."""
    _, vfree, u, gj, sc, dmat = _build_system(contacts, state, external, cfg, damping)
    m = len(contacts)
    lam = np.zeros((m, 3))
    res = np.zeros(4)
    v, iters, converged = _pgs_kernel(
        vfree, u, gj, sc, dmat, cfg.mu, cfg.relaxation, cfg.max_outer_iters,
        cfg.tol_velocity, cfg.tol_force, lam, res,
    )
    total = np.zeros(6)
    for i in range(m):
        total += gj[i].T @ lam[i]
    forces = [ContactForce(lam[i, 0], lam[i, 1:].copy(), "pgs") for i in range(m)]
    return SolveResult(
        forces=forces,
        lambda_c=0.0,
        wrench=Wrench(total[:3], total[3:]),
        v_next=Twist.from_vector(v),
        iterations=int(iters),
        converged=bool(converged),
        residuals={
            "normal": float(res[0]),
            "stick": float(res[1]),
            "cone": float(res[2]),
            "cspace": 0.0,
        },
    )
