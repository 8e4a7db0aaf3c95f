"""Analytic signed-distance geometry for the assembly shapes.

Every shape evaluates a signed distance d(p) and its gradient in the shape's
body frame: d < 0 inside the solid, gradient points outward with unit norm
almost everywhere.  Composite shapes (hole block, capped threads) combine
primitive fields with CSG max, which keeps the sign exact everywhere and
makes the reported magnitude a lower bound on the true distance, so contact
depths are never overestimated.

Threaded shapes use the standard metric profile, 60 degree flanks by
default (adjustable via half_angle): triangle height H = pitch / (2 tan
half_angle), crest flat pitch/8 wide at the major radius, root flat pitch/4
wide at major radius - 5H/8.  The helix is
handled by unwrapping: u = z - pitch * atan2(y, x) / (2 pi) maps the thread
surface to a fixed 2D profile in the (u, r) plane, where the distance to the
three profile segments is exact.  A rotation by alpha about +z combined with
a translation of pitch * alpha / (2 pi) along +z leaves the field invariant,
which is what makes a nut advance one pitch per turn.

The unwrap evaluates distances at the query point's own azimuth, so the
magnitude is exact on the surface and carries a relative error of order
(pitch / (2 pi r))^2 nearby (about 1e-3 for metric sizes); the gradient norm
deviates from one by the same amount.  Deep inside the core the reported
depth can exceed the true depth, which is harmless: contact handling only
consumes the field within a few millimetres of the surface.  The nut's
thread clearance is measured perpendicular to the thread faces, which is
what a uniform machining allowance produces.

Two evaluation paths produce identical numbers: scalar kernels compiled with
numba, and a vectorized numpy fallback (CONTACTSIM_DISABLE_NUMBA=1).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .accel import NUMBA_ENABLED, njit

SQRT3 = np.sqrt(3.0)
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Shape:
    kind: str
    params: tuple

    @staticmethod
    def ball(radius):
        _positive(radius=radius)
        return Shape("ball", (float(radius),))

    @staticmethod
    def cylinder(radius, length):
        _positive(radius=radius, length=length)
        return Shape("cylinder", (float(radius), float(length)))

    @staticmethod
    def slab(half_x, half_y, half_z):
        _positive(half_x=half_x, half_y=half_y, half_z=half_z)
        return Shape("slab", (float(half_x), float(half_y), float(half_z)))

    @staticmethod
    def hole(radius, depth, half_x, half_y, height):
        """Block occupying z in [-height, 0] with a bore of the given radius
        opening at the top face and reaching down to z = -depth."""
        _positive(radius=radius, depth=depth, half_x=half_x, half_y=half_y, height=height)
        if depth > height:
            raise ValueError("bore depth exceeds block height")
        if radius >= min(half_x, half_y):
            raise ValueError("bore radius exceeds block footprint")
        return Shape("hole", (float(radius), float(depth), float(half_x), float(half_y), float(height)))

    @staticmethod
    def bolt(major_diameter, pitch, length, half_angle=np.pi / 6):
        _positive(major_diameter=major_diameter, pitch=pitch, length=length)
        rmin = _root_radius(major_diameter, pitch, half_angle)
        return Shape("bolt", (float(major_diameter), float(pitch), float(length), rmin))

    @staticmethod
    def nut(major_diameter, pitch, thickness, clearance, outer_radius=None, half_angle=np.pi / 6):
        """Internal thread: the complement of the bolt profile dilated by the
        clearance (measured perpendicular to the thread faces), bounded by an
        outer cylinder."""
        _positive(major_diameter=major_diameter, pitch=pitch, thickness=thickness)
        if clearance < 0:
            raise ValueError("clearance must be non-negative")
        if outer_radius is None:
            outer_radius = 0.8 * major_diameter
        if outer_radius <= 0.5 * major_diameter + clearance:
            raise ValueError("outer radius does not clear the thread")
        rmin = _root_radius(major_diameter, pitch, half_angle)
        return Shape(
            "nut",
            (
                float(major_diameter),
                float(pitch),
                float(thickness),
                float(clearance),
                float(outer_radius),
                rmin,
            ),
        )

    def aabb(self):
        p = self.params
        if self.kind == "ball":
            r = p[0]
            return np.array([-r, -r, -r]), np.array([r, r, r])
        if self.kind == "cylinder":
            r, l = p
            return np.array([-r, -r, -l / 2]), np.array([r, r, l / 2])
        if self.kind == "slab":
            h = np.array(p)
            return -h, h
        if self.kind == "hole":
            _, _, hx, hy, height = p
            return np.array([-hx, -hy, -height]), np.array([hx, hy, 0.0])
        if self.kind == "bolt":
            d, l = p[0], p[2]
            r = d / 2
            return np.array([-r, -r, -l / 2]), np.array([r, r, l / 2])
        if self.kind == "nut":
            ro = p[4]
            t = p[2]
            return np.array([-ro, -ro, -t / 2]), np.array([ro, ro, t / 2])
        raise ValueError(f"unknown shape kind {self.kind!r}")

    def sdf(self, pts, impl="auto"):
        return sdf_grad(self, pts, impl)[0]

    def sdf_grad(self, pts, impl="auto"):
        return sdf_grad(self, pts, impl)

    def surface_nodes(self, count, seed=0):
        return sample_surface_nodes(self, count, seed)


def _positive(**kwargs):
    for name, value in kwargs.items():
        if value <= 0:
            raise ValueError(f"{name} must be positive")


def _root_radius(major_diameter, pitch, half_angle):
    if not 0.0 < half_angle < 0.5 * np.pi:
        raise ValueError("half_angle must lie in (0, pi/2)")
    # flank spans 5/16 of the pitch axially; its radial drop follows the slope
    rmin = 0.5 * major_diameter - (5.0 * pitch / 16.0) / np.tan(half_angle)
    if rmin <= 0.05 * major_diameter:
        raise ValueError("thread depth swallows the core; increase half_angle or shrink pitch")
    return float(rmin)


# ---------------------------------------------------------------------------
# Scalar kernels (numba-compiled when acceleration is on).
# Each returns (distance, gx, gy, gz); gradient is the outward unit normal.

@njit(cache=True)
def _ball_point(x, y, z, radius):
    r = np.sqrt(x * x + y * y + z * z)
    if r < 1e-12:
        return -radius, 0.0, 0.0, 1.0
    inv = 1.0 / r
    return r - radius, x * inv, y * inv, z * inv


@njit(cache=True)
def _box_point(x, y, z, hx, hy, hz):
    qx = abs(x) - hx
    qy = abs(y) - hy
    qz = abs(z) - hz
    ox = max(qx, 0.0)
    oy = max(qy, 0.0)
    oz = max(qz, 0.0)
    out = np.sqrt(ox * ox + oy * oy + oz * oz)
    if out > 0.0:
        inv = 1.0 / out
        sx = 1.0 if x >= 0.0 else -1.0
        sy = 1.0 if y >= 0.0 else -1.0
        sz = 1.0 if z >= 0.0 else -1.0
        return out, sx * ox * inv, sy * oy * inv, sz * oz * inv
    # inside: face with the smallest clearance wins
    if qx >= qy and qx >= qz:
        return qx, (1.0 if x >= 0.0 else -1.0), 0.0, 0.0
    if qy >= qz:
        return qy, 0.0, (1.0 if y >= 0.0 else -1.0), 0.0
    return qz, 0.0, 0.0, (1.0 if z >= 0.0 else -1.0)


@njit(cache=True)
def _cylinder_point(x, y, z, radius, length):
    r = np.sqrt(x * x + y * y)
    a = r - radius
    b = abs(z) - 0.5 * length
    rr = max(r, 1e-12)
    cx = x / rr
    cy = y / rr
    sz = 1.0 if z >= 0.0 else -1.0
    oa = max(a, 0.0)
    ob = max(b, 0.0)
    out = np.sqrt(oa * oa + ob * ob)
    if out > 0.0:
        inv = 1.0 / out
        return out, oa * cx * inv, oa * cy * inv, ob * sz * inv
    if a >= b:
        return a, cx, cy, 0.0
    return b, 0.0, 0.0, sz


@njit(cache=True)
def _cavity_point(x, y, z, radius, depth):
    """Bore region: inside the cylinder of given radius, above z = -depth,
    extending upward without bound."""
    r = np.sqrt(x * x + y * y)
    a = r - radius
    b = -(z + depth)
    rr = max(r, 1e-12)
    cx = x / rr
    cy = y / rr
    oa = max(a, 0.0)
    ob = max(b, 0.0)
    out = np.sqrt(oa * oa + ob * ob)
    if out > 0.0:
        inv = 1.0 / out
        return out, oa * cx * inv, oa * cy * inv, -ob * inv
    if a >= b:
        return a, cx, cy, 0.0
    return b, 0.0, 0.0, -1.0


@njit(cache=True)
def _hole_point(x, y, z, radius, depth, hx, hy, height):
    bd, bgx, bgy, bgz = _box_point(x, y, z + 0.5 * height, hx, hy, 0.5 * height)
    cd, cgx, cgy, cgz = _cavity_point(x, y, z, radius, depth)
    # solid = block minus bore
    if bd >= -cd:
        return bd, bgx, bgy, bgz
    return -cd, -cgx, -cgy, -cgz


@njit(cache=True)
def _thread2d(u, r, pitch, rmaj, rmin):
    """Profile distance in the unwrapped (u, r) plane.

    u is measured along the axis from a crest center; the profile repeats
    with the pitch and is mirror-symmetric about both the crest and root
    centers.  Returns (signed distance, d/du, d/dr) with u unfolded.
    """
    um = u % pitch
    sgn_u = 1.0
    if um > 0.5 * pitch:
        um = pitch - um
        sgn_u = -1.0
    c0 = pitch / 16.0
    c1 = 3.0 * pitch / 8.0

    # crest flat, flank, root flat; same projection arithmetic as the
    # vectorized path so both report identical numbers
    d = np.inf
    bx = 0.0
    by = 0.0
    for ax, ay, ex, ey in (
        (0.0, rmaj, c0, rmaj),
        (c0, rmaj, c1, rmin),
        (c1, rmin, 0.5 * pitch, rmin),
    ):
        dx = ex - ax
        dy = ey - ay
        t = ((um - ax) * dx + (r - ay) * dy) / (dx * dx + dy * dy)
        t = min(max(t, 0.0), 1.0)
        vx = um - (ax + t * dx)
        vy = r - (ay + t * dy)
        d2 = vx * vx + vy * vy
        if d2 < d:
            d = d2
            bx, by = vx, vy

    if um <= c0:
        prof = rmaj
    elif um < c1:
        prof = rmaj - ((rmaj - rmin) / (c1 - c0)) * (um - c0)
    else:
        prof = rmin
    s = -1.0 if r <= prof else 1.0
    d = np.sqrt(d)
    if d < 1e-15:
        return 0.0, 0.0, 1.0
    inv = s / d
    return s * d, bx * inv * sgn_u, by * inv


@njit(cache=True)
def _bolt_point(x, y, z, dmaj, pitch, length, rmin):
    r = np.sqrt(x * x + y * y)
    rr = max(r, 1e-9)
    u = z - pitch * np.arctan2(y, x) / TWO_PI
    sd, gu, gr = _thread2d(u, r, pitch, 0.5 * dmaj, rmin)
    k = pitch / (TWO_PI * rr * rr)
    gx = gu * (k * y) + gr * (x / rr)
    gy = gu * (-k * x) + gr * (y / rr)
    gz = gu
    b = abs(z) - 0.5 * length
    if b >= sd:
        sz = 1.0 if z >= 0.0 else -1.0
        return b, 0.0, 0.0, sz
    return sd, gx, gy, gz


@njit(cache=True)
def _nut_point(x, y, z, dmaj, pitch, thickness, clearance, router, rmin):
    r = np.sqrt(x * x + y * y)
    rr = max(r, 1e-9)
    u = z - pitch * np.arctan2(y, x) / TWO_PI
    sd, gu, gr = _thread2d(u, r, pitch, 0.5 * dmaj, rmin)
    # complement of the clearance-dilated external thread
    td = clearance - sd
    k = pitch / (TWO_PI * rr * rr)
    tgx = -(gu * (k * y) + gr * (x / rr))
    tgy = -(gu * (-k * x) + gr * (y / rr))
    tgz = -gu
    cd, cgx, cgy, cgz = _cylinder_point(x, y, z, router, thickness)
    if cd >= td:
        return cd, cgx, cgy, cgz
    return td, tgx, tgy, tgz


@njit(cache=True)
def _slab_point(x, y, z, hx, hy, hz):
    return _box_point(x, y, z, hx, hy, hz)


# Batched kernels: one tight loop per shape kind.

@njit(cache=True)
def _batch_ball(pts, radius, d, g):
    for i in range(pts.shape[0]):
        d[i], g[i, 0], g[i, 1], g[i, 2] = _ball_point(pts[i, 0], pts[i, 1], pts[i, 2], radius)


@njit(cache=True)
def _batch_cylinder(pts, radius, length, d, g):
    for i in range(pts.shape[0]):
        d[i], g[i, 0], g[i, 1], g[i, 2] = _cylinder_point(pts[i, 0], pts[i, 1], pts[i, 2], radius, length)


@njit(cache=True)
def _batch_slab(pts, hx, hy, hz, d, g):
    for i in range(pts.shape[0]):
        d[i], g[i, 0], g[i, 1], g[i, 2] = _slab_point(pts[i, 0], pts[i, 1], pts[i, 2], hx, hy, hz)


@njit(cache=True)
def _batch_hole(pts, radius, depth, hx, hy, height, d, g):
    for i in range(pts.shape[0]):
        d[i], g[i, 0], g[i, 1], g[i, 2] = _hole_point(pts[i, 0], pts[i, 1], pts[i, 2], radius, depth, hx, hy, height)


@njit(cache=True)
def _batch_bolt(pts, dmaj, pitch, length, rmin, d, g):
    for i in range(pts.shape[0]):
        d[i], g[i, 0], g[i, 1], g[i, 2] = _bolt_point(pts[i, 0], pts[i, 1], pts[i, 2], dmaj, pitch, length, rmin)


@njit(cache=True)
def _batch_nut(pts, dmaj, pitch, thickness, clearance, router, rmin, d, g):
    for i in range(pts.shape[0]):
        d[i], g[i, 0], g[i, 1], g[i, 2] = _nut_point(
            pts[i, 0], pts[i, 1], pts[i, 2], dmaj, pitch, thickness, clearance, router, rmin
        )


# ---------------------------------------------------------------------------
# Vectorized numpy fallback. Same formulas, array branches via where().

def _np_ball(pts, radius):
    r = np.linalg.norm(pts, axis=1)
    safe = np.maximum(r, 1e-12)
    g = pts / safe[:, None]
    g[r < 1e-12] = (0.0, 0.0, 1.0)
    return r - radius, g


def _np_box(pts, hx, hy, hz):
    q = np.abs(pts) - np.array([hx, hy, hz])
    o = np.maximum(q, 0.0)
    out = np.linalg.norm(o, axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    d = out + inside
    g = np.sign(pts) * o / np.maximum(out, 1e-300)[:, None]
    im = out == 0.0
    if np.any(im):
        axis = q[im].argmax(axis=1)
        gi = np.zeros((im.sum(), 3))
        gi[np.arange(gi.shape[0]), axis] = np.sign(pts[im][np.arange(gi.shape[0]), axis])
        # sign(0) = 0 would zero the normal on the center plane; push +.
        flat = gi[np.arange(gi.shape[0]), axis] == 0.0
        gi[np.where(flat)[0], axis[flat]] = 1.0
        g[im] = gi
    return d, g


def _np_capped_cyl(pts, radius, half_len, bottom_open=False):
    """Exact capped cylinder; bottom_open extends the solid downward."""
    r = np.hypot(pts[:, 0], pts[:, 1])
    a = r - radius
    if bottom_open:
        b = -(pts[:, 2] + half_len)
        sz = -np.ones(len(pts))
    else:
        b = np.abs(pts[:, 2]) - half_len
        sz = np.where(pts[:, 2] >= 0.0, 1.0, -1.0)
    rr = np.maximum(r, 1e-12)
    cx = pts[:, 0] / rr
    cy = pts[:, 1] / rr
    oa = np.maximum(a, 0.0)
    ob = np.maximum(b, 0.0)
    out = np.hypot(oa, ob)
    d = np.where(out > 0.0, out, np.maximum(a, b))
    g = np.empty_like(pts)
    inv = 1.0 / np.maximum(out, 1e-300)
    g[:, 0] = oa * cx * inv
    g[:, 1] = oa * cy * inv
    g[:, 2] = ob * sz * inv
    im = out == 0.0
    rad = a >= b
    g[im & rad, 0] = cx[im & rad]
    g[im & rad, 1] = cy[im & rad]
    g[im & rad, 2] = 0.0
    g[im & ~rad, 0] = 0.0
    g[im & ~rad, 1] = 0.0
    g[im & ~rad, 2] = sz[im & ~rad]
    return d, g


def _np_cylinder(pts, radius, length):
    return _np_capped_cyl(pts, radius, 0.5 * length)


def _np_slab(pts, hx, hy, hz):
    return _np_box(pts, hx, hy, hz)


def _np_hole(pts, radius, depth, hx, hy, height):
    shifted = pts.copy()
    shifted[:, 2] += 0.5 * height
    bd, bg = _np_box(shifted, hx, hy, 0.5 * height)
    cd, cg = _np_capped_cyl(pts, radius, depth, bottom_open=True)
    use_block = bd >= -cd
    d = np.where(use_block, bd, -cd)
    g = np.where(use_block[:, None], bg, -cg)
    return d, g


def _np_thread2d(u, r, pitch, rmaj, rmin):
    um = np.mod(u, pitch)
    flip = um > 0.5 * pitch
    um = np.where(flip, pitch - um, um)
    sgn_u = np.where(flip, -1.0, 1.0)
    c0 = pitch / 16.0
    c1 = 3.0 * pitch / 8.0

    best_d2 = np.full(u.shape, np.inf)
    best_vx = np.zeros_like(u)
    best_vy = np.zeros_like(u)
    for ax, ay, bx_, by_ in (
        (0.0, rmaj, c0, rmaj),
        (c0, rmaj, c1, rmin),
        (c1, rmin, 0.5 * pitch, rmin),
    ):
        dx = bx_ - ax
        dy = by_ - ay
        t = np.clip(((um - ax) * dx + (r - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        vx = um - (ax + t * dx)
        vy = r - (ay + t * dy)
        d2 = vx * vx + vy * vy
        better = d2 < best_d2
        best_d2 = np.where(better, d2, best_d2)
        best_vx = np.where(better, vx, best_vx)
        best_vy = np.where(better, vy, best_vy)

    prof = np.where(um <= c0, rmaj, np.where(um < c1, rmaj - ((rmaj - rmin) / (c1 - c0)) * (um - c0), rmin))
    s = np.where(r <= prof, -1.0, 1.0)
    d = np.sqrt(best_d2)
    inv = s / np.maximum(d, 1e-15)
    return s * d, best_vx * inv * sgn_u, best_vy * inv


def _np_thread_chain(pts, pitch, rmaj, rmin):
    r = np.hypot(pts[:, 0], pts[:, 1])
    rr = np.maximum(r, 1e-9)
    u = pts[:, 2] - pitch * np.arctan2(pts[:, 1], pts[:, 0]) / TWO_PI
    sd, gu, gr = _np_thread2d(u, r, pitch, rmaj, rmin)
    k = pitch / (TWO_PI * rr * rr)
    g = np.empty_like(pts)
    g[:, 0] = gu * (k * pts[:, 1]) + gr * (pts[:, 0] / rr)
    g[:, 1] = gu * (-k * pts[:, 0]) + gr * (pts[:, 1] / rr)
    g[:, 2] = gu
    return sd, g


def _np_bolt(pts, dmaj, pitch, length, rmin):
    sd, g = _np_thread_chain(pts, pitch, 0.5 * dmaj, rmin)
    b = np.abs(pts[:, 2]) - 0.5 * length
    cap = b >= sd
    d = np.where(cap, b, sd)
    g = g.copy()
    g[cap] = 0.0
    g[cap, 2] = np.where(pts[cap, 2] >= 0.0, 1.0, -1.0)
    return d, g


def _np_nut(pts, dmaj, pitch, thickness, clearance, router, rmin):
    sd, tg = _np_thread_chain(pts, pitch, 0.5 * dmaj, rmin)
    td = clearance - sd
    tg = -tg
    cd, cg = _np_capped_cyl(pts, router, 0.5 * thickness)
    use_cyl = cd >= td
    d = np.where(use_cyl, cd, td)
    g = np.where(use_cyl[:, None], cg, tg)
    return d, g


_NUMPY_IMPL = {
    "ball": _np_ball,
    "cylinder": _np_cylinder,
    "slab": _np_slab,
    "hole": _np_hole,
    "bolt": _np_bolt,
    "nut": _np_nut,
}

_NUMBA_IMPL = {
    "ball": _batch_ball,
    "cylinder": _batch_cylinder,
    "slab": _batch_slab,
    "hole": _batch_hole,
    "bolt": _batch_bolt,
    "nut": _batch_nut,
}


def sdf_grad(shape, pts, impl="auto"):
    """Signed distance and outward gradient of `shape` at body-frame points.

    impl: 'auto' picks the compiled path when numba is active, 'numba' or
    'numpy' force a specific path (used by the kernel benchmark and the
    agreement tests).
    """
    pts = np.ascontiguousarray(np.asarray(pts, dtype=float).reshape(-1, 3))
    if impl == "auto":
        use_numba = NUMBA_ENABLED
    elif impl in ("numba", "numpy"):
        use_numba = impl == "numba"
        if use_numba and not NUMBA_ENABLED:
            raise RuntimeError("numba path requested but acceleration is disabled")
    else:
        raise ValueError(f"unknown impl {impl!r}")
    if use_numba:
        d = np.empty(pts.shape[0])
        g = np.empty_like(pts)
        _NUMBA_IMPL[shape.kind](pts, *shape.params, d, g)
        return d, g
    return _NUMPY_IMPL[shape.kind](pts, *shape.params)


def sdf(shape, pts, impl="auto"):
    return sdf_grad(shape, pts, impl)[0]


# ---------------------------------------------------------------------------
# Surface node sampling: rejection near the surface, Newton projection onto
# the zero level set, then voxel thinning for a roughly even distribution.

def sample_surface_nodes(shape, count, seed=0, band_frac=0.25):
    lo, hi = shape.aabb()
    extent = hi - lo
    band = band_frac * float(extent.min())
    rng = np.random.default_rng(seed)
    accepted = []
    total = 0
    needed = 8 * count
    for _ in range(200):
        pts = rng.uniform(lo - 0.1 * extent, hi + 0.1 * extent, size=(16384, 3))
        d = sdf(shape, pts)
        near = pts[np.abs(d) < band]
        if len(near):
            projected = _project_to_surface(shape, near)
            accepted.append(projected)
            total += len(projected)
        if total >= needed:
            break
    if total < count:
        raise RuntimeError(f"surface sampling starved: got {total} of {count}")
    pts = np.vstack(accepted)
    pts = pts[rng.permutation(len(pts))]
    return _voxel_thin(pts, count)


def _project_to_surface(shape, pts, tol=1e-10, iters=8):
    pts = pts.copy()
    for _ in range(iters):
        d, g = sdf_grad(shape, pts)
        live = np.abs(d) > tol
        if not np.any(live):
            break
        norm = np.linalg.norm(g[live], axis=1)
        ok = norm > 1e-9
        step = np.zeros_like(pts[live])
        step[ok] = (d[live][ok] / norm[ok])[:, None] * g[live][ok]
        pts[live] -= step
    d = sdf(shape, pts)
    return pts[np.abs(d) < 1e-9]


def _voxel_thin(pts, count):
    """Keep roughly one point per voxel, shrinking cells until count fits."""
    lo = pts.min(axis=0)
    span = np.linalg.norm(pts.max(axis=0) - lo)
    cell = span / np.sqrt(count) * 0.8
    for _ in range(12):
        keys = np.floor((pts - lo) / cell).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        if len(first) >= count:
            return pts[np.sort(first)[:count]].copy()
        cell *= 0.75
    # degenerate distribution: fall back to the raw ordering
    return pts[:count].copy()


def node_spacing(nodes):
    """Median nearest-neighbor distance of a node cloud."""
    tree = cKDTree(nodes)
    dist, _ = tree.query(nodes, k=2)
    return float(np.median(dist[:, 1]))


# ---------------------------------------------------------------------------
# Point-vs-shape queries used by the detection layer.

def to_shape_frame(pose, pts_world):
    rot = pose.rotation()
    return (np.asarray(pts_world, dtype=float) - pose.position) @ rot


def aabb_candidates(shape, pose, pts_world, margin):
    """Indices of world points whose shape-frame position is inside the
    shape's box expanded by margin, plus the transformed points."""
    local = to_shape_frame(pose, pts_world)
    lo, hi = shape.aabb()
    mask = np.all((local >= lo - margin) & (local <= hi + margin), axis=1)
    idx = np.nonzero(mask)[0]
    return idx, local[idx]


def broad_phase(nodes, pose_a, target, pose_b, margin):
    """Cull nodes of a moving body against a target shape's box.

    nodes are in the moving body's frame; the result is conservative as long
    as margin is at least the largest per-step surface motion.  Returns the
    kept indices and all node world positions (the caller reuses them).
    """
    world = np.asarray(nodes, dtype=float) @ pose_a.rotation().T + pose_a.position
    idx, _ = aabb_candidates(target, pose_b, world, margin)
    return idx, world


def brute_force_contacts(shape, pose, pts_world, margin=0.0, impl="auto"):
    """Evaluate every point against the analytic field, no culling.

    Returns (indices, signed distances, world-frame outward normals) for
    points with d < margin.  This is the reference detector: exact but paying
    full cost per node.
    """
    local = to_shape_frame(pose, pts_world)
    d, g = sdf_grad(shape, local, impl)
    idx = np.nonzero(d < margin)[0]
    normals = g[idx] @ pose.rotation().T
    return idx, d[idx], normals
