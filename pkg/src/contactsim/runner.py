"""Scenario execution: command motion, the per-step contact pipeline, benchmarks.

Every step runs the same pipeline on each moving body: coupling and gravity
wrenches, broad-phase cull against the counterpart, contact detection
(learned depth field when a network is configured, analytic surface query
otherwise), feature assembly and clustering, the configuration-space guard,
the contact solve, and the passive midpoint update.  Per-stage wall clocks
and the mean penetration over the body's full node cloud are recorded for
every body on every step.

A non-converged solve is retried once as two half-steps with fresh
detection in between; if the retry still fails the result is kept and the
step is flagged.
"""

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .cluster import ClusterNets, cluster_contacts, kmeans_cluster, node_features
from .cspace import CSurfaceNet, cspace_normal
from .detect import DepthNet, detect
from .geometry import (
    broad_phase,
    brute_force_contacts,
    sample_surface_nodes,
    sdf,
    to_shape_frame,
)
from .scenario import Command
from .solver import ContactFrame, solve_contacts
from .spatial import (
    Pose,
    RigidState,
    SpatialInertia,
    Twist,
    Wrench,
    integrate_pose,
    pmi_step,
    quat_conj,
    quat_from_rotvec,
    quat_mul,
    quat_to_euler_xyz,
    quat_to_rotvec,
)

STAGES = ("forces", "broad", "detect", "cluster", "cspace", "solve", "integrate")

# broad-phase margin; must exceed the largest per-step surface motion
BROAD_MARGIN = 0.005


@dataclass
class Body:
    shape: object
    nodes: np.ndarray  # surface samples, body frame
    mass: float
    local_inertia: np.ndarray  # 3x3 about the COM, body frame
    state: RigidState


def _box_inertia(mass, half):
    hx, hy, hz = half
    return (mass / 3.0) * np.diag([hy * hy + hz * hz, hx * hx + hz * hz, hx * hx + hy * hy])


def _body_inertia(shape, mass):
    """Local inertia tensor from a solid of the same envelope."""
    if shape.kind == "ball":
        return SpatialInertia.solid_ball(mass, shape.params[0]).inertia
    if shape.kind == "cylinder":
        return SpatialInertia.solid_cylinder(mass, shape.params[0], shape.params[1]).inertia
    if shape.kind == "bolt":
        return SpatialInertia.solid_cylinder(mass, 0.5 * shape.params[0], shape.params[2]).inertia
    if shape.kind == "nut":
        return SpatialInertia.solid_cylinder(mass, shape.params[4], shape.params[2]).inertia
    lo, hi = shape.aabb()
    return _box_inertia(mass, 0.5 * (hi - lo))


def _fresh_state(shape, mass, position, quaternion=(1.0, 0.0, 0.0, 0.0)):
    pose = Pose(np.asarray(position, dtype=float), np.asarray(quaternion, dtype=float))
    local = _body_inertia(shape, mass)
    rot = pose.rotation()
    return RigidState(pose, Twist(), SpatialInertia(mass, rot @ local @ rot.T)), local


class World:
    """Mutable simulation state: bodies, counterpart, loaded networks, clock."""

    def __init__(self, cfg, bodies, detect_net=None, cluster_nets=None, cspace_net=None):
        self.cfg = cfg
        self.bodies = bodies
        self.target_shape = cfg.target_shape
        self.target_pose = Pose.identity()
        self.target_twist = Twist()
        self.detect_net = detect_net
        self.cluster_nets = cluster_nets
        self.cspace_net = cspace_net
        self.time = 0.0
        self.step_index = 0
        self.broad_margin = BROAD_MARGIN
        empty = np.zeros((0, 3))
        self.last_contacts = [(empty, empty) for _ in bodies]


def build_world(cfg):
    bodies = []
    if cfg.mode == "ball_slab":
        field = cfg.balls
        side = math.ceil(math.sqrt(field.count))
        body_lo, _ = cfg.body_shape.aabb()
        _, target_hi = cfg.target_shape.aabb()
        z = target_hi[2] - body_lo[2] + field.drop_height
        for k in range(field.count):
            row, col = divmod(k, side)
            offset = np.array(
                [
                    (col - 0.5 * (side - 1)) * field.spacing,
                    (row - 0.5 * (side - 1)) * field.spacing,
                    z,
                ]
            )
            state, local = _fresh_state(cfg.body_shape, cfg.mass, cfg.start + offset)
            nodes = sample_surface_nodes(cfg.body_shape, cfg.node_count, cfg.seed + k)
            bodies.append(Body(cfg.body_shape, nodes, cfg.mass, local, state))
    else:
        state, local = _fresh_state(cfg.body_shape, cfg.mass, cfg.start)
        nodes = sample_surface_nodes(cfg.body_shape, cfg.node_count, cfg.seed)
        bodies.append(Body(cfg.body_shape, nodes, cfg.mass, local, state))

    detect_net = DepthNet.load(cfg.detect_net) if cfg.detect_net else None
    cluster_nets = ClusterNets.load(cfg.cluster_nets) if cfg.cluster_nets else None
    cspace_net = CSurfaceNet.load(cfg.cspace_net) if cfg.cspace_net else None
    return World(cfg, bodies, detect_net, cluster_nets, cspace_net)


def handle_state(cfg, t):
    """Command handle pose and twist at time t; None for ball_slab."""
    if cfg.mode == "ball_slab":
        return None, None
    cmd = cfg.command
    pos = cfg.start.copy()
    quat = np.array([1.0, 0.0, 0.0, 0.0])
    lin = np.zeros(3)
    ang = np.zeros(3)
    if cmd.kind == "descend":
        pos = pos + np.array([0.0, 0.0, -cmd.rate * t])
        lin = np.array([0.0, 0.0, -cmd.rate])
    elif cmd.kind == "screw":
        quat = quat_from_rotvec(np.array([0.0, 0.0, cmd.rate * t]))
        ang = np.array([0.0, 0.0, cmd.rate])
    elif cmd.kind == "oscillate":
        w = 2.0 * math.pi * cmd.frequency
        pos = pos + np.array([cmd.amplitude * math.sin(w * t), 0.0, 0.0])
        lin = np.array([cmd.amplitude * w * math.cos(w * t), 0.0, 0.0])
    return Pose(pos, quat), Twist(lin, ang)


def target_state(cfg, t):
    """Counterpart pose and twist at time t; only ball_slab commands move it."""
    if cfg.mode == "ball_slab" and cfg.command.kind == "oscillate":
        cmd = cfg.command
        w = 2.0 * math.pi * cmd.frequency
        pos = np.array([cmd.amplitude * math.sin(w * t), 0.0, 0.0])
        vel = np.array([cmd.amplitude * w * math.cos(w * t), 0.0, 0.0])
        return Pose(pos, np.array([1.0, 0.0, 0.0, 0.0])), Twist(vel)
    return Pose.identity(), Twist()


def coupling_terms(coupling, handle_pose, handle_twist, state):
    """Spring-damper pulling the body toward the handle.

    Returns the explicit wrench (spring plus the handle-velocity share of
    the damper) and the 6x6 damping matrix for the body-velocity share,
    which the midpoint update treats implicitly so stiff gains stay stable
    at the full step size.  The translational part is masked per axis so a
    screw command can leave the advance direction to thread contact; the
    rotational error is the log map of the relative rotation."""
    axes = np.asarray(coupling.axes_linear, dtype=float)
    force = (
        coupling.stiffness * (handle_pose.position - state.pose.position)
        + coupling.damping * handle_twist.linear
    ) * axes
    q_err = quat_mul(handle_pose.quaternion, quat_conj(state.pose.quaternion))
    torque = (
        coupling.rot_stiffness * quat_to_rotvec(q_err)
        + coupling.rot_damping * handle_twist.angular
    )
    damping = np.diag(
        np.concatenate([coupling.damping * axes, coupling.rot_damping * np.ones(3)])
    )
    return Wrench(force, torque), damping


def _relative_config(pose, target_pose):
    rel_p = (pose.position - target_pose.position) @ target_pose.rotation()
    rel_q = quat_mul(quat_conj(target_pose.quaternion), pose.quaternion)
    return np.concatenate([rel_p, quat_to_euler_xyz(rel_q)])


@dataclass
class StepRecord:
    step: int
    body: int
    time: float
    pose: np.ndarray  # 7, post-step
    twist: np.ndarray  # 6, post-step
    applied: np.ndarray  # 6, external wrench fed to the solve
    wrench: np.ndarray  # 6, total contact wrench
    mean_penetration: float  # meters, averaged over the full node cloud
    n_contacts: int
    n_clusters: int
    iterations: int
    converged: bool
    retried: bool
    cspace_engaged: bool
    stage_times: dict

    @property
    def total_time(self):
        return sum(self.stage_times.values())


def _advance_body(world, index, dt, handle_pose, handle_twist, extra):
    """One pipeline pass for one body at the given step size.

    Mutates the body state and returns the raw step info; retry policy and
    logging live in step_world."""
    cfg = world.cfg
    body = world.bodies[index]
    state = body.state
    clocks = dict.fromkeys(STAGES, 0.0)

    t0 = time.perf_counter()
    force = np.zeros(3)
    torque = np.zeros(3)
    damping = None
    if handle_pose is not None:
        cw, damping = coupling_terms(cfg.coupling, handle_pose, handle_twist, state)
        force += cw.force
        torque += cw.torque
    if cfg.gravity:
        force[2] -= body.mass * cfg.gravity
    if extra is not None:
        force += extra.force
        torque += extra.torque
    external = Wrench(force, torque)
    clocks["forces"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cand, world_nodes = broad_phase(
        body.nodes, state.pose, world.target_shape, world.target_pose, world.broad_margin
    )
    clocks["broad"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if world.detect_net is not None:
        idx, depths, normals = detect(
            body.nodes, state.pose, world.detect_net, world.target_pose, candidates=cand
        )
    else:
        sub, depths, normals = brute_force_contacts(
            world.target_shape, world.target_pose, world_nodes[cand]
        )
        idx = cand[sub]
    positions = world_nodes[idx]
    clocks["detect"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    frame_pos, frame_nrm = positions, normals
    if len(idx) and cfg.cluster_mode == "nets":
        nets = world.cluster_nets
        tiled_f = np.tile(external.force, (len(idx), 1))
        tiled_t = np.tile(external.torque, (len(idx), 1))
        feats = node_features(
            positions, state.pose, state.twist, tiled_f, tiled_t, nets.lo, nets.hi
        )
        cc = cluster_contacts(
            positions, normals, feats, nets, world.target_shape, world.target_pose
        )
        frame_pos, frame_nrm = cc.positions, cc.rotated_normals
    elif len(idx) and cfg.cluster_mode == "kmeans":
        cc = kmeans_cluster(
            positions, normals, cfg.m_c, world.target_shape, world.target_pose, seed=cfg.seed
        )
        frame_pos, frame_nrm = cc.positions, cc.rotated_normals
    world.last_contacts[index] = (
        np.asarray(frame_pos, dtype=float).reshape(-1, 3),
        np.asarray(frame_nrm, dtype=float).reshape(-1, 3),
    )
    clocks["cluster"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    nvec = None
    if world.cspace_net is not None:
        q_rel = _relative_config(state.pose, world.target_pose)
        nvec = cspace_normal(
            q_rel, world.cspace_net, state.inertia, dt, margin=cfg.cspace_margin
        )
    clocks["cspace"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tp = world.target_pose
    tt = world.target_twist
    frames = [
        ContactFrame(
            p,
            n,
            surface_velocity=tt.linear + np.cross(tt.angular, p - tp.position),
        )
        for p, n in zip(frame_pos, frame_nrm)
    ]
    if frames or nvec is not None:
        scfg = cfg.solver if dt == cfg.solver.dt else replace(cfg.solver, dt=dt)
        result = solve_contacts(frames, nvec, state, external, scfg, damping)
        v_next = result.v_next
        iterations = result.iterations
        converged = result.converged
        wrench = result.wrench
    else:
        v_next = pmi_step(state, external, dt, damping)
        iterations = 0
        converged = True
        wrench = Wrench(np.zeros(3), np.zeros(3))
    clocks["solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    mid = Twist(
        0.5 * (state.twist.linear + v_next.linear),
        0.5 * (state.twist.angular + v_next.angular),
    )
    new_pose = integrate_pose(state.pose, mid, dt)
    rot = new_pose.rotation()
    body.state = RigidState(
        new_pose, v_next, SpatialInertia(body.mass, rot @ body.local_inertia @ rot.T)
    )
    # mean penetration over the full cloud; nodes outside the broad margin
    # cannot penetrate, so only candidates need a surface query
    moved = body.nodes[cand] @ rot.T + new_pose.position
    d = sdf(world.target_shape, to_shape_frame(world.target_pose, moved))
    pen = float(np.sum(np.maximum(0.0, -d)) / len(body.nodes))
    clocks["integrate"] = time.perf_counter() - t0

    return {
        "applied": external.as_vector(),
        "wrench": wrench.as_vector(),
        "mean_penetration": pen,
        "n_contacts": int(len(idx)),
        "n_clusters": len(frames),
        "iterations": iterations,
        "converged": converged,
        "cspace_engaged": nvec is not None,
        "clocks": clocks,
    }


def step_world(world, extra=None, handle=None):
    """Advance every body by one step; returns a StepRecord per body.

    extra is an optional per-body list of additional wrenches (disturbances,
    user steering).  handle, a (Pose, Twist) pair, overrides the command
    profile for this step so callers can steer the handle directly."""
    cfg = world.cfg
    t = world.time
    world.target_pose, world.target_twist = target_state(cfg, t)
    if handle is None:
        handle_pose, handle_twist = handle_state(cfg, t)
    else:
        handle_pose, handle_twist = handle

    records = []
    for i, body in enumerate(world.bodies):
        ew = extra[i] if extra is not None else None
        saved = body.state
        info = _advance_body(world, i, cfg.dt, handle_pose, handle_twist, ew)
        retried = False
        if not info["converged"]:
            body.state = saved
            half = 0.5 * cfg.dt
            first = _advance_body(world, i, half, handle_pose, handle_twist, ew)
            second = _advance_body(world, i, half, handle_pose, handle_twist, ew)
            info = {
                "applied": second["applied"],
                "wrench": 0.5 * (first["wrench"] + second["wrench"]),
                "mean_penetration": second["mean_penetration"],
                "n_contacts": max(first["n_contacts"], second["n_contacts"]),
                "n_clusters": max(first["n_clusters"], second["n_clusters"]),
                "iterations": first["iterations"] + second["iterations"],
                "converged": first["converged"] and second["converged"],
                "cspace_engaged": first["cspace_engaged"] or second["cspace_engaged"],
                "clocks": {
                    k: first["clocks"][k] + second["clocks"][k] for k in STAGES
                },
            }
            retried = True
        records.append(
            StepRecord(
                step=world.step_index,
                body=i,
                time=t,
                pose=np.concatenate([body.state.pose.position, body.state.pose.quaternion]),
                twist=body.state.twist.as_vector(),
                applied=info["applied"],
                wrench=info["wrench"],
                mean_penetration=info["mean_penetration"],
                n_contacts=info["n_contacts"],
                n_clusters=info["n_clusters"],
                iterations=info["iterations"],
                converged=info["converged"],
                retried=retried,
                cspace_engaged=info["cspace_engaged"],
                stage_times=info["clocks"],
            )
        )
    world.time += cfg.dt
    world.step_index += 1
    return records


_HEADER = (
    "step body time "
    "px py pz qw qx qy qz vx vy vz wx wy wz "
    "afx afy afz atx aty atz cfx cfy cfz ctx cty ctz "
    "mean_penetration n_contacts n_clusters iterations converged retried cspace_engaged "
    + " ".join(f"t_{s}" for s in STAGES)
    + " t_total"
)


class StepLog:
    """Accumulated per-step records with a plain-text export.

    The text form is one row per body per step, space separated, with a
    commented header naming every column.  Floats are written with full
    precision so repeated runs can be compared bit for bit."""

    def __init__(self, records=None):
        self.records = list(records) if records else []

    def extend(self, records):
        self.records.extend(records)

    def __len__(self):
        return len(self.records)

    def state_matrix(self):
        """Rows of [pose, twist] in (step, body) order."""
        return np.array([np.concatenate([r.pose, r.twist]) for r in self.records])

    def mean_penetrations(self):
        return np.array([r.mean_penetration for r in self.records])

    def write(self, path):
        with open(path, "w") as f:
            f.write("# scenario step log\n")
            f.write("# times are start-of-step seconds; t_* are stage wall clocks\n")
            f.write(f"# columns: {_HEADER}\n")
            for r in self.records:
                nums = [
                    f"{r.step:d}",
                    f"{r.body:d}",
                    f"{r.time:.17g}",
                ]
                nums += [f"{v:.17g}" for v in r.pose]
                nums += [f"{v:.17g}" for v in r.twist]
                nums += [f"{v:.17g}" for v in r.applied]
                nums += [f"{v:.17g}" for v in r.wrench]
                nums.append(f"{r.mean_penetration:.17g}")
                nums += [
                    f"{r.n_contacts:d}",
                    f"{r.n_clusters:d}",
                    f"{r.iterations:d}",
                    f"{int(r.converged):d}",
                    f"{int(r.retried):d}",
                    f"{int(r.cspace_engaged):d}",
                ]
                nums += [f"{r.stage_times[s]:.17g}" for s in STAGES]
                nums.append(f"{r.total_time:.17g}")
                f.write(" ".join(nums) + "\n")


def run_scenario(cfg, out=None, progress=None):
    """Execute a full scenario; optionally write the log and report progress."""
    world = build_world(cfg)
    log = StepLog()
    for k in range(cfg.steps):
        log.extend(step_world(world))
        if progress is not None:
            progress(k, log.records[-1])
    if out is not None:
        log.write(out)
    return log


def bench_detection(cfg, poses=10000, node_count=None, seed=0, band=0.002):
    """Compare learned detection against the analytic surface query.

    Draws near-contact poses around the scenario start (a pose qualifies
    when its closest candidate node is within the band of the surface) and
    times both detectors on identical inputs.  Returns per-pose average and
    worst-case milliseconds plus the speedup ratio."""
    if cfg.detect_net is None:
        raise ValueError("scenario has no detection network to benchmark")
    node_count = node_count or cfg.node_count
    nodes = sample_surface_nodes(cfg.body_shape, node_count, seed)
    net = DepthNet.load(cfg.detect_net)
    target = cfg.target_shape
    target_pose = Pose.identity()
    rng = np.random.default_rng(seed)

    kept = []
    attempts = 0
    while len(kept) < poses:
        attempts += 1
        if attempts > 50 * poses:
            raise RuntimeError("could not find enough near-contact poses")
        pos = cfg.start + rng.uniform(-0.002, 0.002, 3)
        quat = quat_from_rotvec(rng.uniform(-0.02, 0.02, 3))
        pose = Pose(pos, quat)
        cand, world_nodes = broad_phase(nodes, pose, target, target_pose, BROAD_MARGIN)
        if len(cand) == 0:
            continue
        d = sdf(target, to_shape_frame(target_pose, world_nodes[cand]))
        if np.min(np.abs(d)) < band:
            kept.append(pose)

    t_nn = np.empty(len(kept))
    t_bf = np.empty(len(kept))
    for k, pose in enumerate(kept):
        t0 = time.perf_counter()
        cand, world_nodes = broad_phase(nodes, pose, target, target_pose, BROAD_MARGIN)
        detect(nodes, pose, net, target_pose, candidates=cand)
        t_nn[k] = time.perf_counter() - t0

        t0 = time.perf_counter()
        cand, world_nodes = broad_phase(nodes, pose, target, target_pose, BROAD_MARGIN)
        brute_force_contacts(target, target_pose, world_nodes[cand])
        t_bf[k] = time.perf_counter() - t0

    return {
        "poses": len(kept),
        "node_count": node_count,
        "nn_avg_ms": float(np.mean(t_nn) * 1e3),
        "nn_max_ms": float(np.max(t_nn) * 1e3),
        "brute_avg_ms": float(np.mean(t_bf) * 1e3),
        "brute_max_ms": float(np.max(t_bf) * 1e3),
        "speedup": float(np.mean(t_bf) / np.mean(t_nn)),
    }


def bench_penetration(
    cfg, disturbance_seed=0, steps=None, force_scale=5.0, torque_scale=0.2, hold_steps=10
):
    """Paired disturbance runs with the configuration-space guard off and on.

    The handle holds the start pose while a seeded piecewise-constant
    disturbance wrench shakes the body; both runs see the identical
    schedule.  Reports the per-step mean penetration arrays and the
    fraction of steps where the guarded run is no worse."""
    if cfg.cspace_net is None:
        raise ValueError("scenario has no configuration-space network")
    steps = steps or cfg.steps
    base = replace(cfg, command=Command("hold"), steps=steps)

    rng = np.random.default_rng(disturbance_seed)
    segments = math.ceil(steps / hold_steps)
    scale = np.array([force_scale] * 3 + [torque_scale] * 3)
    schedule = np.repeat(rng.uniform(-1.0, 1.0, (segments, 6)) * scale, hold_steps, axis=0)

    def run(with_guard):
        run_cfg = base if with_guard else replace(base, cspace_net=None)
        world = build_world(run_cfg)
        pens = np.empty(steps)
        for k in range(steps):
            w = Wrench(schedule[k, :3], schedule[k, 3:])
            recs = step_world(world, extra=[w] * len(world.bodies))
            pens[k] = recs[0].mean_penetration
        return pens

    pen_off = run(False)
    pen_on = run(True)
    not_worse = float(np.mean(pen_on <= pen_off + 1e-12))
    return {
        "pen_off": pen_off,
        "pen_on": pen_on,
        "fraction_not_worse": not_worse,
        "max_on": float(np.max(pen_on)),
        "max_off": float(np.max(pen_off)),
    }
