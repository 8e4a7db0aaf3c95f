"""Reference-wrench datasets and clustering-network training.

The clustering networks are fitted against an oracle that needs no learned
parts: the same per-step pipeline solved with every detected contact kept.
``generate_reference`` records (state, applied wrench, contact wrench) rows
while the command handle wanders on a seeded random walk, ``clustering_cost``
replays single solves from those rows with a candidate network in the loop,
and ``cmaes_optimize`` searches the network weights against the train portion
of the dataset.  The held-out portion is reserved for evaluation and is never
seen by the optimizer.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .cluster import cluster_contacts, kmeans_cluster, node_features
from .cspace import CSurfaceNet, cspace_normal
from .detect import DepthNet, detect
from .geometry import broad_phase, brute_force_contacts, sample_surface_nodes
from .runner import BROAD_MARGIN, _body_inertia, _relative_config, build_world, step_world
from .solver import ContactFrame, pgs_solve, solve_contacts
from .spatial import (
    Pose,
    RigidState,
    SpatialInertia,
    Twist,
    Wrench,
    quat_from_rotvec,
)

log = logging.getLogger(__name__)

TORQUE_WEIGHT = 10.0

_COLUMNS = (
    "step px py pz qw qx qy qz vx vy vz wx wy wz "
    "afx afy afz atx aty atz rfx rfy rfz rtx rty rtz"
)


@dataclass
class TrajectoryDataset:
    """Per-step rows of pre-step state, applied wrench, and contact wrench.

    states stacks pose (7) and twist (6); applied is the full external wrench
    fed to the solver; reference is the contact wrench the unclustered solve
    produced.  discarded counts steps dropped during generation and is not
    part of the file format."""

    steps: np.ndarray
    states: np.ndarray
    applied: np.ndarray
    reference: np.ndarray
    dt: float
    discarded: int = 0

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=int).reshape(-1)
        n = len(self.steps)
        self.states = np.asarray(self.states, dtype=float).reshape(n, 13)
        self.applied = np.asarray(self.applied, dtype=float).reshape(n, 6)
        self.reference = np.asarray(self.reference, dtype=float).reshape(n, 6)
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return len(self.steps)

    def train_test(self, train_fraction=0.7):
        """Contiguous split: the leading fraction trains, the tail is held out."""
        n = len(self)
        cut = int(round(n * train_fraction))
        if cut < 1 or cut >= n:
            raise ValueError(f"cannot split {n} rows at fraction {train_fraction}")
        return self._slice(slice(0, cut)), self._slice(slice(cut, n))

    def _slice(self, sl):
        return TrajectoryDataset(
            self.steps[sl], self.states[sl], self.applied[sl], self.reference[sl], self.dt
        )

    def save(self, path):
        table = np.column_stack(
            [self.steps.astype(float), self.states, self.applied, self.reference]
        )
        header = f"trajectory dataset dt={self.dt:.17g}\ncolumns: {_COLUMNS}"
        np.savetxt(path, table, fmt=["%d"] + ["%.17g"] * 25, header=header)

    @staticmethod
    def load(path):
        dt = None
        with open(path) as f:
            for line in f:
                if not line.startswith("#"):
                    break
                if "dt=" in line:
                    dt = float(line.split("dt=")[1].strip())
        if dt is None:
            raise ValueError(f"{path}: missing dt header")
        table = np.atleast_2d(np.loadtxt(path))
        if table.shape[1] != 26:
            raise ValueError(f"{path}: expected 26 columns, found {table.shape[1]}")
        return TrajectoryDataset(
            table[:, 0], table[:, 1:14], table[:, 14:20], table[:, 20:26], dt
        )


def _random_walk(rng, steps, scale, reversion):
    """Zero-anchored discrete OU track of shape (steps + 1, 3).

    scale is the stationary standard deviation per axis."""
    sigma = scale * math.sqrt(2.0 * reversion - reversion * reversion)
    track = np.zeros((steps + 1, 3))
    noise = rng.standard_normal((steps, 3))
    for k in range(steps):
        track[k + 1] = (1.0 - reversion) * track[k] + sigma * noise[k]
    return track


def generate_reference(
    cfg,
    seed=0,
    steps=1000,
    position_scale=1.5e-3,
    rotation_scale=5e-3,
    reversion=0.02,
):
    """Run the unclustered pipeline under a wandering handle and record rows.

    The scenario is rerun at a 1 ms step with clustering off; every detected
    contact goes straight to the solver, so the recorded contact wrench is
    the target a clustered solve should reproduce.  The handle follows a
    seeded mean-reverting random walk around the start configuration, with
    the twist taken as the finite difference of the track.  Steps that fail
    to converge, or that only converged through the half-step retry, are
    logged and left out; the simulation itself keeps going."""
    base = replace(cfg, dt=1e-3, steps=int(steps), cluster_mode="none", cluster_nets=None)
    if base.mode == "ball_slab":
        raise ValueError("reference generation needs a single-body scenario")
    world = build_world(base)
    body = world.bodies[0]

    rng = np.random.default_rng(seed)
    offsets = _random_walk(rng, steps, position_scale, reversion)
    rotvecs = _random_walk(rng, steps, rotation_scale, reversion)

    dt = base.dt
    kept, states, applied, reference = [], [], [], []
    discarded = 0
    for k in range(steps):
        pre = np.concatenate(
            [body.state.pose.position, body.state.pose.quaternion, body.state.twist.as_vector()]
        )
        handle = (
            Pose(base.start + offsets[k], quat_from_rotvec(rotvecs[k])),
            Twist((offsets[k + 1] - offsets[k]) / dt, (rotvecs[k + 1] - rotvecs[k]) / dt),
        )
        rec = step_world(world, handle=handle)[0]
        if rec.converged and not rec.retried:
            kept.append(k)
            states.append(pre)
            applied.append(rec.applied)
            reference.append(rec.wrench)
        else:
            discarded += 1
            log.warning(
                "dropping step %d: converged=%s retried=%s", k, rec.converged, rec.retried
            )
    if discarded:
        log.warning("dropped %d of %d steps", discarded, steps)
    if not kept:
        raise ValueError("every step was discarded; nothing to record")
    return TrajectoryDataset(
        np.array(kept),
        np.array(states),
        np.array(applied),
        np.array(reference),
        dt,
        discarded=discarded,
    )


@dataclass
class CostContext:
    """Fixed scenario data shared by every cost evaluation."""

    nodes: np.ndarray
    mass: float
    local_inertia: np.ndarray
    target_shape: object
    target_pose: Pose
    solver: object
    damping: object
    detect_net: object
    cspace_net: object
    cspace_margin: float
    broad_margin: float = BROAD_MARGIN


def cost_context(cfg, dt):
    """Build the shared evaluation context for a scenario at step size dt.

    Mirrors the runner: same node cloud seed, same coupling damping matrix,
    same networks.  The counterpart stays at the origin, which is where
    reference generation holds it."""
    if cfg.mode == "ball_slab":
        raise ValueError("cost evaluation needs a single-body scenario")
    coupling = cfg.coupling
    damping = np.diag(
        np.concatenate(
            [
                coupling.damping * np.asarray(coupling.axes_linear, dtype=float),
                coupling.rot_damping * np.ones(3),
            ]
        )
    )
    return CostContext(
        nodes=sample_surface_nodes(cfg.body_shape, cfg.node_count, cfg.seed),
        mass=cfg.mass,
        local_inertia=_body_inertia(cfg.body_shape, cfg.mass),
        target_shape=cfg.target_shape,
        target_pose=Pose.identity(),
        solver=replace(cfg.solver, dt=dt),
        damping=damping,
        detect_net=DepthNet.load(cfg.detect_net) if cfg.detect_net else None,
        cspace_net=CSurfaceNet.load(cfg.cspace_net) if cfg.cspace_net else None,
        cspace_margin=cfg.cspace_margin,
    )


@dataclass
class PreparedRecord:
    """One dataset row with detection and features already evaluated.

    Contact positions, normals, and node features depend only on the
    recorded state and the fixed feature bounds, so they are computed once
    and reused across every candidate network."""

    state: RigidState
    external: Wrench
    positions: np.ndarray
    normals: np.ndarray
    features: np.ndarray
    nvec: object
    reference: np.ndarray


def prepare_records(context, dataset, lo, hi):
    """Evaluate the candidate-independent pipeline stages for every row."""
    out = []
    for i in range(len(dataset)):
        row = dataset.states[i]
        pose = Pose(row[:3], row[3:7])
        twist = Twist(row[7:10], row[10:13])
        rot = pose.rotation()
        state = RigidState(
            pose, twist, SpatialInertia(context.mass, rot @ context.local_inertia @ rot.T)
        )
        external = Wrench(dataset.applied[i, :3], dataset.applied[i, 3:])

        cand, world_nodes = broad_phase(
            context.nodes, pose, context.target_shape, context.target_pose, context.broad_margin
        )
        if context.detect_net is not None:
            idx, _, normals = detect(
                context.nodes, pose, context.detect_net, context.target_pose, candidates=cand
            )
        else:
            sub, _, normals = brute_force_contacts(
                context.target_shape, context.target_pose, world_nodes[cand]
            )
            idx = cand[sub]
        positions = world_nodes[idx]
        if len(idx):
            features = node_features(
                positions,
                pose,
                twist,
                np.tile(external.force, (len(idx), 1)),
                np.tile(external.torque, (len(idx), 1)),
                lo,
                hi,
            )
        else:
            features = np.zeros((0, 19))

        nvec = None
        if context.cspace_net is not None:
            q = _relative_config(pose, context.target_pose)
            nvec = cspace_normal(
                q, context.cspace_net, state.inertia, context.solver.dt,
                margin=context.cspace_margin,
            )
        out.append(
            PreparedRecord(
                state, external, positions, normals, features, nvec,
                dataset.reference[i].copy(),
            )
        )
    return out


def _wrench_error(result_wrench, reference, torque_weight):
    d = result_wrench - reference
    return float(d[:3] @ d[:3]) + torque_weight**2 * float(d[3:] @ d[3:])


def clustering_cost(nets, prepared, context, torque_weight=TORQUE_WEIGHT):
    """RMS wrench error of the clustered solve against the recorded oracle.

    Torque components are weighted so a newton-metre counts as ten newtons.
    Records at or below the cluster count pass through unchanged and solve
    identically to the oracle, contributing zero."""
    if not prepared:
        raise ValueError("no records to evaluate")
    total = 0.0
    for rec in prepared:
        pos, nrm = rec.positions, rec.normals
        if len(pos):
            cc = cluster_contacts(
                pos, nrm, rec.features, nets, context.target_shape, context.target_pose
            )
            pos, nrm = cc.positions, cc.rotated_normals
        frames = [ContactFrame(p, n) for p, n in zip(pos, nrm)]
        if frames or rec.nvec is not None:
            result = solve_contacts(
                frames, rec.nvec, rec.state, rec.external, context.solver, context.damping
            )
            wrench = result.wrench.as_vector()
        else:
            wrench = np.zeros(6)
        total += _wrench_error(wrench, rec.reference, torque_weight)
    return math.sqrt(total / len(prepared))


def baseline_cost(prepared, context, m_c, torque_weight=TORQUE_WEIGHT, seed=0):
    """Same error metric with seeded k-means clusters and the box-friction solver."""
    if not prepared:
        raise ValueError("no records to evaluate")
    total = 0.0
    for rec in prepared:
        pos, nrm = rec.positions, rec.normals
        if len(pos):
            cc = kmeans_cluster(
                pos, nrm, m_c, context.target_shape, context.target_pose, seed=seed
            )
            pos, nrm = cc.positions, cc.rotated_normals
        frames = [ContactFrame(p, n) for p, n in zip(pos, nrm)]
        if frames:
            result = pgs_solve(frames, rec.state, rec.external, context.solver, context.damping)
            wrench = result.wrench.as_vector()
        else:
            wrench = np.zeros(6)
        total += _wrench_error(wrench, rec.reference, torque_weight)
    return math.sqrt(total / len(prepared))


def cmaes_optimize(
    nets,
    dataset,
    context,
    cmaes_cfg=None,
    log_path=None,
    map_fn=map,
    torque_weight=TORQUE_WEIGHT,
    callback=None,
):
    """Fit the clustering networks to the train portion of a dataset.

    Only the leading 70% of rows ever reaches the optimizer; the tail stays
    untouched for held-out evaluation.  Returns the best networks found and
    the raw optimizer result.  When log_path is given, one line per
    generation (index, best cost so far, step size) is written there."""
    from .cmaes import cmaes_minimize

    train, _ = dataset.train_test()
    prepared = prepare_records(context, train, nets.lo, nets.hi)

    def fn(x):
        cand = nets.copy()
        cand.set_flat(x)
        return clustering_cost(cand, prepared, context, torque_weight)

    rows = []

    def record(gen, best_cost, sigma):
        rows.append((gen, best_cost, sigma))
        if callback is not None:
            return callback(gen, best_cost, sigma)
        return False

    result = cmaes_minimize(fn, nets.flatten(), cmaes_cfg, map_fn=map_fn, callback=record)
    if log_path is not None:
        with open(log_path, "w") as f:
            f.write("# generation best_cost sigma\n")
            for gen, best_cost, sigma in rows:
                f.write(f"{gen} {best_cost:.17g} {sigma:.17g}\n")
    best = nets.copy()
    best.set_flat(result.x)
    return best, result
