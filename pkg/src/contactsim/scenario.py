"""Scenario configuration: a YAML tree describing one simulated assembly.

A scenario names the moving body and its fixed counterpart, the contact and
solver parameters, the trained network files, the coupling gains for the
command handle, and a mode-specific motion command.  Validation failures
raise ConfigError with the file and line of the offending key.
"""

import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .geometry import Shape
from .solver import SolverConfig

MODES = ("peg_in_hole", "bolting", "ball_slab")
CLUSTER_MODES = ("nets", "kmeans", "none")

_SHAPE_ARGS = {
    "ball": ("radius",),
    "cylinder": ("radius", "length"),
    "slab": ("half_x", "half_y", "half_z"),
    "hole": ("radius", "depth", "half_x", "half_y", "height"),
    "bolt": ("major_diameter", "pitch", "length"),
    "nut": ("major_diameter", "pitch", "thickness", "clearance"),
}


class ConfigError(ValueError):
    pass


def load_yaml_with_lines(text):
    """Parse a YAML document, also returning key path -> 1-based line."""
    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
        data = loader.construct_document(node) if node is not None else {}
    finally:
        loader.dispose()
    lines = {}

    def walk(nd, path):
        if isinstance(nd, yaml.MappingNode):
            for kn, vn in nd.value:
                key_path = path + (str(kn.value),)
                lines[key_path] = kn.start_mark.line + 1
                walk(vn, key_path)
        elif isinstance(nd, yaml.SequenceNode):
            for i, vn in enumerate(nd.value):
                walk(vn, path + (str(i),))

    if node is not None:
        walk(node, ())
    return data, lines


class _Tree:
    """Config dict wrapper that reports file:line on every failure."""

    def __init__(self, data, lines, filename):
        self.data = data
        self.lines = lines
        self.filename = filename

    def fail(self, path, msg):
        line = self.lines.get(path)
        at = f"{self.filename}:{line}" if line else self.filename
        raise ConfigError(f"{at}: {'.'.join(path)}: {msg}")

    def get(self, *path, default=None, required=False):
        node = self.data
        for i, key in enumerate(path):
            if not isinstance(node, dict) or key not in node:
                if required:
                    self.fail(path[: i + 1], "missing required key")
                return default
            node = node[key]
        return node

    def number(self, *path, default=None, required=False, minimum=None, positive=False):
        val = self.get(*path, default=default, required=required)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(path, f"expected a number, got {val!r}")
        val = float(val)
        if positive and val <= 0.0:
            self.fail(path, "must be positive")
        if minimum is not None and val < minimum:
            self.fail(path, f"must be at least {minimum}")
        return val

    def integer(self, *path, default=None, required=False, minimum=None):
        val = self.get(*path, default=default, required=required)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, int):
            self.fail(path, f"expected an integer, got {val!r}")
        if minimum is not None and val < minimum:
            self.fail(path, f"must be at least {minimum}")
        return val

    def choice(self, *path, options, default=None, required=False):
        val = self.get(*path, default=default, required=required)
        if val is None:
            return None
        if val not in options:
            self.fail(path, f"expected one of {', '.join(options)}, got {val!r}")
        return val

    def existing_file(self, *path, base_dir="."):
        val = self.get(*path)
        if val is None:
            return None
        if not isinstance(val, str):
            self.fail(path, f"expected a file path, got {val!r}")
        resolved = val if os.path.isabs(val) else os.path.join(base_dir, val)
        if not os.path.isfile(resolved):
            self.fail(path, f"file not found: {resolved}")
        return resolved


@dataclass
class CouplingConfig:
    """Spring-damper gains tying the body to the command handle.

    axes_linear masks the translational spring per world axis; bolting
    frees the screw axis so advance comes from thread contact, not the
    handle dragging the nut."""

    stiffness: float = 3000.0
    damping: float = 80.0
    rot_stiffness: float = 30.0
    rot_damping: float = 1.5
    axes_linear: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("stiffness", "damping", "rot_stiffness", "rot_damping"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        self.axes_linear = tuple(float(a) for a in self.axes_linear)


@dataclass
class Command:
    """Motion of the command handle (or of the counterpart for ball_slab).

    kind 'descend': handle moves -z at rate (m/s) from the body start.
    kind 'screw': handle spins about +z at rate (rad/s), screw axis free.
    kind 'oscillate': the slab translates along x as amplitude*sin(2*pi*f*t).
    kind 'hold': handle parked at the start pose."""

    kind: str
    rate: float = 0.0
    amplitude: float = 0.0
    frequency: float = 0.0

    def __post_init__(self):
        if self.kind not in ("descend", "screw", "oscillate", "hold"):
            raise ValueError(f"unknown command kind {self.kind!r}")


@dataclass
class BallField:
    count: int = 9
    radius: float = 0.01
    drop_height: float = 0.0
    spacing: float = 0.025

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.radius <= 0.0 or self.spacing <= 0.0:
            raise ValueError("radius and spacing must be positive")


@dataclass
class ScenarioConfig:
    mode: str
    body_shape: Shape
    target_shape: Shape
    command: Command
    mass: float = 0.3
    node_count: int = 1600
    dt: float = 0.01
    steps: int = 1000
    seed: int = 0
    mu: float = 0.3
    gravity: float = 0.0
    m_c: int = 12
    knn: int = 10
    cluster_mode: str = "nets"
    cspace_margin: float = 0.2
    start: np.ndarray = None
    solver: SolverConfig = None
    coupling: CouplingConfig = None
    detect_net: str = None
    cluster_nets: str = None
    cspace_net: str = None
    balls: BallField = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.cluster_mode not in CLUSTER_MODES:
            raise ValueError(f"unknown cluster mode {self.cluster_mode!r}")
        if self.mass <= 0.0 or self.dt <= 0.0:
            raise ValueError("mass and dt must be positive")
        if self.mu < 0.0:
            raise ValueError("mu must be non-negative")
        if self.start is None:
            self.start = np.zeros(3)
        self.start = np.asarray(self.start, dtype=float).reshape(3)
        if self.solver is None:
            self.solver = SolverConfig(dt=self.dt, mu=self.mu)
        if self.coupling is None:
            self.coupling = CouplingConfig()
        if self.mode == "ball_slab" and self.balls is None:
            self.balls = BallField()


def _parse_shape(tree, *path):
    spec = tree.get(*path, required=True)
    if not isinstance(spec, dict):
        tree.fail(path, "expected a mapping with a 'kind' key")
    kind = tree.choice(*path, "kind", options=tuple(_SHAPE_ARGS), required=True)
    args = []
    for name in _SHAPE_ARGS[kind]:
        args.append(tree.number(*path, name, required=True, positive=True))
    try:
        return getattr(Shape, kind)(*args)
    except ValueError as err:
        tree.fail(path, str(err))


def scenario_from_dict(data, lines=None, filename="<config>", base_dir="."):
    tree = _Tree(data if isinstance(data, dict) else {}, lines or {}, filename)
    if not isinstance(data, dict):
        tree.fail((), "top level must be a mapping")
    mode = tree.choice("mode", options=MODES, required=True)

    body_shape = _parse_shape(tree, "body", "shape")
    target_shape = _parse_shape(tree, "target", "shape")

    cmd_kind = tree.choice(
        "command", "kind",
        options=("descend", "screw", "oscillate", "hold"),
        default={"peg_in_hole": "descend", "bolting": "screw", "ball_slab": "oscillate"}[mode],
    )
    command = Command(
        kind=cmd_kind,
        rate=tree.number("command", "rate", default=0.0),
        amplitude=tree.number("command", "amplitude", default=0.0),
        frequency=tree.number("command", "frequency", default=0.0),
    )

    balls = None
    if mode == "ball_slab":
        balls = BallField(
            count=tree.integer("balls", "count", default=9, minimum=1),
            radius=tree.number("balls", "radius", default=0.01, positive=True),
            drop_height=tree.number("balls", "drop_height", default=0.0),
            spacing=tree.number("balls", "spacing", default=0.025, positive=True),
        )

    solver = SolverConfig(
        dt=tree.number("dt", default=0.01, positive=True),
        mu=tree.number("mu", default=0.3, minimum=0.0),
        relaxation=tree.number("solver", "relaxation", default=0.7, positive=True),
        max_outer_iters=tree.integer("solver", "max_outer_iters", default=200, minimum=1),
        tol_velocity=tree.number("solver", "tol_velocity", default=1e-7, positive=True),
        tol_force=tree.number("solver", "tol_force", default=1e-6, positive=True),
    )

    axes_default = (1.0, 1.0, 0.0) if command.kind == "screw" else (1.0, 1.0, 1.0)
    axes = tree.get("coupling", "axes_linear", default=axes_default)
    if not isinstance(axes, (list, tuple)) or len(axes) != 3:
        tree.fail(("coupling", "axes_linear"), "expected a list of three axis gains")
    coupling = CouplingConfig(
        stiffness=tree.number("coupling", "stiffness", default=3000.0, minimum=0.0),
        damping=tree.number("coupling", "damping", default=80.0, minimum=0.0),
        rot_stiffness=tree.number("coupling", "rot_stiffness", default=30.0, minimum=0.0),
        rot_damping=tree.number("coupling", "rot_damping", default=1.5, minimum=0.0),
        axes_linear=tuple(axes),
    )

    start = tree.get("start", default=[0.0, 0.0, 0.0])
    if not isinstance(start, (list, tuple)) or len(start) != 3:
        tree.fail(("start",), "expected [x, y, z]")

    cfg = ScenarioConfig(
        mode=mode,
        body_shape=body_shape,
        target_shape=target_shape,
        command=command,
        mass=tree.number("body", "mass", default=0.3, positive=True),
        node_count=tree.integer("body", "nodes", default=1600, minimum=4),
        dt=solver.dt,
        steps=tree.integer("steps", default=1000, minimum=0),
        seed=tree.integer("seed", default=0),
        mu=solver.mu,
        gravity=tree.number("gravity", default=9.81 if mode == "ball_slab" else 0.0),
        m_c=tree.integer("cluster", "m_c", default=12, minimum=1),
        knn=tree.integer("cluster", "knn", default=10, minimum=1),
        cluster_mode=tree.choice(
            "cluster", "mode", options=CLUSTER_MODES,
            default="nets" if tree.get("networks", "cluster") else "none",
        ),
        cspace_margin=tree.number("cspace", "margin", default=0.2, positive=True),
        start=np.asarray(start, dtype=float),
        solver=solver,
        coupling=coupling,
        detect_net=tree.existing_file("networks", "detect", base_dir=base_dir),
        cluster_nets=tree.existing_file("networks", "cluster", base_dir=base_dir),
        cspace_net=tree.existing_file("networks", "cspace", base_dir=base_dir),
        balls=balls,
    )
    if cfg.cluster_mode == "nets" and cfg.cluster_nets is None:
        tree.fail(("cluster", "mode"), "cluster mode 'nets' needs networks.cluster")
    return cfg


def load_scenario(path):
    with open(path) as f:
        text = f.read()
    try:
        data, lines = load_yaml_with_lines(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from err
    return scenario_from_dict(
        data, lines, filename=os.path.basename(path), base_dir=os.path.dirname(path) or "."
    )
