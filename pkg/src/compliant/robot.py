"""Robot model: mesh, material, Dirichlet DOFs, cables and effectors.

Robot configs are JSON documents validated against
``schemas/robot.schema.json`` before anything is solved.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .constraints import CableActuator, ConstraintSet, Effector
from .errors import ConfigError, MeshError
from .fem import Material
from .mesh import TetMesh, build_box_mesh, load_mesh, mesh_from_dict

REFERENCE_ROBOTS = ("diamond", "finger")
_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class RobotModel:
    name: str
    mesh: TetMesh
    material: Material
    fixed_dofs: np.ndarray  # (n, 3) bool
    cables: tuple
    effectors: tuple
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    young: np.ndarray | None = None  # per-element override
    scenario: dict = field(default_factory=dict)

    def __post_init__(self):
        fixed = np.asarray(self.fixed_dofs, dtype=bool).reshape(self.mesh.n_nodes, 3)
        object.__setattr__(self, "fixed_dofs", fixed)
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float).reshape(3))
        rest = self.mesh.rest_nodes
        object.__setattr__(self, "cables", tuple(c.bind(rest) for c in self.cables))
        object.__setattr__(self, "effectors", tuple(self.effectors))
        for e in self.effectors:
            if max(e.nodes) >= self.mesh.n_nodes:
                raise ConfigError(f"effector node {max(e.nodes)} out of range")
        if self.young is not None and len(self.young) != self.mesh.n_tets:
            raise ConfigError("per-element Young modulus has the wrong length")

    def young_per_element(self) -> np.ndarray:
        if self.young is not None:
            return np.asarray(self.young, dtype=float)
        return np.full(self.mesh.n_tets, self.material.young_modulus)

    def poisson_per_element(self) -> np.ndarray:
        return np.full(self.mesh.n_tets, self.material.poisson_ratio)

    def constraint_set(self, goals=None) -> ConstraintSet:
        cs = ConstraintSet(self.cables, self.effectors)
        return cs if goals is None else cs.with_goals(goals)

    @property
    def height(self) -> float:
        lo, hi = self.mesh.bounds()
        return float(hi[2] - lo[2])

    def mirrored(self, axis: int, plane: float) -> "RobotModel":
        """Rigid reflection across ``x[axis] = plane``; node numbering is kept."""
        mesh = self.mesh.mirrored(axis, plane)

        def reflect(p):
            p = np.array(p, dtype=float)
            p[axis] = 2.0 * plane - p[axis]
            return p

        cables = tuple(
            replace(c, pull_anchor=None if c.pull_anchor is None else tuple(reflect(c.pull_anchor)))
            for c in self.cables
        )
        effectors = tuple(replace(e, goal=reflect(e.goal)) for e in self.effectors)
        gravity = self.gravity.copy()
        gravity[axis] = -gravity[axis]
        return replace(
            self,
            name=f"{self.name}-mirror",
            mesh=mesh,
            cables=cables,
            effectors=effectors,
            gravity=gravity,
        )


# ------------------------------------------------------------------------- config

def _schema() -> dict:
    return json.loads(resources.files("compliant").joinpath("schemas/robot.schema.json").read_text())


def _resolve_points(mesh: TetMesh, points) -> list[int]:
    return [mesh.find_node(p) for p in points]


def robot_from_config(cfg: dict, base_dir: Path | None = None) -> RobotModel:
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"robot config invalid at {where}: {exc.message}") from exc

    mesh_cfg = cfg["mesh"]
    try:
        if "box" in mesh_cfg:
            mesh = build_box_mesh(mesh_cfg["box"]["dims"], mesh_cfg["box"]["res"])
        elif "file" in mesh_cfg:
            path = Path(mesh_cfg["file"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            mesh = load_mesh(path)
        else:
            mesh = mesh_from_dict(mesh_cfg)
    except MeshError as exc:
        raise ConfigError(f"mesh: {exc}") from exc

    mat = cfg["material"]
    try:
        material = Material(mat["young_modulus"], mat["poisson_ratio"], mat.get("density", 0.0))
    except ValueError as exc:
        raise ConfigError(f"material: {exc}") from exc
    gravity = np.asarray(mat.get("gravity", [0.0, 0.0, 0.0]), dtype=float)

    young = None
    if cfg.get("regions"):
        young = np.full(mesh.n_tets, material.young_modulus)
        centroids = mesh.rest_nodes[mesh.tets].mean(axis=1)
        for reg in cfg["regions"]:
            lo, hi = np.asarray(reg["box_min"]), np.asarray(reg["box_max"])
            inside = np.all((centroids >= lo) & (centroids <= hi), axis=1)
            young[inside] = reg["young_modulus"]

    fixed = np.zeros((mesh.n_nodes, 3), dtype=bool)
    for sel in cfg["fixed"]:
        nodes = mesh.nodes_in_box(sel["box_min"], sel["box_max"])
        if len(nodes) == 0:
            raise ConfigError(f"fixed selector {sel} matches no node")
        for ax in sel.get("dofs", "xyz"):
            fixed[nodes, _AXES[ax]] = True

    cables = []
    for k, c in enumerate(cfg.get("cables", [])):
        try:
            via = c["via_nodes"] if "via_nodes" in c else _resolve_points(mesh, c["via_points"])
            cables.append(
                CableActuator(
                    via_nodes=via,
                    lambda_bounds=tuple(c.get("lambda_bounds", [0.0, 1e6])),
                    delta_bounds=tuple(c.get("delta_bounds", [-1e6, 1e6])),
                    pull_anchor=c.get("pull_anchor"),
                ).bind(mesh.rest_nodes)
            )
        except (ValueError, MeshError) as exc:
            raise ConfigError(f"cable {k}: {exc}") from exc

    effectors = []
    for k, e in enumerate(cfg.get("effectors", [])):
        goal = e.get("goal", [0.0, 0.0, 0.0])
        try:
            if "node" in e:
                if not 0 <= e["node"] < mesh.n_nodes:
                    raise ValueError(f"node index {e['node']} out of range")
                effectors.append(Effector.at_node(e["node"], goal))
            elif "point" in e:
                effectors.append(Effector.at_node(mesh.find_node(e["point"]), goal))
            else:
                effectors.append(Effector.in_tet(e["tet_nodes"], e["barycentric"], goal))
        except (ValueError, MeshError) as exc:
            raise ConfigError(f"effector {k}: {exc}") from exc

    return RobotModel(
        name=cfg.get("name", "robot"),
        mesh=mesh,
        material=material,
        fixed_dofs=fixed,
        cables=tuple(cables),
        effectors=tuple(effectors),
        gravity=gravity,
        young=young,
        scenario=cfg.get("scenario", {}),
    )


def reference_config(name: str) -> dict:
    if name not in REFERENCE_ROBOTS:
        raise ConfigError(f"unknown reference robot {name!r}; choose from {REFERENCE_ROBOTS}")
    return json.loads(resources.files("compliant").joinpath(f"robots/{name}.json").read_text())


def load_robot(spec: str) -> RobotModel:
    """Load a robot from a config path, or by reference-robot name."""
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        try:
            cfg = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"robot config {spec} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{spec}: not valid JSON ({exc})") from exc
        return robot_from_config(cfg, path.parent)
    return robot_from_config(reference_config(spec))
