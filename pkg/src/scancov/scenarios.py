"""Scenario files and the built-in desk-scale corpus."""
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import shapes
from .geometry import TriangleMesh, load_mesh, save_mesh
from .mapping import OCC_OTHER, VoxelWorld, surface_samples
from .viewpoints import SensorModel

CORPUS = ("wall", "cube", "sphere", "torus", "l_building", "two_tower")


class ScenarioError(ValueError):
    pass


@dataclass
class SpawnEvent:
    t: float
    mesh: object


@dataclass
class Scenario:
    name: str
    target: object
    obstacles: list = field(default_factory=list)
    start: np.ndarray = field(default_factory=lambda: np.zeros(5))
    lidar_range: float = 6.0
    lidar_rays: int = 600
    camera: SensorModel = field(default_factory=SensorModel)
    v_max: float = 1.0
    omega_max: float = np.deg2rad(20.0)
    t_max: float = 1500.0
    seed: int = 0
    spawn_events: list = field(default_factory=list)
    evolving: dict = field(default_factory=dict)
    resolution: float = 0.2
    drone_radius: float = 0.3

    def bounds(self, margin=4.5, top=3.0):
        lo, hi = self.target.bounds
        for m in self.obstacles + [e.mesh for e in self.spawn_events]:
            lo = np.minimum(lo, m.bounds[0])
            hi = np.maximum(hi, m.bounds[1])
        p = self.start[:3]
        lo = np.minimum(lo, p) - margin
        hi = np.maximum(hi, p) + np.array([margin, margin, top])
        lo[2] = 0.0
        return lo, hi

    def make_world(self):
        """Planner map: unknown everywhere except a known ground slab."""
        lo, hi = self.bounds()
        # one voxel layer below z = 0 holds the ground
        lo[2] = -self.resolution
        w = VoxelWorld.from_bounds(lo, hi, self.resolution)
        ground = np.zeros(w.dims, bool)
        ground[:, :, 0] = True
        w.set_occupied(ground, OCC_OTHER)
        return w


def _mesh_from(entry, base):
    if isinstance(entry, str):
        return load_mesh(entry if os.path.isabs(entry) else os.path.join(base, entry))
    kind = entry.get("shape")
    args = {k: v for k, v in entry.items() if k != "shape"}
    if kind == "box":
        return shapes.box(**args)
    if kind == "icosphere":
        return shapes.icosphere(**args)
    if kind == "torus":
        return shapes.torus(**args)
    if kind == "l_prism":
        return shapes.l_prism(**args)
    if kind == "merge":
        return shapes.merge(*[_mesh_from(m, base) for m in entry["parts"]])
    raise ScenarioError(f"unknown shape {kind!r}")


def load_scenario(path):
    """Read a scenario JSON file; mesh paths resolve relative to it."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ScenarioError(str(e)) from e
    return scenario_from_dict(d, os.path.dirname(os.path.abspath(path)))


def scenario_from_dict(d, base="."):
    try:
        target = _mesh_from(d["target_mesh"], base)
        obstacles = [_mesh_from(m, base) for m in d.get("obstacle_meshes", [])]
        s = d.get("start", {})
        start = np.array([s.get("x", 0.0), s.get("y", 0.0), s.get("z", 1.0),
                          s.get("pitch", 0.0), s.get("yaw", 0.0)], dtype=float)
        lid = d.get("lidar", {})
        cam = d.get("camera", {})
        camera = SensorModel(np.deg2rad(cam.get("hfov_deg", 90.0)), np.deg2rad(cam.get("vfov_deg", 75.0)),
                             cam.get("range", 6.0), np.deg2rad(cam.get("max_incidence_deg", 75.0)))
        lim = d.get("limits", {})
        spawns = [SpawnEvent(float(e["t"]), _mesh_from(e["mesh"], base)) for e in d.get("spawn_events", [])]
        sc = Scenario(d.get("name", "scenario"), target, obstacles, start, float(lid.get("range", 6.0)),
                      int(lid.get("rays", 600)), camera, float(lim.get("v_max", 1.0)),
                      np.deg2rad(float(lim.get("omega_max_deg", 20.0))), float(d.get("t_max", 1500.0)),
                      int(d.get("seed", 0)), spawns, dict(d.get("evolving", {})),
                      float(d.get("resolution", 0.2)), float(d.get("drone_radius", 0.3)))
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioError(f"bad scenario: {e}") from e
    if not target.is_watertight:
        raise ScenarioError("target mesh must be watertight")
    sc.target = TriangleMesh(target.vertices, target.faces, ground_faces(target))
    gt = GroundTruth(sc)
    inside = any(m.is_watertight and m.contains(sc.start[:3])[0] for m in [sc.target] + sc.obstacles)
    if inside or gt.clearance(sc.start[:3]) < sc.drone_radius:
        raise ScenarioError("start pose is in collision")
    return sc


def ground_faces(mesh, tol=1e-6):
    """Downward faces lying on z = 0; the camera can never see them."""
    fz = mesh.vertices[mesh.faces][:, :, 2].max(axis=1)
    return (fz < tol) & (mesh.face_normals[:, 2] < -0.99)


# -- built-in corpus ---------------------------------------------------------

def _spec(name):
    evolving = {"sigma": 0.5, "smooth": 3, "reveal_lag": 8.0}
    base = {"lidar": {"range": 6.0, "rays": 600},
            "camera": {"hfov_deg": 90.0, "vfov_deg": 75.0, "range": 6.0, "max_incidence_deg": 75.0},
            "limits": {"v_max": 1.0, "omega_max_deg": 20.0}, "t_max": 1500.0, "seed": 0,
            "obstacle_meshes": [], "spawn_events": [], "evolving": evolving, "name": name}
    if name == "wall":
        base["target_mesh"] = {"shape": "box", "size": [4.0, 0.5, 2.5], "center": [0.0, 0.0, 1.25], "cell": 0.5}
        base["start"] = {"x": 0.0, "y": -4.0, "z": 1.2, "pitch": 0.0, "yaw": np.pi / 2}
    elif name == "cube":
        base["target_mesh"] = {"shape": "box", "size": [2.0, 2.0, 2.0], "center": [0.0, 0.0, 1.0], "cell": 0.5}
        base["start"] = {"x": -4.0, "y": 0.0, "z": 1.2, "pitch": 0.0, "yaw": 0.0}
    elif name == "sphere":
        base["target_mesh"] = {"shape": "icosphere", "radius": 1.0, "subdivisions": 2, "center": [0.0, 0.0, 2.6]}
        base["start"] = {"x": -4.0, "y": 0.0, "z": 1.5, "pitch": 0.0, "yaw": 0.0}
    elif name == "torus":
        base["target_mesh"] = {"shape": "torus", "major": 1.4, "minor": 0.45, "n_major": 24, "n_minor": 10,
                               "center": [0.0, 0.0, 2.4]}
        base["start"] = {"x": -4.0, "y": 0.0, "z": 1.5, "pitch": 0.0, "yaw": 0.0}
    elif name == "l_building":
        base["target_mesh"] = {"shape": "l_prism", "arm": 4.0, "width": 1.5, "height": 3.0, "cell": 0.5,
                               "origin": [-2.0, -2.0, 0.0]}
        base["start"] = {"x": 3.5, "y": 3.5, "z": 1.2, "pitch": 0.0, "yaw": -2.356}
    elif name == "two_tower":
        towers = [{"shape": "box", "size": [1.5, 1.5, 3.5], "center": [x, 0.0, 1.75], "cell": 0.5}
                  for x in (-1.75, 1.75)]
        base["target_mesh"] = {"shape": "merge", "parts": towers}
        base["obstacle_meshes"] = [{"shape": "box", "size": [0.5, 0.5, 3.0], "center": [0.0, -2.5, 1.5],
                                    "cell": 0.5}]
        base["start"] = {"x": 0.0, "y": -4.5, "z": 1.2, "pitch": 0.0, "yaw": np.pi / 2}
    else:
        raise ScenarioError(f"unknown corpus scenario {name!r}")
    return base


def builtin_scenario(name, **overrides):
    d = _spec(name)
    d.update(overrides)
    return scenario_from_dict(d)


def write_corpus(out_dir, names=CORPUS):
    """Write each corpus scenario as an OBJ target plus a JSON file."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name in names:
        d = _spec(name)
        tgt = _mesh_from(d["target_mesh"], out_dir)
        save_mesh(tgt, os.path.join(out_dir, f"{name}.obj"))
        d["target_mesh"] = f"{name}.obj"
        for k, m in enumerate(d["obstacle_meshes"]):
            fn = f"{name}_obstacle{k}.obj"
            save_mesh(_mesh_from(m, out_dir), os.path.join(out_dir, fn))
            d["obstacle_meshes"][k] = fn
        p = os.path.join(out_dir, f"{name}.json")
        with open(p, "w") as fh:
            json.dump(d, fh, indent=1)
        paths.append(p)
    return paths


# -- ground truth ------------------------------------------------------------

class GroundTruth:
    """Target plus obstacles as one mesh for ray casting, and a dense surface
    sample index for clearance queries. The ground plane is z = 0."""

    def __init__(self, scenario, sample_spacing=0.05):
        self.target = scenario.target
        self.spacing = sample_spacing
        self.obstacles = list(scenario.obstacles)
        self._rebuild()
        # vertices that only touch faces lying on the ground are not observable
        ground_face = ground_faces(self.target)
        touched = np.zeros(self.target.n_vertices, bool)
        touched[self.target.faces[~ground_face].ravel()] = True
        self.observable = touched
        self.ground_face = ground_face

    def _rebuild(self):
        from scipy.spatial import cKDTree
        self.merged = shapes.merge(self.target, *self.obstacles) if self.obstacles else self.target
        self.n_target_faces = self.target.n_faces
        self.tree = cKDTree(surface_samples(self.merged, self.spacing))

    def add_obstacle(self, mesh):
        self.obstacles.append(mesh)
        self._rebuild()

    def clearance(self, points):
        """Distance to the nearest surface sample or the ground (upper bound on
        the true distance by at most the sample spacing)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        d, _ = self.tree.query(p)
        d = np.minimum(d, p[:, 2])
        return float(d[0]) if np.ndim(points) == 1 else d
