"""Coverage path containers shared by routing, mapping and the local planner."""
import json
from dataclasses import dataclass, field

import numpy as np

VIEWPOINT = "viewpoint"
WAYPOINT = "waypoint"


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class PathNode:
    """A 5-DoF pose ``(x, y, z, pitch, yaw)`` on a coverage path.

    Viewpoint nodes are fixed targets; waypoint nodes may be moved by the
    local optimizer.
    """
    pose: tuple
    kind: str = WAYPOINT
    vp_id: int = -1
    group: int = -1

    @property
    def position(self):
        return np.asarray(self.pose[:3], dtype=float)

    @property
    def is_viewpoint(self):
        return self.kind == VIEWPOINT

    @classmethod
    def waypoint(cls, position, pitch=0.0, yaw=0.0, group=-1):
        p = tuple(float(x) for x in position)
        if len(p) != 3:
            raise ValueError(f"waypoint position needs 3 coordinates, got {len(p)}")
        return cls(p + (float(pitch), float(yaw)), WAYPOINT, -1, group)


@dataclass
class CoveragePath:
    nodes: list = field(default_factory=list)
    cycle: int = 0
    complete: bool = False
    infeasible: bool = False
    notes: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.nodes)

    @property
    def positions(self):
        if not self.nodes:
            return np.zeros((0, 3))
        return np.array([n.pose[:3] for n in self.nodes], dtype=float)

    @property
    def length(self):
        p = self.positions
        if len(p) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())

    def viewpoint_ids(self):
        return [n.vp_id for n in self.nodes if n.is_viewpoint]

    def checksum(self):
        """Cheap content digest used to detect torn snapshots."""
        arr = np.array([n.pose for n in self.nodes], dtype=float).ravel()
        kinds = sum((i + 1) * (n.kind == VIEWPOINT) for i, n in enumerate(self.nodes))
        return (len(self.nodes), round(float(np.sum(arr * np.arange(1, arr.size + 1))), 9), kinds)

    def to_jsonl(self, fh):
        for n in self.nodes:
            rec = {"type": n.kind}
            rec.update({k: float(f"{v:.6g}") for k, v in zip(("x", "y", "z", "pitch", "yaw"), n.pose)})
            fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, fh):
        nodes = []
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            nodes.append(PathNode((d["x"], d["y"], d["z"], d["pitch"], d["yaw"]), d["type"]))
        return cls(nodes)
