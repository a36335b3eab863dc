"""Coverage planning for mesh inspection: safe viewpoints, consistent
global tours and viewpoint-constrained trajectories."""
from .geometry import TriangleMesh, chamfer_directed, chamfer_undirected, load_mesh, save_mesh
from .path import CoveragePath, PathNode
from .routing import PlannerConfig, PlannerMemory, plan_global
from .trajectory import PenaltyWeights, optimize_local

__version__ = "0.1.0"
