"""Multi-scale skeleton graphs: topology presets, partitions, hyper-joints, coarsening.

Every scale is a fixed linear function of the joint coordinates, so each scale
is described by a projection matrix ``(n_m, J)`` plus a neighbor structure.
``ScaleLayout`` keeps those for a topology and lets whole batches of frames be
lifted to all four scales with one matmul per scale.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_SCALES = 4
HYPER, JOINT, PART, BODY = range(NUM_SCALES)
SCALE_NAMES = ("hyper-joint", "joint", "part", "body")


class TopologyError(ValueError):
    """Raised for malformed skeleton topologies or partitions."""


@dataclass(frozen=True)
class Topology:
    joint_count: int
    edges: tuple[tuple[int, int], ...]
    root: int
    preset_name: str = "custom"

    def __post_init__(self):
        validate_tree(self.joint_count, self.edges, self.root)

    def adjacency(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.joint_count)]
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj


@dataclass(frozen=True)
class MergeMap:
    scale: int
    groups: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.groups)


@dataclass(frozen=True)
class ScaleGraph:
    scale: int
    positions: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def num_nodes(self) -> int:
        return len(self.neighbors)


@dataclass(frozen=True)
class MultiScaleFrame:
    per_scale: tuple[ScaleGraph, ScaleGraph, ScaleGraph, ScaleGraph]

    def __getitem__(self, scale: int) -> ScaleGraph:
        return self.per_scale[scale]

    @property
    def node_counts(self) -> tuple[int, ...]:
        return tuple(g.num_nodes for g in self.per_scale)


def validate_tree(joint_count: int, edges, root: int) -> None:
    if joint_count < 1:
        raise TopologyError(f"joint_count must be positive, got {joint_count}")
    if not 0 <= root < joint_count:
        raise TopologyError(f"root {root} outside [0, {joint_count})")
    seen = set()
    for a, b in edges:
        if not (0 <= a < joint_count and 0 <= b < joint_count):
            raise TopologyError(f"edge ({a}, {b}) has index outside [0, {joint_count})")
        if a == b:
            raise TopologyError(f"self-loop edge at joint {a}")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise TopologyError(f"duplicate edge {key}")
        seen.add(key)
    if len(edges) != joint_count - 1:
        raise TopologyError(
            f"not a tree: {joint_count} joints need {joint_count - 1} edges, got {len(edges)}")
    reached = _reachable(joint_count, edges, root, set(range(joint_count)))
    if len(reached) != joint_count:
        missing = sorted(set(range(joint_count)) - reached)
        raise TopologyError(f"not connected: joints {missing} unreachable from root {root}")


def _reachable(n: int, edges, start: int, allowed: set[int]) -> set[int]:
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v in allowed and v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


# Presets. Joint orders follow the Kinect v1 (20), Kinect v2 (25) and a
# 14-joint pose-estimator layout; rest poses are in meters, y up, root at origin.

_KINECT20_EDGES = (
    (0, 1), (1, 2), (2, 3),
    (2, 4), (4, 5), (5, 6), (6, 7),
    (2, 8), (8, 9), (9, 10), (10, 11),
    (0, 12), (12, 13), (13, 14), (14, 15),
    (0, 16), (16, 17), (17, 18), (18, 19),
)
_KINECT20_PARTS10 = (
    (0, 1, 2), (3,),
    (4, 5), (6, 7), (8, 9), (10, 11),
    (12, 13), (14, 15), (16, 17), (18, 19),
)
_KINECT20_PARTS5 = ((0, 1, 2, 3), (4, 5, 6, 7), (8, 9, 10, 11), (12, 13, 14, 15), (16, 17, 18, 19))
_KINECT20_REST = (
    (0.0, 0.0, 0.0), (0.0, 0.25, 0.0), (0.0, 0.5, 0.0), (0.0, 0.68, 0.0),
    (-0.18, 0.45, 0.0), (-0.2, 0.18, 0.0), (-0.21, -0.06, 0.0), (-0.21, -0.14, 0.0),
    (0.18, 0.45, 0.0), (0.2, 0.18, 0.0), (0.21, -0.06, 0.0), (0.21, -0.14, 0.0),
    (-0.1, -0.05, 0.0), (-0.11, -0.48, 0.0), (-0.12, -0.88, 0.0), (-0.12, -0.92, 0.1),
    (0.1, -0.05, 0.0), (0.11, -0.48, 0.0), (0.12, -0.88, 0.0), (0.12, -0.92, 0.1),
)

_KINECT25_EDGES = (
    (0, 1), (1, 20), (20, 2), (2, 3),
    (20, 4), (4, 5), (5, 6), (6, 7), (7, 21), (6, 22),
    (20, 8), (8, 9), (9, 10), (10, 11), (11, 23), (10, 24),
    (0, 12), (12, 13), (13, 14), (14, 15),
    (0, 16), (16, 17), (17, 18), (18, 19),
)
_KINECT25_PARTS10 = (
    (0, 1, 20), (2, 3),
    (4, 5), (6, 7, 21, 22), (8, 9), (10, 11, 23, 24),
    (12, 13), (14, 15), (16, 17), (18, 19),
)
_KINECT25_PARTS5 = (
    (0, 1, 20, 2, 3), (4, 5, 6, 7, 21, 22), (8, 9, 10, 11, 23, 24),
    (12, 13, 14, 15), (16, 17, 18, 19),
)
_KINECT25_REST = (
    (0.0, 0.0, 0.0), (0.0, 0.25, 0.0), (0.0, 0.58, 0.0), (0.0, 0.7, 0.0),
    (-0.18, 0.47, 0.0), (-0.2, 0.2, 0.0), (-0.21, -0.04, 0.0), (-0.21, -0.12, 0.0),
    (0.18, 0.47, 0.0), (0.2, 0.2, 0.0), (0.21, -0.04, 0.0), (0.21, -0.12, 0.0),
    (-0.1, -0.05, 0.0), (-0.11, -0.48, 0.0), (-0.12, -0.88, 0.0), (-0.12, -0.92, 0.1),
    (0.1, -0.05, 0.0), (0.11, -0.48, 0.0), (0.12, -0.88, 0.0), (0.12, -0.92, 0.1),
    (0.0, 0.5, 0.0), (-0.21, -0.18, 0.0), (-0.17, -0.08, 0.03),
    (0.21, -0.18, 0.0), (0.17, -0.08, 0.03),
)

_CASIA14_EDGES = (
    (0, 1),
    (1, 2), (2, 3), (3, 4),
    (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13),
)
_CASIA14_PARTS10 = (
    (0,), (1,),
    (2, 3), (4,), (5, 6), (7,),
    (8, 9), (10,), (11, 12), (13,),
)
_CASIA14_PARTS5 = ((0, 1), (2, 3, 4), (5, 6, 7), (8, 9, 10), (11, 12, 13))
_CASIA14_REST = (
    (0.0, 0.2, 0.0), (0.0, 0.0, 0.0),
    (0.18, -0.03, 0.0), (0.2, -0.3, 0.0), (0.21, -0.55, 0.0),
    (-0.18, -0.03, 0.0), (-0.2, -0.3, 0.0), (-0.21, -0.55, 0.0),
    (0.1, -0.55, 0.0), (0.11, -0.98, 0.0), (0.12, -1.38, 0.0),
    (-0.1, -0.55, 0.0), (-0.11, -0.98, 0.0), (-0.12, -1.38, 0.0),
)

PRESETS = {
    "kinect20": dict(joint_count=20, edges=_KINECT20_EDGES, root=0,
                     parts10=_KINECT20_PARTS10, parts5=_KINECT20_PARTS5, rest=_KINECT20_REST),
    "kinect25": dict(joint_count=25, edges=_KINECT25_EDGES, root=0,
                     parts10=_KINECT25_PARTS10, parts5=_KINECT25_PARTS5, rest=_KINECT25_REST),
    "casia14": dict(joint_count=14, edges=_CASIA14_EDGES, root=1,
                    parts10=_CASIA14_PARTS10, parts5=_CASIA14_PARTS5, rest=_CASIA14_REST),
}


def build_topology(preset: str) -> Topology:
    """Return the tree topology for a named preset."""
    try:
        spec = PRESETS[preset]
    except KeyError:
        raise TopologyError(
            f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}") from None
    return Topology(spec["joint_count"], spec["edges"], spec["root"], preset)


def rest_pose(preset: str) -> np.ndarray:
    return np.array(PRESETS[preset]["rest"], dtype=np.float64)


def _make_map(topology: Topology, scale: int, groups, expected: int | None) -> MergeMap:
    groups = tuple(tuple(int(j) for j in g) for g in groups)
    if expected is not None and len(groups) != expected:
        raise TopologyError(f"scale {scale} map needs {expected} groups, got {len(groups)}")
    flat = [j for g in groups for j in g]
    if any(len(g) == 0 for g in groups):
        raise TopologyError(f"scale {scale} map has an empty group")
    if sorted(flat) != list(range(topology.joint_count)):
        raise TopologyError(f"scale {scale} groups do not partition joints 0..{topology.joint_count - 1}")
    for g in groups:
        if len(_reachable(topology.joint_count, topology.edges, g[0], set(g))) != len(g):
            raise TopologyError(f"scale {scale} group {list(g)} is not connected in the topology")
    return MergeMap(scale, groups)


def build_merge_maps(topology: Topology, parts10=None, parts5=None) -> tuple[MergeMap, MergeMap]:
    """Partition maps for the part (10 groups) and body (5 groups) scales.

    Presets ship their own tables. Custom topologies must pass ``parts10`` and
    ``parts5`` explicitly; their group counts are then free.
    """
    if parts10 is None or parts5 is None:
        if topology.preset_name not in PRESETS:
            raise TopologyError("merge maps required for a custom topology")
        spec = PRESETS[topology.preset_name]
        return (_make_map(topology, PART, spec["parts10"], 10),
                _make_map(topology, BODY, spec["parts5"], 5))
    return _make_map(topology, PART, parts10, None), _make_map(topology, BODY, parts5, None)


def _check_frame(frame, topology: Topology) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (topology.joint_count, 3):
        raise ValueError(f"frame shape {frame.shape} does not match ({topology.joint_count}, 3)")
    if not np.all(np.isfinite(frame)):
        raise ValueError("frame has non-finite coordinates")
    return frame


def _neighbors_from_edges(n: int, edges) -> tuple[tuple[int, ...], ...]:
    nbrs = [{i} for i in range(n)]
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    return tuple(tuple(sorted(s)) for s in nbrs)


def _hyper_structure(topology: Topology):
    J = topology.joint_count
    proj = np.zeros((2 * J - 1, J))
    proj[:J, :J] = np.eye(J)
    edges = []
    for e, (a, b) in enumerate(topology.edges):
        mid = J + e
        proj[mid, a] = proj[mid, b] = 0.5
        edges += [(a, mid), (mid, b)]
    return proj, tuple(edges)


def _coarse_structure(topology: Topology, merge: MergeMap):
    J = topology.joint_count
    owner = np.empty(J, dtype=int)
    proj = np.zeros((len(merge), J))
    for g, group in enumerate(merge.groups):
        owner[list(group)] = g
        proj[g, list(group)] = 1.0 / len(group)
    edges = sorted({(min(owner[a], owner[b]), max(owner[a], owner[b]))
                    for a, b in topology.edges if owner[a] != owner[b]})
    return proj, tuple((int(a), int(b)) for a, b in edges)


def interpolate_hyper_joints(frame, topology: Topology) -> ScaleGraph:
    """Joint graph plus one midpoint node per bone, wired to both bone ends."""
    frame = _check_frame(frame, topology)
    proj, edges = _hyper_structure(topology)
    return ScaleGraph(HYPER, proj @ frame, _neighbors_from_edges(len(proj), edges), edges)


def coarsen(frame, merge: MergeMap, topology: Topology) -> ScaleGraph:
    """Merge joint groups into nodes at the group centroid."""
    frame = _check_frame(frame, topology)
    proj, edges = _coarse_structure(topology, merge)
    return ScaleGraph(merge.scale, proj @ frame, _neighbors_from_edges(len(proj), edges), edges)


@dataclass(frozen=True)
class SkeletonSpec:
    """Topology together with its partition maps."""

    topology: Topology
    parts10: MergeMap
    parts5: MergeMap

    @classmethod
    def from_preset(cls, preset: str) -> "SkeletonSpec":
        topo = build_topology(preset)
        return cls(topo, *build_merge_maps(topo))

    @classmethod
    def from_dict(cls, data: dict) -> "SkeletonSpec":
        try:
            topo = Topology(int(data["joint_count"]), tuple(tuple(e) for e in data["edges"]),
                            int(data["root"]), data.get("preset_name", "custom"))
            return cls(topo, *build_merge_maps(topo, data["parts10"], data["parts5"]))
        except KeyError as exc:
            raise TopologyError(f"topology file missing key {exc}") from None

    @classmethod
    def load(cls, path) -> "SkeletonSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def resolve(cls, name_or_path: str) -> "SkeletonSpec":
        if name_or_path in PRESETS:
            return cls.from_preset(name_or_path)
        if Path(name_or_path).is_file():
            return cls.load(name_or_path)
        raise TopologyError(f"unknown preset {name_or_path!r} and no such topology file")

    def to_dict(self) -> dict:
        t = self.topology
        return {
            "joint_count": t.joint_count,
            "edges": [list(e) for e in t.edges],
            "root": t.root,
            "preset_name": t.preset_name,
            "parts10": [list(g) for g in self.parts10.groups],
            "parts5": [list(g) for g in self.parts5.groups],
        }

    @property
    def joint_count(self) -> int:
        return self.topology.joint_count


@dataclass(frozen=True)
class ScaleLayout:
    """Per-scale projection matrices and neighbor masks for one skeleton spec."""

    spec: SkeletonSpec
    projections: tuple[np.ndarray, ...] = field(repr=False)
    edges: tuple[tuple[tuple[int, int], ...], ...] = field(repr=False)

    @classmethod
    def from_spec(cls, spec: SkeletonSpec) -> "ScaleLayout":
        topo = spec.topology
        hyper = _hyper_structure(topo)
        joint = (np.eye(topo.joint_count), tuple(topo.edges))
        part = _coarse_structure(topo, spec.parts10)
        body = _coarse_structure(topo, spec.parts5)
        parts = (hyper, joint, part, body)
        return cls(spec, tuple(p for p, _ in parts), tuple(e for _, e in parts))

    @property
    def node_counts(self) -> tuple[int, ...]:
        return tuple(p.shape[0] for p in self.projections)

    def neighbors(self, scale: int) -> tuple[tuple[int, ...], ...]:
        return _neighbors_from_edges(self.node_counts[scale], self.edges[scale])

    def neighbor_mask(self, scale: int) -> np.ndarray:
        n = self.node_counts[scale]
        mask = np.eye(n, dtype=bool)
        for a, b in self.edges[scale]:
            mask[a, b] = mask[b, a] = True
        return mask

    def lift(self, frames: np.ndarray) -> list[np.ndarray]:
        """Positions ``(..., J, 3)`` -> list of ``(..., n_m, 3)`` for all four scales."""
        frames = np.asarray(frames, dtype=np.float64)
        return [np.einsum("nj,...jd->...nd", p, frames) for p in self.projections]


def center_frames(frames: np.ndarray, root: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    return frames - frames[..., root:root + 1, :]


def build_multiscale(frames, spec: SkeletonSpec, normalize: bool = True) -> list[MultiScaleFrame]:
    """One MultiScaleFrame per input frame of shape ``(f, J, 3)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0:
        return []
    if frames.ndim != 3 or frames.shape[1:] != (spec.joint_count, 3):
        raise ValueError(
            f"sequence shape {frames.shape} does not match topology with {spec.joint_count} joints")
    if normalize:
        frames = center_frames(frames, spec.topology.root)
    layout = ScaleLayout.from_spec(spec)
    out = []
    for frame in frames:
        _check_frame(frame, spec.topology)
        graphs = tuple(
            ScaleGraph(m, layout.projections[m] @ frame, layout.neighbors(m), layout.edges[m])
            for m in range(NUM_SCALES))
        out.append(MultiScaleFrame(graphs))
    return out
