"""Skeleton sequence files, dataset manifests, splits and synthetic gait data.

Sequence files are UTF-8 text with one frame per line holding ``3 J`` decimal
numbers (``x y z`` per joint in topology order) separated by single spaces.
Manifests are JSON::

    {"preset": "kinect20", "normalize": true,
     "sequences": [{"path": "id00_seq00.txt", "id": 0, "view": "front", "split": "train"}]}

``preset`` may also be an inline topology object (see ``SkeletonSpec.from_dict``).
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import PRESETS, SkeletonSpec, center_frames, rest_pose

SPLITS = ("train", "test")
SPLIT_POLICIES = ("tags", "leave-one-out", "leave-one-per-view")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonSequence:
    frames: np.ndarray = field(repr=False)
    identity: int
    view: str | None = None
    source: str = "synthetic"
    split: str | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[-1] != 3 or frames.shape[0] < 1:
            raise DataError(f"{self.source}: frames must have shape (f>=1, J, 3), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DataError(f"{self.source}: non-finite coordinates")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def joint_count(self) -> int:
        return self.frames.shape[1]


def format_frame(frame: np.ndarray) -> str:
    return " ".join(f"{v:.9g}" for v in np.asarray(frame).ravel())


def write_sequence(seq: SkeletonSequence, path) -> None:
    text = "".join(format_frame(fr) + "\n" for fr in seq.frames)
    Path(path).write_text(text, encoding="utf-8")


def parse_sequence(path, joint_count: int, identity: int = 0, view: str | None = None,
                   split: str | None = None) -> SkeletonSequence:
    """Read a sequence file; errors name the offending line."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    expected = 3 * joint_count
    rows = []
    for lineno, line in enumerate(lines, 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != expected:
            raise DataError(f"{path}:{lineno}: expected {expected} values, found {len(tokens)}")
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            bad = next(t for t in tokens if not _is_float(t))
            raise DataError(f"{path}:{lineno}: non-numeric token {bad!r}") from None
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"{path}:{lineno}: non-finite value")
        rows.append(values)
    if not rows:
        raise DataError(f"{path}: empty sequence file")
    frames = np.array(rows, dtype=np.float64).reshape(len(rows), joint_count, 3)
    return SkeletonSequence(frames, identity, view, str(path), split)


def _is_float(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def chunk(seq: SkeletonSequence, length: int) -> list[SkeletonSequence]:
    """Non-overlapping windows of ``length`` frames; the remainder is dropped."""
    count = seq.num_frames // length
    if count == 1 and seq.num_frames == length:
        return [seq]
    return [replace(seq, frames=seq.frames[i * length:(i + 1) * length],
                    source=f"{seq.source}#{i}") for i in range(count)]


def normalize(seq: SkeletonSequence, root: int) -> SkeletonSequence:
    """Translate every frame so the root joint sits at the origin."""
    return replace(seq, frames=center_frames(seq.frames, root))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    identity: int
    view: str | None = None
    split: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    skeleton: str | dict
    entries: tuple[ManifestEntry, ...]
    normalize: bool = True
    root_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        for e in self.entries:
            if e.split is not None and e.split not in SPLITS:
                raise DataError(f"{e.path}: split must be one of {SPLITS}, got {e.split!r}")
        tagged = [e.split is not None for e in self.entries]
        if any(tagged) and not all(tagged):
            raise DataError("split tags must be given for every sequence or for none")
        if all(tagged) and self.entries:
            train_ids = {e.identity for e in self.entries if e.split == "train"}
            unseen = sorted({e.identity for e in self.entries if e.split == "test"} - train_ids)
            if unseen:
                raise DataError(f"test identities {unseen} have no training sequences")

    def spec(self) -> SkeletonSpec:
        if isinstance(self.skeleton, dict):
            return SkeletonSpec.from_dict(self.skeleton)
        return SkeletonSpec.resolve(self.skeleton)

    def to_dict(self) -> dict:
        return {
            "preset": self.skeleton,
            "normalize": self.normalize,
            "sequences": [{"path": e.path, "id": e.identity, "view": e.view, "split": e.split}
                          for e in self.entries],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"{path}: cannot read manifest ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        try:
            entries = tuple(ManifestEntry(s["path"], int(s["id"]), s.get("view"), s.get("split"))
                            for s in data["sequences"])
            return cls(data["preset"], entries, bool(data.get("normalize", True)), path.parent)
        except KeyError as exc:
            raise DataError(f"{path}: manifest missing key {exc}") from None

    def load_sequences(self, frames: int | None = None) -> list[SkeletonSequence]:
        """Parse every entry, chunking into ``frames``-long windows when given."""
        joint_count = self.spec().joint_count
        out = []
        for e in self.entries:
            seq = parse_sequence(self.root_dir / e.path, joint_count, e.identity, e.view, e.split)
            # manifest-relative source keeps derived artifacts independent of the dataset location
            seq = replace(seq, source=e.path)
            out.extend(chunk(seq, frames) if frames else [seq])
        return out


def split_dataset(sequences, policy: str = "tags", seed: int = 0
                  ) -> tuple[list[SkeletonSequence], list[SkeletonSequence]]:
    """Train/test split; deterministic for a given seed.

    ``tags`` uses each sequence's split tag. ``leave-one-out`` holds out one
    random sequence per identity. ``leave-one-per-view`` holds out one random
    sequence per (identity, view).
    """
    sequences = list(sequences)
    if policy == "tags":
        if any(s.split not in SPLITS for s in sequences):
            raise DataError("tags policy needs a train/test tag on every sequence")
        train = [s for s in sequences if s.split == "train"]
        test = [s for s in sequences if s.split == "test"]
    elif policy in ("leave-one-out", "leave-one-per-view"):
        rng = np.random.default_rng(seed)
        groups: dict = defaultdict(list)
        for i, s in enumerate(sequences):
            key = s.identity if policy == "leave-one-out" else (s.identity, s.view)
            groups[key].append(i)
        held = set()
        for key in sorted(groups, key=str):
            members = groups[key]
            if len(members) < 2 and policy == "leave-one-out":
                raise DataError(f"identity {key} has a single sequence; cannot leave one out")
            held.add(members[int(rng.integers(len(members)))])
        train = [s for i, s in enumerate(sequences) if i not in held]
        test = [s for i, s in enumerate(sequences) if i in held]
    else:
        raise DataError(f"unknown split policy {policy!r}; expected one of {SPLIT_POLICIES}")
    unseen = sorted({s.identity for s in test} - {s.identity for s in train})
    if unseen:
        raise DataError(f"test identities {unseen} have no training sequences")
    return train, test


# Synthetic gait ---------------------------------------------------------------

@dataclass(frozen=True)
class GaitParams:
    identity_seed: int
    limb_lengths: np.ndarray = field(repr=False)
    frequency: float = 1.0
    phases: np.ndarray = field(default=None, repr=False)
    amplitudes: np.ndarray = field(default=None, repr=False)
    noise: float = 0.005

    def __post_init__(self):
        if np.any(np.asarray(self.limb_lengths) <= 0):
            raise DataError("limb lengths must be positive")
        if not self.frequency > 0:
            raise DataError("gait frequency must be positive")


def _parents(spec: SkeletonSpec) -> list[int]:
    topo = spec.topology
    adj = topo.adjacency()
    parent = [-1] * topo.joint_count
    order = [topo.root]
    seen = {topo.root}
    for u in order:
        for v in sorted(adj[u]):
            if v not in seen:
                seen.add(v)
                parent[v] = u
                order.append(v)
    return parent


def _bone_order(parent: list[int], root: int) -> list[int]:
    order, frontier = [], [root]
    while frontier:
        u = frontier.pop(0)
        kids = [j for j, p in enumerate(parent) if p == u]
        order += kids
        frontier += kids
    return order


def draw_gait_params(spec: SkeletonSpec, identity: int, master_seed: int,
                     noise: float = 0.005) -> GaitParams:
    """Identity-specific limb lengths, cadence, swing amplitudes and phases."""
    rest = rest_pose(spec.topology.preset_name)
    parent = _parents(spec)
    base = np.array([np.linalg.norm(rest[j] - rest[p]) if p >= 0 else 0.0
                     for j, p in enumerate(parent)])
    rng = np.random.default_rng([master_seed, identity])
    stature = rng.uniform(0.85, 1.15)
    lengths = base * stature * rng.uniform(0.85, 1.15, size=len(parent))
    lengths[np.array(parent) < 0] = 1.0  # root has no bone
    amplitudes = rng.uniform(0.25, 0.6, size=len(parent))
    phases = rng.uniform(0.0, 2 * np.pi, size=len(parent))
    return GaitParams(identity, lengths, float(rng.uniform(0.8, 1.25)), phases, amplitudes, noise)


def render_gait(spec: SkeletonSpec, params: GaitParams, times: np.ndarray,
                rng: np.random.Generator | None = None, yaw: float = 0.0,
                speed: float = 1.2) -> np.ndarray:
    """Frames ``(len(times), J, 3)`` of a walking skeleton.

    Each bone keeps its identity-specific length and swings about the lateral
    axis by ``amplitude * sin(2 pi freq t + phase)`` around its parent joint.
    """
    preset = spec.topology.preset_name
    if preset not in PRESETS:
        raise DataError("synthetic generation needs a preset topology with a rest pose")
    rest = rest_pose(preset)
    parent = _parents(spec)
    root = spec.topology.root
    order = _bone_order(parent, root)
    times = np.asarray(times, dtype=np.float64)
    out = np.zeros((len(times), spec.joint_count, 3))
    out[:, root, 2] = speed * times
    for j in order:
        p = parent[j]
        direction = rest[j] - rest[p]
        direction = direction / max(np.linalg.norm(direction), 1e-12)
        angle = params.amplitudes[j] * np.sin(2 * np.pi * params.frequency * times + params.phases[j])
        c, s = np.cos(angle), np.sin(angle)
        # rotation about the x (lateral) axis
        rotated = np.stack([np.full_like(angle, direction[0]),
                            c * direction[1] - s * direction[2],
                            s * direction[1] + c * direction[2]], axis=-1)
        out[:, j] = out[:, p] + params.limb_lengths[j] * rotated
    if yaw:
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        out = out @ rot.T
    if params.noise > 0:
        if rng is None:
            raise DataError("a random generator is required when noise > 0")
        out = out + rng.normal(0.0, params.noise, size=out.shape)
    return out


def _round9(x: np.ndarray) -> np.ndarray:
    # frames in memory equal what the 9-significant-digit text format stores
    return np.array([float(f"{v:.9g}") for v in x.ravel()]).reshape(x.shape)


def generate_synthetic(identities: int, per_identity: int, frames: int, preset: str = "kinect20",
                       seed: int = 0, noise: float = 0.005, fps: float = 10.0, views: int = 1,
                       test_policy: str | None = "leave-one-out"
                       ) -> tuple[DatasetManifest, list[SkeletonSequence]]:
    """Deterministic walking-skeleton dataset.

    Returns a manifest (paths ``id{c}_seq{s}.txt``, relative) and the
    sequences in manifest order. With ``test_policy`` set and at least two
    sequences per identity the entries carry train/test tags.
    """
    if identities < 1:
        raise DataError(f"need at least one identity, got {identities}")
    if per_identity < 1 or frames < 1:
        raise DataError("sequences per identity and frames must be positive")
    spec = SkeletonSpec.from_preset(preset)
    seqs = []
    for c in range(identities):
        params = draw_gait_params(spec, c, seed, noise)
        for s in range(per_identity):
            rng = np.random.default_rng([seed, c, s])
            start = rng.uniform(0.0, 1.0 / params.frequency)
            view = s % views
            frames_ = render_gait(spec, params, start + np.arange(frames) / fps, rng,
                                  yaw=np.deg2rad(30.0 * view))
            seqs.append(SkeletonSequence(_round9(frames_), c, f"view{view}",
                                         f"id{c:02d}_seq{s:02d}.txt"))
    if test_policy and per_identity >= 2:
        train, _ = split_dataset(seqs, test_policy, seed)
        train_ids = {id(s) for s in train}
        seqs = [replace(s, split="train" if id(s) in train_ids else "test") for s in seqs]
    manifest = DatasetManifest(preset, tuple(ManifestEntry(s.source, s.identity, s.view, s.split)
                                             for s in seqs), True)
    return manifest, seqs


def write_dataset(manifest: DatasetManifest, sequences, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for entry, seq in zip(manifest.entries, sequences):
        write_sequence(seq, out / entry.path)
    manifest.save(out / "manifest.json")
    return out / "manifest.json"
