"""Downstream person Re-ID on frozen encoded states.

Frame-level features ``H_t`` concatenate the per-scale LSTM states; a
one-hidden-layer classifier is trained with cross-entropy on frames, and a
sequence is scored by averaging its frames' softmax probabilities.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, CheckpointError, read_container, write_container
from .data import SkeletonSequence
from .graph import SkeletonSpec
from .msr import glorot_
from .trainer import model_from_checkpoint

PROBE_HIDDEN = 256
PROBE_LR = 1e-3
PROBE_EPOCHS = 100
PROBE_BATCH = 64


class ProbeError(ValueError):
    pass


def extract_features(sequences, checkpoint: Checkpoint, normalize: bool = True) -> np.ndarray:
    """Full-length per-frame features ``(N, f, S * D_h)``; parameters stay fixed."""
    spec = SkeletonSpec.from_dict(checkpoint.skeleton)
    frames = [s.frames if isinstance(s, SkeletonSequence) else np.asarray(s, dtype=np.float64)
              for s in sequences]
    for fr in frames:
        if fr.shape[1:] != (spec.joint_count, 3):
            raise ProbeError(
                f"sequence with shape {fr.shape} does not match the checkpoint's "
                f"{spec.joint_count}-joint topology")
    model = model_from_checkpoint(checkpoint)
    model.eval()
    out = []
    for fr in frames:
        states = model.encoded_states(fr[None], normalize)
        h = torch.cat([states[m] for m in model.scales], dim=-1)[0]
        out.append(h.to(torch.float64).numpy())
    if len({o.shape for o in out}) > 1:
        raise ProbeError("sequences of different lengths; extract them separately")
    return np.stack(out) if out else np.zeros((0, 0, 0))


class ProbeModel(nn.Module):
    def __init__(self, in_dim: int, classes, hidden: int = PROBE_HIDDEN):
        super().__init__()
        self.classes = tuple(int(c) for c in classes)
        self.in_dim = in_dim
        self.hidden = hidden
        self.net = nn.Sequential(nn.Linear(in_dim, hidden, dtype=torch.float64), nn.ReLU(),
                                 nn.Linear(hidden, len(self.classes), dtype=torch.float64))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def class_index(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        unseen = sorted({int(l) for l in labels} - set(lookup))
        if unseen:
            raise ProbeError(f"identities {unseen} were not seen when training the probe")
        return np.array([lookup[int(l)] for l in labels], dtype=np.int64)


def train_probe(features: np.ndarray, labels, epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR,
                seed: int = 0, batch_size: int = PROBE_BATCH, classes=None,
                hidden: int = PROBE_HIDDEN) -> ProbeModel:
    """Fit the classifier on every frame of every training sequence.

    ``features``: ``(N, f, D)``; ``labels``: identity per sequence. Classes
    default to the sorted training identities.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 3 or len(features) != len(labels) or len(labels) == 0:
        raise ProbeError(f"features {features.shape} and {len(labels)} labels do not line up")
    classes = sorted({int(l) for l in labels}) if classes is None else list(classes)
    probe = ProbeModel(features.shape[-1], classes, hidden)
    target = torch.from_numpy(probe.class_index(labels))
    gen = torch.Generator().manual_seed(int(seed))
    for p in probe.parameters():
        if p.dim() >= 2:
            glorot_(p, gen)
        else:
            with torch.no_grad():
                p.zero_()
    f = features.shape[1]
    x = torch.from_numpy(features.reshape(-1, features.shape[-1]))
    y = target.repeat_interleave(f)
    opt = torch.optim.Adam(probe.parameters(), lr=lr, foreach=False)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(len(x)))
        for lo in range(0, len(x), batch_size):
            idx = order[lo:lo + batch_size]
            opt.zero_grad(set_to_none=True)
            F.cross_entropy(probe(x[idx]), y[idx]).backward()
            opt.step()
    return probe


@torch.no_grad()
def frame_probabilities(features: np.ndarray, probe: ProbeModel) -> np.ndarray:
    x = torch.from_numpy(np.asarray(features, dtype=np.float64))
    return torch.softmax(probe(x), dim=-1).numpy()


def predict_sequence(features: np.ndarray, probe: ProbeModel) -> np.ndarray:
    """Mean of per-frame softmax probabilities for one ``(f, D)`` sequence."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ProbeError("predict_sequence needs at least one frame of shape (f, D)")
    return frame_probabilities(features, probe).mean(axis=0)


@dataclass(frozen=True)
class CmcReport:
    cmc: np.ndarray
    rank1: float
    nauc: float
    num_sequences: int

    @property
    def num_classes(self) -> int:
        return len(self.cmc)

    def to_dict(self) -> dict:
        return {"rank1": self.rank1, "nauc": self.nauc, "cmc": [float(c) for c in self.cmc],
                "num_classes": self.num_classes, "num_sequences": self.num_sequences}

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "match_rate"])
            for k, v in enumerate(self.cmc, 1):
                writer.writerow([k, repr(float(v))])


def rank_classes(scores: np.ndarray) -> np.ndarray:
    """Class indices by descending score; ties go to the lower index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.shape[-1]), -scores))


def cmc_report(scores: np.ndarray, truth) -> CmcReport:
    """CMC, Rank-1 and nAUC (mean CMC over all ranks, times 100).

    scores: ``(N, C)`` per-sequence class scores; truth: class index per row.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(truth) or len(truth) == 0:
        raise ProbeError(f"scores {scores.shape} and {len(truth)} labels do not line up")
    n, c = scores.shape
    if truth.min() < 0 or truth.max() >= c:
        raise ProbeError(f"true class outside [0, {c})")
    positions = np.array([int(np.nonzero(rank_classes(s) == t)[0][0])
                          for s, t in zip(scores, truth)])
    hits = np.bincount(positions, minlength=c)
    cmc = np.cumsum(hits) / n
    return CmcReport(cmc, float(cmc[0]), float(100.0 * cmc.sum() / c), n)


def evaluate(features: np.ndarray, labels, probe: ProbeModel) -> CmcReport:
    """Sequence-level evaluation of a trained probe on ``(N, f, D)`` features."""
    truth = probe.class_index(labels)
    scores = np.stack([predict_sequence(f, probe) for f in np.asarray(features)])
    return cmc_report(scores, truth)


# Persistence ----------------------------------------------------------------

def save_probe(probe: ProbeModel, path) -> None:
    meta = {"kind": "probe", "classes": list(probe.classes), "in_dim": probe.in_dim,
            "hidden": probe.hidden}
    tensors = {k: v.detach().numpy() for k, v in probe.state_dict().items()}
    write_container(path, meta, tensors)


def load_probe(path) -> ProbeModel:
    meta, tensors = read_container(path)
    if meta.get("kind") != "probe":
        raise CheckpointError(f"{path}: expected a probe, found {meta.get('kind')!r}")
    probe = ProbeModel(meta["in_dim"], meta["classes"], meta["hidden"])
    state = probe.state_dict()
    for k in state:
        if k not in tensors or tensors[k].shape != tuple(state[k].shape):
            raise CheckpointError(f"{path}: tensor {k} missing or with wrong dimensions")
        state[k] = torch.from_numpy(tensors[k])
    probe.load_state_dict(state)
    return probe


@dataclass
class FeatureSet:
    features: np.ndarray
    identities: list[int]
    sources: list[str]
    splits: list[str | None]

    def subset(self, split: str) -> "FeatureSet":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return FeatureSet(self.features[keep], [self.identities[i] for i in keep],
                          [self.sources[i] for i in keep], [self.splits[i] for i in keep])


def save_features(fs: FeatureSet, path) -> None:
    meta = {"kind": "features", "identities": fs.identities, "sources": fs.sources,
            "splits": fs.splits}
    write_container(path, meta, {"features": fs.features})


def load_features(path) -> FeatureSet:
    meta, tensors = read_container(path)
    if meta.get("kind") != "features":
        raise CheckpointError(f"{path}: expected features, found {meta.get('kind')!r}")
    return FeatureSet(tensors["features"], meta["identities"], meta["sources"], meta["splits"])
