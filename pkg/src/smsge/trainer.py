"""Self-supervised pretraining, checkpoint conversion and gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError
from .config import TrainConfig
from .data import SkeletonSequence
from .graph import SkeletonSpec
from .model import SMSGEModel

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


def param_group(name: str) -> str:
    """``encoders.lstm.0.weight_ih_l0`` -> ``encoders.lstm.0``."""
    return ".".join(name.split(".")[:3])


def stack_frames(dataset, frames: int | None = None) -> np.ndarray:
    arrays = [s.frames if isinstance(s, SkeletonSequence) else np.asarray(s) for s in dataset]
    if not arrays:
        raise TrainingError("dataset is empty")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise TrainingError(f"sequences have differing shapes {sorted(shapes)}")
    out = np.stack(arrays).astype(np.float64)
    if frames is not None and out.shape[1] != frames:
        raise TrainingError(f"sequences have {out.shape[1]} frames, config expects {frames}")
    return out


def model_from_checkpoint(ckpt: Checkpoint) -> SMSGEModel:
    model = SMSGEModel(SkeletonSpec.from_dict(ckpt.skeleton), ckpt.config)
    state = model.state_dict()
    if set(state) != set(ckpt.params):
        raise CheckpointError(
            f"checkpoint tensors {sorted(set(ckpt.params) ^ set(state))} do not match the model")
    for name, value in ckpt.params.items():
        if tuple(state[name].shape) != value.shape:
            raise CheckpointError(
                f"dimension header mismatch for {name}: file {value.shape}, "
                f"model {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(value).to(model.dtype)
    model.load_state_dict(state)
    return model


def params_of(model: SMSGEModel) -> dict[str, np.ndarray]:
    return {k: v.detach().to(torch.float64).numpy().copy() for k, v in model.state_dict().items()}


def _make_optimizer(model: SMSGEModel, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS,
                            foreach=False)


def _optimizer_tensors(model, opt) -> tuple[dict[str, np.ndarray], int]:
    out, step = {}, 0
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        out[f"exp_avg.{name}"] = st["exp_avg"].detach().to(torch.float64).numpy().copy()
        out[f"exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().to(torch.float64).numpy().copy()
        step = int(st["step"])
    return out, step


def _restore_optimizer(model, opt, tensors: dict[str, np.ndarray], step: int) -> None:
    for name, p in model.named_parameters():
        key = f"exp_avg.{name}"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(tensors[key].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(tensors[f"exp_avg_sq.{name}"].copy()).to(p.dtype),
        }


def _nonfinite_groups(model) -> list[str]:
    bad = []
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all() or (p.grad is not None and not torch.isfinite(p.grad).all()):
            group = param_group(name)
            if group not in bad:
                bad.append(group)
    return bad


def pretrain(dataset, config: TrainConfig, spec: SkeletonSpec | None = None,
             resume: Checkpoint | None = None,
             on_epoch: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Train the MSR objective with Adam and return the final checkpoint.

    ``dataset`` holds sequences of exactly ``config.frames`` frames. With
    ``resume`` the run continues from the checkpoint's epoch, optimizer and
    RNG state up to ``config.epochs``.
    """
    config.validate()
    if resume is not None:
        spec = SkeletonSpec.from_dict(resume.skeleton)
    if spec is None:
        raise TrainingError("a skeleton spec is required")
    frames = stack_frames(dataset, config.frames)
    torch.set_num_threads(config.threads)

    if resume is not None:
        model = model_from_checkpoint(replace(resume, config=config))
    else:
        model = SMSGEModel(spec, config)
        model.reset_parameters(config.seed)
    opt = _make_optimizer(model, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    start = 0
    if resume is not None:
        _restore_optimizer(model, opt, resume.optimizer, resume.optimizer_step)
        rng.bit_generator.state = resume.rng_state
        history = list(resume.loss_history)
        start = resume.epoch

    positions = model.lift(frames)
    n = frames.shape[0]
    params = list(model.parameters())
    for epoch in range(start, config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[lo:lo + config.batch_size])
            batch = {m: p[idx] for m, p in positions.items()}
            groups = model.sample_groups(len(idx), rng)
            opt.zero_grad(set_to_none=True)
            loss = model.batch_loss(batch, groups)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}; offending parameter groups: "
                    f"{_nonfinite_groups(model) or 'none (inputs or activations)'}")
            loss.backward()
            bad = _nonfinite_groups(model)
            if bad:
                raise TrainingError(f"non-finite gradients at epoch {epoch + 1} in {bad}")
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip, foreach=False)
            opt.step()
            epoch_loss += loss.item()
        history.append(epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_loss)

    opt_tensors, step = _optimizer_tensors(model, opt)
    return Checkpoint(params_of(model), config, spec.to_dict(), config.epochs,
                      _jsonable(rng.bit_generator.state), history, opt_tensors, step)


def _jsonable(state: dict) -> dict:
    return {k: _jsonable(v) if isinstance(v, dict) else (int(v) if isinstance(v, np.integer) else v)
            for k, v in state.items()}


def evaluate_loss(model: SMSGEModel, dataset, groups: Sequence[np.ndarray] | None = None) -> float:
    """Loss of a model on a dataset for fixed index groups (default: full sequences)."""
    frames = stack_frames(dataset)
    if groups is None:
        groups = [np.tile(np.arange(frames.shape[1]), (frames.shape[0], 1))]
    with torch.no_grad():
        return float(model.batch_loss(model.lift(frames), groups))


# Gradient checking --------------------------------------------------------------

@dataclass
class ToyInstance:
    model: SMSGEModel
    positions: dict[int, torch.Tensor]
    groups: list[np.ndarray]

    def loss(self) -> torch.Tensor:
        return self.model.batch_loss(self.positions, self.groups)


TOY_SKELETON = {
    "joint_count": 4,
    "edges": [[0, 1], [1, 2], [2, 3]],
    "root": 1,
    "preset_name": "toy4",
    "parts10": [[0], [1], [2, 3]],
    "parts5": [[0, 1], [2, 3]],
}


def toy_instance(seed: int = 0, config: TrainConfig | None = None, sequences: int = 2
                 ) -> ToyInstance:
    """4-joint path skeleton, 2 frames, small widths, double precision.

    The loss covers the sampled length-1 subsequences and the full 2-frame
    sequence so the recurrent path is exercised too.
    """
    config = config or TrainConfig(frames=2, heads=2, feature_dim=4, hidden_dim=5,
                                   head_hidden=6, seed=seed)
    config = replace(config, dtype="float64")
    spec = SkeletonSpec.from_dict(TOY_SKELETON)
    model = SMSGEModel(spec, config)
    model.reset_parameters(seed)
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(sequences, config.frames, 4, 3))
    groups = model.sample_groups(sequences, rng)
    if model.plan.subsequences:
        groups.append(np.tile(np.arange(config.frames), (sequences, 1)))
    return ToyInstance(model, model.lift(frames), groups)


def grad_check(instance: ToyInstance, groups: Iterable[str] | None = None, epsilon: float = 1e-6,
               gradient_hook: Callable[[str, torch.Tensor], torch.Tensor] | None = None,
               max_coords: int | None = None) -> dict[str, float]:
    """Compare autograd against central differences, per parameter group.

    Returns ``{group: relative error}`` where the error is
    ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)``
    over the group's coordinates (0 when both vanish). ``gradient_hook`` may
    rewrite analytic gradients, which is how the harness is self-tested.
    """
    model = instance.model
    if model.dtype != torch.float64:
        raise ValueError("gradient checks need double precision")
    named = dict(model.named_parameters())
    wanted = set(groups) if groups is not None else None
    model.zero_grad(set_to_none=True)
    instance.loss().backward()

    analytic: dict[str, list[np.ndarray]] = {}
    numeric: dict[str, list[np.ndarray]] = {}
    rng = np.random.default_rng(0)
    for name, p in named.items():
        group = param_group(name)
        if wanted is not None and group not in wanted and name not in wanted:
            continue
        grad = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if gradient_hook is not None:
            grad = gradient_hook(name, grad)
        flat = p.data.view(-1)
        coords = np.arange(flat.numel())
        if max_coords is not None and len(coords) > max_coords:
            coords = np.sort(rng.choice(len(coords), max_coords, replace=False))
        num = np.empty(len(coords))
        with torch.no_grad():
            for i, c in enumerate(coords):
                orig = flat[c].item()
                flat[c] = orig + epsilon
                up = float(instance.loss())
                flat[c] = orig - epsilon
                down = float(instance.loss())
                flat[c] = orig
                num[i] = (up - down) / (2 * epsilon)
        analytic.setdefault(group, []).append(grad.view(-1).numpy()[coords])
        numeric.setdefault(group, []).append(num)

    errors = {}
    for group in analytic:
        a = np.concatenate(analytic[group])
        n = np.concatenate(numeric[group])
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
            raise TrainingError(f"non-finite gradient comparison in {group}")
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        errors[group] = 0.0 if scale < 1e-12 else float(np.linalg.norm(a - n) / scale)
    if not errors:
        raise ValueError(f"no parameters matched {sorted(wanted or [])}")
    return errors


def max_error(errors: dict[str, float]) -> float:
    return max(errors.values()) if errors else math.nan
