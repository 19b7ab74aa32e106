"""Momentum SGD with per-partition learning rates and staged training plans.

A plan is a list of stages. Each stage freezes some partitions and switches on
some loss terms:

``tool``        tool-branch logistic loss
``phase``       phase cross-entropy
``corr``        correlation loss between tool branch and mapped prior
``prior_tool``  tool logistic loss applied to the mapped prior (mapping pre-training)
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from . import losses
from .data import ClipBatch, VideoRecord, augment, center_crop, clip_starts
from .errors import ConfigurationError, TrainingError
from .model import PARTITIONS, ArchConfig, MTRCNet, init_parameters
from .weights import model_arrays, write_container

log = logging.getLogger(__name__)

STRATEGIES = ("three_step", "TS1", "TS2", "single_tool", "single_phase", "mtrcnet_no_cl")
LOSS_TERMS = ("tool", "phase", "corr", "prior_tool")


@dataclass
class OptimizerState:
    lr_backbone: float = 5e-5
    lr_branches: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-3
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr_backbone <= 0 or self.lr_branches <= 0:
            raise ConfigurationError("learning rates must be positive")

    def lr_for(self, partition: str) -> float:
        return self.lr_backbone if partition == "backbone" else self.lr_branches


@dataclass(frozen=True)
class PlateauConfig:
    patience: int = 3
    min_delta: float = 1e-3
    factor: float = 10.0


@dataclass(frozen=True)
class Stage:
    name: str
    epochs: int
    frozen: frozenset = frozenset()
    active: frozenset = frozenset({"tool", "phase"})

    def __post_init__(self):
        object.__setattr__(self, "frozen", frozenset(self.frozen))
        object.__setattr__(self, "active", frozenset(self.active))
        if not self.frozen <= set(PARTITIONS):
            raise ConfigurationError(f"unknown partitions in freeze set: {sorted(self.frozen - set(PARTITIONS))}")
        if not self.active <= set(LOSS_TERMS):
            raise ConfigurationError(f"unknown loss terms: {sorted(self.active - set(LOSS_TERMS))}")
        if not self.active:
            raise ConfigurationError(f"stage {self.name!r} has no active loss")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")

    def to_dict(self):
        return {"name": self.name, "epochs": self.epochs,
                "frozen": sorted(self.frozen), "active": sorted(self.active)}


def build_stages(strategy: str, epochs=(6, 2, 4)) -> tuple:
    """Stage list for a named strategy.

    ``epochs`` is ``(joint, mapping, final)``. Strategies without a separate
    mapping stage train jointly for ``joint + final`` epochs so every strategy
    gets the same joint-training budget.
    """
    e1, e2, e3 = epochs
    everything = frozenset(PARTITIONS)
    if strategy == "three_step":
        return (
            Stage("step1", e1, {"mapping_cell"}, {"tool", "phase"}),
            Stage("step2", e2, everything - {"mapping_cell"}, {"prior_tool"}),
            Stage("step3", e3, (), {"tool", "phase", "corr"}),
        )
    if strategy == "TS2":
        return (
            Stage("step1", e1, {"mapping_cell"}, {"tool", "phase"}),
            Stage("step2", e2, everything - {"mapping_cell"}, {"prior_tool"}),
            Stage("step3", e3, {"mapping_cell"}, {"tool", "phase", "corr"}),
        )
    if strategy == "TS1":
        return (Stage("joint", e1 + e3, (), {"tool", "phase", "corr"}),)
    if strategy == "mtrcnet_no_cl":
        return (Stage("joint", e1 + e3, {"mapping_cell"}, {"tool", "phase"}),)
    if strategy == "single_tool":
        return (Stage("tool_only", e1 + e3, {"phase_head", "mapping_cell"}, {"tool"}),)
    if strategy == "single_phase":
        return (Stage("phase_only", e1 + e3, {"tool_head", "mapping_cell"}, {"phase"}),)
    raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


@dataclass
class TrainPlan:
    strategy: str = "three_step"
    epochs: tuple = (6, 2, 4)
    clip_len: int = 10
    stride: int = 5
    batch_size: int = 8
    seed: int = 0
    lambdas: tuple = losses.DEFAULT_LAMBDAS
    lr_backbone: float = 0.02
    lr_branches: float = 0.02
    momentum: float = 0.9
    plateau: PlateauConfig = PlateauConfig()
    augment: bool = True
    deterministic: bool = True
    stages: tuple = ()

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        self.lambdas = losses.check_lambdas(self.lambdas)
        if isinstance(self.plateau, dict):
            self.plateau = PlateauConfig(**self.plateau)
        if not self.stages:
            self.stages = build_stages(self.strategy, self.epochs)
        if self.clip_len < 1 or self.batch_size < 1 or self.stride < 1:
            raise ConfigurationError("clip_len, stride and batch_size must be positive")

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [s.to_dict() for s in self.stages]
        d["epochs"] = list(self.epochs)
        d["lambdas"] = list(self.lambdas)
        return d


# --------------------------------------------------------------------------- optimizer


def sgd_step(params: dict, grads: dict, state: OptimizerState, frozen=()):
    """One momentum-SGD update, in place.

    ``params`` and ``grads`` map partition -> name -> tensor; a missing or
    ``None`` gradient counts as zero. Frozen partitions are not touched.
    """
    with torch.no_grad():
        for part, tensors in params.items():
            if part in frozen:
                continue
            lr = state.lr_for(part)
            part_grads = grads.get(part, {})
            for name, w in tensors.items():
                g = part_grads.get(name)
                if g is None:
                    g = torch.zeros_like(w)
                if not torch.isfinite(g).all():
                    raise TrainingError(f"non-finite gradient in {part}/{name}", partition=part)
                key = f"{part}/{name}"
                v = state.velocity.get(key)
                if v is None:
                    v = torch.zeros_like(w)
                v = state.momentum * v + g + state.weight_decay * w
                state.velocity[key] = v
                w.sub_(lr * v)
    return params, state


def plateau_triggered(history, patience: int, min_delta: float) -> bool:
    """Whether the last entry of ``history`` completes a plateau.

    An epoch counts as improving when it beats the best value so far by more
    than ``min_delta``. After ``patience`` non-improving epochs in a row the
    plateau fires and the counter restarts.
    """
    if not history:
        raise ConfigurationError("plateau check needs a non-empty history")
    best = history[0]
    bad = 0
    fired = False
    for value in history[1:]:
        fired = False
        if value < best - min_delta:
            best = value
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                fired = True
                bad = 0
    return fired


def lr_on_plateau(history, state: OptimizerState, plateau: PlateauConfig = PlateauConfig()):
    """Divide both learning rates by ``plateau.factor`` when ``history`` (epoch-mean
    losses) has just completed a plateau."""
    if plateau_triggered(list(history), plateau.patience, plateau.min_delta):
        state.lr_backbone /= plateau.factor
        state.lr_branches /= plateau.factor
        log.warning("epoch loss plateaued; learning rates now %.3g / %.3g",
                    state.lr_backbone, state.lr_branches)
    return state


# --------------------------------------------------------------------------- data feeding


class ClipSampler:
    """Shuffled mini-batches of sliding-window clips drawn from whole videos."""

    def __init__(self, videos: Iterable[VideoRecord], clip_len: int, stride: int,
                 batch_size: int, crop_size: int, do_augment: bool = True):
        self.videos = list(videos)
        self.clip_len = clip_len
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.do_augment = do_augment
        self.index = [
            (vi, s)
            for vi, v in enumerate(self.videos)
            for s in clip_starts(len(v), clip_len, stride)
        ]
        if not self.index:
            raise ConfigurationError(f"no video is long enough for clip_len={clip_len}")

    def __len__(self):
        return math.ceil(len(self.index) / self.batch_size)

    def epoch(self, seed):
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self.index))
        aug_seeds = rng.integers(0, 2**63 - 1, size=len(order))
        for b in range(0, len(order), self.batch_size):
            chunk = order[b:b + self.batch_size]
            frames, tools, phases, vids, starts = [], [], [], [], []
            for k, i in zip(range(b, b + len(chunk)), chunk):
                vi, s = self.index[i]
                v = self.videos[vi]
                clip = v.frames[s:s + self.clip_len]
                if self.do_augment:
                    clip = augment(clip, int(aug_seeds[k]), self.crop_size)
                else:
                    clip = center_crop(clip, self.crop_size)
                frames.append(clip)
                tools.append(v.tool_labels[s:s + self.clip_len])
                phases.append(v.phase_labels[s:s + self.clip_len])
                vids.append(v.video_id)
                starts.append(s)
            yield ClipBatch(np.stack(frames), np.stack(tools), np.stack(phases), vids, starts)


# --------------------------------------------------------------------------- training


def set_deterministic(flag: bool = True):
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def batch_losses(model: MTRCNet, batch: ClipBatch):
    """Forward pass plus every loss term (as tensors) on one batch."""
    dtype = next(model.parameters()).dtype
    frames = torch.as_tensor(batch.frames, dtype=dtype)
    y_tool = torch.as_tensor(batch.tool_labels, dtype=dtype)
    y_phase = torch.as_tensor(batch.phase_labels, dtype=torch.long)
    pred, _ = model(frames)
    comps = {
        "tool": losses.tool_loss(pred.tool_probs, y_tool),
        "phase": losses.phase_loss(pred.phase_probs, y_phase),
        "corr": losses.correlation_loss(pred.tool_probs, pred.tool_priors),
        "prior_tool": losses.tool_loss(pred.tool_priors, y_tool),
    }
    if pred.phase_priors is not None:
        comps["mutual"] = losses.mutual_correlation_loss(pred.phase_probs, pred.phase_priors)
    return pred, comps


def trainable_params(model: MTRCNet, frozen) -> list:
    return [p for part, ps in model.partitions().items() if part not in frozen for p in ps.values()]


def stage_objective(model, batch, stage: Stage, lambdas):
    """Returns ``(data objective tensor, LossBreakdown)``.

    The objective holds only the active data terms; the decay term is applied
    by the optimizer and appears only in the breakdown.
    """
    _, comps = batch_losses(model, batch)
    active = set(stage.active)
    if "corr" in active and "mutual" in comps:
        active.add("mutual")
    with torch.no_grad():
        decay = losses.squared_weights(trainable_params(model, stage.frozen))
    _, bd = losses.total_loss(
        {k: v.detach() for k, v in comps.items()}, decay, lambdas, active, stage.name)
    objective, _ = losses.total_loss(comps, 0.0, lambdas, active, stage.name)
    return objective, bd


def train_stage(model: MTRCNet, stage: Stage, sampler: ClipSampler, opt: OptimizerState,
                lambdas=losses.DEFAULT_LAMBDAS, seed: int = 0,
                plateau: PlateauConfig = PlateauConfig(), step0: int = 0):
    """Run one stage in place. Returns ``(model, [(step, LossBreakdown), ...])``.

    On a numeric failure the parameters are rolled back to the last good step
    and the error is re-raised.
    """
    for p in model.parameters():
        p.requires_grad_(True)
    for part in stage.frozen:
        for p in getattr(model, part).parameters():
            p.requires_grad_(False)
    params = model.partitions()
    history, records, step = [], [], step0
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.train()
    try:
        for epoch in range(stage.epochs):
            epoch_losses = []
            for batch in sampler.epoch([seed, epoch]):
                model.zero_grad(set_to_none=True)
                objective, bd = stage_objective(model, batch, stage, lambdas)
                if not math.isfinite(bd.total):
                    raise TrainingError(f"non-finite loss at step {step} of stage {stage.name}")
                objective.backward()
                grads = {
                    part: {n: p.grad for n, p in ps.items()} for part, ps in params.items()
                }
                sgd_step(params, grads, opt, frozen=stage.frozen)
                records.append((step, bd))
                epoch_losses.append(bd.total)
                step += 1
                last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            history.append(float(np.mean(epoch_losses)))
            lr_on_plateau(history, opt, plateau)
            log.info("%s epoch %d: loss %.4f", stage.name, epoch, history[-1])
    except TrainingError:
        model.load_state_dict(last_good)
        raise
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    return model, records


@dataclass
class RunResult:
    model: MTRCNet
    log: list
    checkpoints: list
    manifest: dict


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, model: MTRCNet, opt: OptimizerState, meta: dict | None = None):
    """Weight container with model arrays plus ``optimizer/...`` entries."""
    arrays = model_arrays(model)
    for key, v in sorted(opt.velocity.items()):
        arrays[f"optimizer/velocity/{key}"] = v.detach().cpu().numpy()
    arrays["optimizer/lr_backbone"] = np.asarray(opt.lr_backbone)
    arrays["optimizer/lr_branches"] = np.asarray(opt.lr_branches)
    arrays["optimizer/momentum"] = np.asarray(opt.momentum)
    arrays["optimizer/weight_decay"] = np.asarray(opt.weight_decay)
    m = {"arch": model.config.to_dict()}
    m.update(meta or {})
    write_container(path, arrays, m)


def run_plan(plan: TrainPlan, dataset, out_dir=None, arch: Optional[ArchConfig] = None,
             model: Optional[MTRCNet] = None) -> RunResult:
    """Train from scratch (or from ``model``) through every stage of ``plan``.

    ``dataset`` is ``(split, videos)`` as returned by ``load_dataset``. When
    ``out_dir`` is given, writes ``stage{k}.ckpt``, ``loss_log.csv`` and
    ``manifest.json`` there.
    """
    if plan.strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {plan.strategy!r}")
    split, videos = dataset
    arch = arch or (model.config if model is not None else ArchConfig())
    if arch.clip_len != plan.clip_len:
        arch = replace(arch, clip_len=plan.clip_len)
    set_deterministic(plan.deterministic)
    torch.manual_seed(plan.seed)
    if model is None:
        model = init_parameters(arch, seed=plan.seed)
    sampler = ClipSampler(
        [videos[v] for v in split.train_videos], plan.clip_len, plan.stride,
        plan.batch_size, arch.frame_size, plan.augment)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "plan": plan.to_dict(),
        "arch": arch.to_dict(),
        "train_videos": list(split.train_videos),
        "test_videos": list(split.test_videos),
    }
    manifest["config_hash"] = config_hash(manifest)
    records, checkpoints, step = [], [], 0
    for k, stage in enumerate(plan.stages, start=1):
        opt = OptimizerState(plan.lr_backbone, plan.lr_branches, plan.momentum,
                             weight_decay=2 * plan.lambdas[2])
        model, rec = train_stage(model, stage, sampler, opt, plan.lambdas,
                                 seed=plan.seed * 1000 + k, plateau=plan.plateau, step0=step)
        records.extend(rec)
        step += len(rec)
        if out is not None:
            path = out / f"stage{k}.ckpt"
            save_checkpoint(path, model, opt, {"stage": stage.to_dict(), "strategy": plan.strategy})
            checkpoints.append(path)
    if out is not None:
        losses.write_loss_log(out / "loss_log.csv", records)
        manifest["checkpoints"] = [p.name for p in checkpoints]
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return RunResult(model, records, checkpoints, manifest)
