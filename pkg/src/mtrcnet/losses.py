"""Tool, phase and correlation losses and the combined objective.

All per-frame losses are averaged over frames and clips. Tool and correlation
losses are summed over tools within a frame.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import torch

from .errors import ConfigurationError, DimensionError, LabelError, NumericError

DEFAULT_LAMBDAS = (1.0, 0.5, 5e-4)
LOG_COLUMNS = ("step", "tool_loss", "phase_loss", "correlation_loss", "weight_decay", "total")


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def tool_loss(tool_probs, tool_labels):
    """Multi-label logistic loss, summed over tools, averaged over frames."""
    p = _t(tool_probs)
    y = _t(tool_labels, p).to(p.dtype)
    _same_shape(p, y, "tool_loss")
    per_frame = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).sum(dim=-1)
    return per_frame.mean()


def phase_loss(phase_probs, phase_labels):
    """Cross-entropy of the true phase, averaged over frames."""
    p = _t(phase_probs)
    y = torch.as_tensor(phase_labels, dtype=torch.long)
    if p.shape[:-1] != y.shape:
        raise DimensionError(f"phase_loss: probs {tuple(p.shape)} vs labels {tuple(y.shape)}")
    if y.numel() and (y.min() < 0 or y.max() >= p.shape[-1]):
        raise LabelError(f"phase labels must lie in [0, {p.shape[-1]}), got range "
                         f"[{int(y.min())}, {int(y.max())}]")
    picked = torch.gather(p, -1, y.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked).mean()


def bernoulli_kl(p, q):
    """KL divergence between Bernoulli(p) and Bernoulli(q), elementwise."""
    p = _t(p)
    q = _t(q, p)
    if ((p <= 0) | (p >= 1) | (q <= 0) | (q >= 1)).any():
        raise NumericError("bernoulli_kl needs probabilities strictly inside (0, 1)")
    return p * torch.log(p / q) + (1 - p) * torch.log((1 - p) / (1 - q))


def correlation_loss(tool_probs, tool_priors):
    """Symmetrised Bernoulli KL between the tool branch and the mapped prior.

    Gradients flow into both arguments.
    """
    p = _t(tool_probs)
    q = _t(tool_priors, p)
    _same_shape(p, q, "correlation_loss")
    per_tool = 0.5 * bernoulli_kl(p, q) + 0.5 * bernoulli_kl(q, p)
    return per_tool.sum(dim=-1).mean()


def categorical_kl(p, q):
    """KL(p || q) over the last axis."""
    return (p * torch.log(p / q)).sum(dim=-1)


def mutual_correlation_loss(phase_probs, phase_priors):
    """Symmetrised categorical KL used by the mutual-mapping variant."""
    return (0.5 * categorical_kl(phase_probs, phase_priors)
            + 0.5 * categorical_kl(phase_priors, phase_probs)).mean()


def squared_weights(params) -> torch.Tensor:
    """Sum of squared entries over an iterable of tensors."""
    total = None
    for w in params:
        s = (w * w).sum()
        total = s if total is None else total + s
    return total if total is not None else torch.zeros(())


@dataclass
class LossBreakdown:
    tool_loss: float
    phase_loss: float
    correlation_loss: float
    weight_decay: float
    total: float
    lambdas: tuple = DEFAULT_LAMBDAS
    # prior_tool_loss is the tool loss applied to the mapped priors (mapping pre-training)
    prior_tool_loss: float = 0.0
    active: tuple = ("tool", "phase", "corr")
    stage: str = ""
    extras: dict = field(default_factory=dict)

    def row(self, step: int) -> list:
        return [step, self.tool_loss, self.phase_loss, self.correlation_loss,
                self.weight_decay, self.total, self.stage, self.prior_tool_loss,
                "+".join(self.active)]


def check_lambdas(lambdas):
    if len(lambdas) != 3:
        raise ConfigurationError(f"expected three lambdas, got {lambdas!r}")
    if any(l < 0 for l in lambdas):
        raise ConfigurationError(f"lambdas must be non-negative, got {lambdas!r}")
    return tuple(float(l) for l in lambdas)


def total_loss(components, params=(), lambdas=DEFAULT_LAMBDAS, active=("tool", "phase", "corr"),
               stage=""):
    """Combine per-term losses into the weighted objective.

    ``components`` maps term name (``tool``, ``phase``, ``corr``, ``mutual``, ``prior_tool``)
    to a scalar tensor. ``params`` is the iterable of trainable tensors entering
    the decay term, or an already computed sum of squares. Terms missing from ``active`` are reported but excluded.

    Returns ``(total tensor, LossBreakdown)``; the tensor stays differentiable.
    """
    l1, l2, l3 = check_lambdas(lambdas)
    weights = {"tool": 1.0, "phase": l1, "corr": l2, "mutual": l2, "prior_tool": 1.0}
    if isinstance(params, (int, float)) or (isinstance(params, torch.Tensor) and params.dim() == 0):
        decay = torch.as_tensor(params, dtype=torch.float64)
    else:
        decay = squared_weights(params)
    total = l3 * decay
    for name, value in components.items():
        if name not in weights:
            raise ConfigurationError(f"unknown loss term {name!r}")
        if name in active:
            total = total + weights[name] * value

    def f(key):
        v = components.get(key, 0.0)
        return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

    bd = LossBreakdown(
        tool_loss=f("tool"),
        phase_loss=f("phase"),
        correlation_loss=f("corr") + f("mutual"),
        weight_decay=float(decay.detach()) if isinstance(decay, torch.Tensor) else float(decay),
        total=float(total.detach()) if isinstance(total, torch.Tensor) else float(total),
        lambdas=(l1, l2, l3),
        prior_tool_loss=f("prior_tool"),
        active=tuple(a for a in ("tool", "phase", "corr", "mutual", "prior_tool") if a in active),
        stage=stage,
    )
    return total, bd


def write_loss_log(path, rows):
    """Write LossBreakdown rows as CSV; ``rows`` is an iterable of (step, breakdown)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(LOG_COLUMNS) + ["stage", "prior_tool_loss", "active"])
        for step, bd in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in bd.row(step)])
