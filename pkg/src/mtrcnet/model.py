"""Two-branch recurrent convolutional network with a phase-to-tool mapping cell.

The network has four parameter partitions:

* ``backbone``     shared convolutional encoder, one feature vector per frame
* ``tool_head``    frame-wise linear layer + sigmoid (tool presence)
* ``phase_head``   LSTM + linear layer + softmax (surgical phase)
* ``mapping_cell`` linear map from LSTM outputs to tool-presence priors

Everything is causal: the output at step t only sees frames up to t.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, NumericError

EPS = 1e-7
PARTITIONS = ("backbone", "tool_head", "phase_head", "mapping_cell")
MAPPING_SOURCES = ("phase_features", "phase_labels")


@dataclass(frozen=True)
class ArchConfig:
    frame_size: int = 32
    in_channels: int = 3
    encoder_channels: tuple = (16, 32)
    feature_dim: int = 48
    phase_feature_dim: int = 32
    num_tools: int = 7
    num_phases: int = 7
    clip_len: int = 10
    norm_groups: int = 4
    # "group" (GroupNorm) or "none"; both keep frames independent
    norm: str = "none"
    # label-space ablation maps phase probabilities instead of LSTM outputs
    mapping_source: str = "phase_features"
    # adds a tool->phase mapping and its consistency term
    mutual_mapping: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        self.validate()

    def validate(self):
        dims = {
            "frame_size": self.frame_size,
            "in_channels": self.in_channels,
            "feature_dim": self.feature_dim,
            "phase_feature_dim": self.phase_feature_dim,
            "num_tools": self.num_tools,
            "num_phases": self.num_phases,
            "clip_len": self.clip_len,
            "norm_groups": self.norm_groups,
        }
        for name, value in dims.items():
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if not self.encoder_channels or any(c <= 0 for c in self.encoder_channels):
            raise ConfigurationError(f"encoder_channels must be positive, got {self.encoder_channels}")
        for width in self.encoder_channels + (self.feature_dim,):
            if self.norm == "group" and width % self.norm_groups:
                raise ConfigurationError(
                    f"channel width {width} is not divisible by norm_groups={self.norm_groups}"
                )
        if self.norm not in ("group", "none"):
            raise ConfigurationError(f"norm must be 'group' or 'none', got {self.norm!r}")
        if self.mapping_source not in MAPPING_SOURCES:
            raise ConfigurationError(
                f"mapping_source must be one of {MAPPING_SOURCES}, got {self.mapping_source!r}"
            )

    @property
    def mapping_in_dim(self) -> int:
        if self.mapping_source == "phase_labels":
            return self.num_phases
        return self.phase_feature_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RecurrentState:
    hidden: torch.Tensor
    cell: torch.Tensor

    @classmethod
    def zeros(cls, batch: int, dim: int, dtype=torch.float32) -> "RecurrentState":
        return cls(torch.zeros(batch, dim, dtype=dtype), torch.zeros(batch, dim, dtype=dtype))


@dataclass
class JointPrediction:
    tool_probs: torch.Tensor       # (B, T, C)
    phase_probs: torch.Tensor      # (B, T, Z)
    phase_features: torch.Tensor   # (B, T, D)
    tool_priors: torch.Tensor      # (B, T, C)
    phase_priors: Optional[torch.Tensor] = field(default=None)  # only with mutual mapping


def clamp_probs(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def _norm(cfg, ch):
    if cfg.norm == "group":
        return nn.GroupNorm(cfg.norm_groups, ch)
    return nn.Identity()


class ResidualBlock(nn.Module):
    """Strided conv block with a projected skip connection."""

    def __init__(self, in_ch, out_ch, cfg):
        super().__init__()
        bias = cfg.norm == "none"
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=bias)
        self.norm1 = _norm(cfg, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=bias)
        self.norm2 = _norm(cfg, out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=2, bias=bias)
        self.skip_norm = _norm(cfg, out_ch)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + self.skip_norm(self.skip(x)))


class Encoder(nn.Module):
    """Small residual CNN ending in global average pooling.

    No batch statistics are used, so every frame is encoded independently
    of the rest of the batch in training and evaluation alike. GroupNorm
    removes each frame's mean intensity, which discards colour cues; the
    default is therefore no normalisation.
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        widths = cfg.encoder_channels
        self.stem = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1, bias=cfg.norm == "none")
        self.stem_norm = _norm(cfg, widths[0])
        chans = list(widths) + [cfg.feature_dim]
        self.blocks = nn.ModuleList(
            ResidualBlock(a, b, cfg) for a, b in zip(chans[:-1], chans[1:])
        )

    def forward(self, x):
        x = F.relu(self.stem_norm(self.stem(x)))
        for block in self.blocks:
            x = block(x)
        return x.mean(dim=(2, 3))


class PhaseHead(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.lstm = nn.LSTM(cfg.feature_dim, cfg.phase_feature_dim, num_layers=1, batch_first=True)
        self.classifier = nn.Linear(cfg.phase_feature_dim, cfg.num_phases)


class MappingCell(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.to_tools = nn.Linear(cfg.mapping_in_dim, cfg.num_tools)
        if cfg.mutual_mapping:
            self.to_phases = nn.Linear(cfg.num_tools, cfg.num_phases)


def encode_frames(frames: torch.Tensor, backbone: Encoder) -> torch.Tensor:
    """Encode (B, T, C, H, W) frames into (B, T, feature_dim) features."""
    if frames.dim() != 5:
        raise DimensionError(f"frames must be (batch, N_f, C, H, W), got shape {tuple(frames.shape)}")
    b, t = frames.shape[:2]
    g = backbone(frames.reshape(b * t, *frames.shape[2:]))
    return g.reshape(b, t, -1)


def tool_head_forward(g: torch.Tensor, tool_head: nn.Linear) -> torch.Tensor:
    if not torch.isfinite(g).all():
        raise NumericError("non-finite features reached the tool head")
    return clamp_probs(torch.sigmoid(tool_head(g)))


def phase_head_forward(g: torch.Tensor, state0: Optional[RecurrentState], phase_head: PhaseHead):
    """Run the LSTM over the clip.

    Returns ``(phase_probs, phase_features, final_state)``. A ``None`` state
    means a zero state.
    """
    b = g.shape[0]
    dim = phase_head.lstm.hidden_size
    if state0 is None:
        state0 = RecurrentState.zeros(b, dim, dtype=g.dtype)
    if state0.hidden.shape != (b, dim) or state0.cell.shape != (b, dim):
        raise DimensionError(
            f"recurrent state shape {tuple(state0.hidden.shape)} does not match batch {b}, dim {dim}"
        )
    r, (h, c) = phase_head.lstm(g, (state0.hidden.unsqueeze(0), state0.cell.unsqueeze(0)))
    probs = clamp_probs(torch.softmax(phase_head.classifier(r), dim=-1))
    return probs, r, RecurrentState(h.squeeze(0), c.squeeze(0))


def map_phase_features(r: torch.Tensor, mapping: nn.Linear) -> torch.Tensor:
    if r.shape[-1] != mapping.in_features:
        raise DimensionError(
            f"mapping cell expects {mapping.in_features} input features, got {r.shape[-1]}"
        )
    return clamp_probs(torch.sigmoid(mapping(r)))


class MTRCNet(nn.Module):
    """Shared encoder with a tool branch, an LSTM phase branch and a mapping cell."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.config = cfg
        self.backbone = Encoder(cfg)
        self.tool_head = nn.Linear(cfg.feature_dim, cfg.num_tools)
        self.phase_head = PhaseHead(cfg)
        self.mapping_cell = MappingCell(cfg)

    def partitions(self) -> dict:
        """Trainable tensors grouped by partition, keyed by parameter name."""
        return {name: dict(getattr(self, name).named_parameters()) for name in PARTITIONS}

    def named_partition_parameters(self):
        for part, params in self.partitions().items():
            for name, p in params.items():
                yield f"{part}/{name}", p

    def forward(self, frames: torch.Tensor, state: Optional[RecurrentState] = None):
        """Returns ``(JointPrediction, final RecurrentState)``."""
        cfg = self.config
        if frames.dim() != 5 or frames.shape[2:] != (cfg.in_channels, cfg.frame_size, cfg.frame_size):
            raise DimensionError(
                f"expected frames (batch, N_f, {cfg.in_channels}, {cfg.frame_size}, {cfg.frame_size}), "
                f"got {tuple(frames.shape)}"
            )
        g = encode_frames(frames, self.backbone)
        tool_probs = tool_head_forward(g, self.tool_head)
        phase_probs, r, final = phase_head_forward(g, state, self.phase_head)
        source = phase_probs if cfg.mapping_source == "phase_labels" else r
        tool_priors = map_phase_features(source, self.mapping_cell.to_tools)
        phase_priors = None
        if cfg.mutual_mapping:
            phase_priors = clamp_probs(torch.softmax(self.mapping_cell.to_phases(tool_probs), dim=-1))
        pred = JointPrediction(tool_probs, phase_probs, r, tool_priors, phase_priors)
        return pred, final


def forward(clip, params: MTRCNet) -> JointPrediction:
    """Joint forward pass on a ClipBatch (or a raw frame tensor) from a zero state."""
    frames = getattr(clip, "frames", clip)
    frames = torch.as_tensor(frames, dtype=next(params.parameters()).dtype)
    pred, _ = params(frames)
    return pred


def _xavier_(module: nn.Module, gen: torch.Generator):
    for name, p in module.named_parameters():
        with torch.no_grad():
            if p.dim() >= 2:
                fan_in = p.shape[1] * p[0][0].numel()
                fan_out = p.shape[0] * p[0][0].numel()
                if name.startswith("lstm.weight"):
                    # one gate block at a time
                    fan_out = p.shape[0] // 4
                bound = (6.0 / (fan_in + fan_out)) ** 0.5
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def init_parameters(config: ArchConfig, seed: int = 0, backbone_weights=None) -> MTRCNet:
    """Build a model with Xavier-uniform weights and zero biases.

    ``backbone_weights`` optionally names a weight container whose ``backbone``
    arrays replace the random encoder.
    """
    if not isinstance(config, ArchConfig):
        raise ConfigurationError("config must be an ArchConfig")
    config.validate()
    model = MTRCNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    for part in PARTITIONS:
        _xavier_(getattr(model, part), gen)
    if backbone_weights is not None:
        from .weights import load_weights

        load_weights(backbone_weights, model, partitions=("backbone",))
    return model
