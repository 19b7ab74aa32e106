"""Synthetic surgical-workflow videos, Cholec80-style annotation files and clip sampling.

A synthetic video runs through the phases in a fixed order. Tool presence is a
per-tool two-state Markov chain whose stationary presence probability in each
phase follows ``WorkflowSpec.tool_given_phase``. Frames are small procedural
images: a phase-coloured textured background with one glyph stamped per
present tool.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError

log = logging.getLogger(__name__)

PHASE_NAMES = (
    "Preparation",
    "CalotTriangleDissection",
    "ClippingCutting",
    "GallbladderDissection",
    "GallbladderPackaging",
    "CleaningCoagulation",
    "GallbladderRetraction",
)
TOOL_NAMES = ("Grasper", "Bipolar", "Hook", "Scissors", "Clipper", "Irrigator", "SpecimenBag")

# P(tool present | phase); rows are tools, columns phases. Shaped after the
# usual cholecystectomy pattern: hook in dissection, clipper/scissors in
# clipping, specimen bag at packaging and retraction, grasper everywhere.
DEFAULT_TOOL_GIVEN_PHASE = (
    (0.50, 0.70, 0.60, 0.75, 0.60, 0.55, 0.70),
    (0.05, 0.05, 0.05, 0.10, 0.00, 0.55, 0.05),
    (0.20, 0.90, 0.05, 0.85, 0.00, 0.10, 0.00),
    (0.00, 0.02, 0.35, 0.00, 0.00, 0.00, 0.00),
    (0.00, 0.02, 0.65, 0.00, 0.00, 0.05, 0.00),
    (0.00, 0.00, 0.03, 0.03, 0.00, 0.60, 0.10),
    (0.00, 0.00, 0.00, 0.00, 0.85, 0.05, 0.80),
)
DEFAULT_DURATIONS = ((8, 16), (24, 40), (10, 18), (20, 36), (8, 14), (10, 18), (6, 12))

FRAME_MAGIC = b"MTRF"
FRAME_VERSION = 1


@dataclass(frozen=True)
class WorkflowSpec:
    num_phases: int = 7
    num_tools: int = 7
    phase_order: tuple = tuple(range(7))
    duration_range: tuple = DEFAULT_DURATIONS
    tool_given_phase: tuple = DEFAULT_TOOL_GIVEN_PHASE
    tool_persistence: float = 4.0
    noise_level: float = 0.08
    frame_size: int = 36
    channels: int = 3
    glyph_size: int = 7
    # alpha of the tool glyph over the background
    glyph_contrast: float = 0.8
    # spread of background colours between consecutive phases
    phase_contrast: float = 0.12
    # per-frame additive colour shift, std
    illumination_jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "phase_order", tuple(int(z) for z in self.phase_order))
        object.__setattr__(self, "duration_range",
                           tuple((int(a), int(b)) for a, b in self.duration_range))
        object.__setattr__(self, "tool_given_phase",
                           tuple(tuple(float(v) for v in row) for row in self.tool_given_phase))
        self.validate()

    def validate(self):
        if sorted(self.phase_order) != list(range(self.num_phases)):
            raise ConfigurationError("phase_order must list every phase exactly once")
        if len(self.duration_range) != self.num_phases:
            raise ConfigurationError("duration_range needs one (min, max) per phase")
        for lo, hi in self.duration_range:
            if lo < 1 or hi < lo:
                raise ConfigurationError(f"invalid duration range ({lo}, {hi})")
        m = np.asarray(self.tool_given_phase)
        if m.shape != (self.num_tools, self.num_phases):
            raise ConfigurationError(
                f"tool_given_phase must be {self.num_tools}x{self.num_phases}, got {m.shape}")
        if (m < 0).any() or (m > 1).any():
            raise ConfigurationError("tool_given_phase entries must lie in [0, 1]")
        if self.tool_persistence < 1:
            raise ConfigurationError("tool_persistence must be >= 1")
        if self.noise_level < 0 or self.illumination_jitter < 0:
            raise ConfigurationError("noise levels must be non-negative")
        if self.glyph_size >= self.frame_size:
            raise ConfigurationError("glyph_size must be smaller than frame_size")

    @property
    def cooccurrence(self) -> np.ndarray:
        return np.asarray(self.tool_given_phase, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase_order"] = list(self.phase_order)
        d["duration_range"] = [list(r) for r in self.duration_range]
        d["tool_given_phase"] = [list(r) for r in self.tool_given_phase]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown workflow spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VideoRecord:
    video_id: str
    frames: np.ndarray        # (T, C, H, W) float32
    phase_labels: np.ndarray  # (T,) int64
    tool_labels: np.ndarray   # (T, num_tools) uint8

    def __len__(self):
        return len(self.phase_labels)


@dataclass
class DatasetSplit:
    train_videos: list
    test_videos: list

    def __post_init__(self):
        if set(self.train_videos) & set(self.test_videos):
            raise ConfigurationError("train and test videos overlap")


@dataclass
class ClipBatch:
    frames: np.ndarray        # (B, N_f, C, H, W)
    tool_labels: np.ndarray   # (B, N_f, num_tools)
    phase_labels: np.ndarray  # (B, N_f)
    video_ids: list = field(default_factory=list)
    start_frames: list = field(default_factory=list)

    def __len__(self):
        return self.frames.shape[0]

    @classmethod
    def stack(cls, items: Sequence["ClipBatch"]) -> "ClipBatch":
        return cls(
            frames=np.concatenate([c.frames for c in items]),
            tool_labels=np.concatenate([c.tool_labels for c in items]),
            phase_labels=np.concatenate([c.phase_labels for c in items]),
            video_ids=[v for c in items for v in c.video_ids],
            start_frames=[s for c in items for s in c.start_frames],
        )


@dataclass
class Annotations:
    phase_labels: np.ndarray
    tool_labels: np.ndarray
    frame_index: np.ndarray   # source frame numbers that survived alignment
    dropped: int = 0


# --------------------------------------------------------------------------- generation


def video_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def _rng(seed):
    return np.random.default_rng(seed)


def generate_workflow(spec: WorkflowSpec, seed) -> np.ndarray:
    """Phase label per frame: every phase once, in order, uniform durations."""
    rng = _rng(seed)
    parts = []
    for z in spec.phase_order:
        lo, hi = spec.duration_range[z]
        parts.append(np.full(int(rng.integers(lo, hi + 1)), z, dtype=np.int64))
    return np.concatenate(parts)


def transition_probs(presence: float, persistence: float):
    """On/off switching probabilities for a chain with the given stationary presence.

    The mean on-episode length equals ``persistence`` unless that would need an
    off->on probability above one, in which case off episodes last one frame.
    """
    if presence <= 0.0:
        return 0.0, 1.0
    if presence >= 1.0:
        return 1.0, 0.0
    p_off = 1.0 / persistence
    p_on = presence * p_off / (1.0 - presence)
    if p_on > 1.0:
        p_on = 1.0
        p_off = (1.0 - presence) / presence
    return p_on, p_off


def sample_tools(phase_seq, spec: WorkflowSpec, seed) -> np.ndarray:
    """Binary (T, num_tools) tool labels.

    The chain state is redrawn from the new phase's stationary law at each
    phase boundary, so frequencies inside a phase are unbiased.
    """
    rng = _rng(seed)
    phase_seq = np.asarray(phase_seq)
    T = len(phase_seq)
    probs = spec.cooccurrence
    out = np.zeros((T, spec.num_tools), dtype=np.uint8)
    u = rng.random((T, spec.num_tools))
    for c in range(spec.num_tools):
        state = False
        for t in range(T):
            z = phase_seq[t]
            pi = probs[c, z]
            if t == 0 or z != phase_seq[t - 1]:
                state = u[t, c] < pi
            else:
                p_on, p_off = transition_probs(pi, spec.tool_persistence)
                state = (u[t, c] >= p_off) if state else (u[t, c] < p_on)
            out[t, c] = state
    return out


def phase_palette(spec: WorkflowSpec) -> np.ndarray:
    """(num_phases, channels) background colours along a hue circle."""
    z = np.arange(spec.num_phases)[:, None]
    ch = np.arange(spec.channels)[None, :]
    angle = 2 * np.pi * z / spec.num_phases
    return 0.5 + spec.phase_contrast * np.cos(angle - 2 * np.pi * ch / max(spec.channels, 3))


def tool_palette(spec: WorkflowSpec) -> np.ndarray:
    c = np.arange(spec.num_tools)[:, None]
    ch = np.arange(spec.channels)[None, :]
    angle = 2 * np.pi * c / spec.num_tools + 0.5
    return 0.5 + 0.45 * np.sign(np.cos(angle - 2 * np.pi * ch / max(spec.channels, 3)))


def glyph_masks(size: int, count: int) -> np.ndarray:
    """``count`` distinct binary shapes of ``size`` x ``size`` pixels."""
    yy, xx = np.mgrid[:size, :size]
    mid = size // 2
    r = np.hypot(yy - mid, xx - mid)
    shapes = [
        np.ones((size, size), bool),                        # block
        (np.abs(yy - mid) <= 1) | (np.abs(xx - mid) <= 1),  # cross
        np.abs(yy - mid) <= 1,                              # horizontal bar
        np.abs(yy - xx) <= 1,                               # diagonal
        np.abs(yy + xx - (size - 1)) <= 1,                  # anti-diagonal
        (r >= mid - 1) & (r <= mid + 0.5),                  # ring
        (xx <= 1) | (yy >= size - 2),                       # L
        np.abs(xx - mid) <= 1,                              # vertical bar
    ]
    while len(shapes) < count:
        k = len(shapes)
        shapes.append(((yy + k * xx) % 3) == 0)
    return np.stack(shapes[:count])


def render_frame(phase: int, tools, spec: WorkflowSpec, seed) -> np.ndarray:
    """Procedural (C, H, W) frame in [0, 1]; deterministic given ``seed``."""
    rng = _rng(seed)
    S, C, G = spec.frame_size, spec.channels, spec.glyph_size
    bg = phase_palette(spec)[phase]
    if spec.illumination_jitter > 0:
        bg = bg + rng.normal(0.0, spec.illumination_jitter, size=C)
    yy, xx = np.mgrid[:S, :S]
    # phase-specific stripe direction, weak
    angle = np.pi * phase / spec.num_phases
    stripes = 0.04 * np.cos((np.cos(angle) * xx + np.sin(angle) * yy) * (2 * np.pi / 6))
    img = bg[:, None, None] + stripes[None]
    masks = glyph_masks(G, spec.num_tools)
    colors = tool_palette(spec)
    for c in np.flatnonzero(np.asarray(tools)):
        y0, x0 = rng.integers(0, S - G + 1, size=2)
        region = img[:, y0:y0 + G, x0:x0 + G]
        a = spec.glyph_contrast * masks[c][None]
        region[...] = (1 - a) * region + a * colors[c][:, None, None]
    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_video(spec: WorkflowSpec, seed, video_id: str = "video01") -> VideoRecord:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_phase, s_tool, s_render = ss.spawn(3)
    phases = generate_workflow(spec, s_phase)
    tools = sample_tools(phases, spec, s_tool)
    frame_seeds = s_render.spawn(len(phases))
    frames = np.stack([render_frame(z, tl, spec, fs) for z, tl, fs in zip(phases, tools, frame_seeds)])
    return VideoRecord(video_id, frames, phases, tools)


# --------------------------------------------------------------------------- file formats


def write_frames(path, frames: np.ndarray):
    frames = np.ascontiguousarray(frames, dtype="<f4")
    n, c, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<5I", FRAME_VERSION, n, c, h, w))
        fh.write(frames.tobytes())


def read_frames(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(24)
        if len(head) < 24 or head[:4] != FRAME_MAGIC:
            raise ParseError("not a frame container", path)
        version, n, c, h, w = struct.unpack("<5I", head[4:])
        if version != FRAME_VERSION:
            raise ParseError(f"unsupported frame container version {version}", path)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * c * h * w:
        raise ParseError(f"expected {n * c * h * w} floats, found {data.size}", path)
    return data.reshape(n, c, h, w).astype(np.float32)


def write_annotations(video: VideoRecord, phase_file, tool_file, fps: int = 25,
                      phase_names=PHASE_NAMES, tool_columns=TOOL_NAMES):
    """Cholec80-style TSVs: phases at ``fps``, tools at 1 fps (frame numbers at ``fps``)."""
    lines = ["Frame\tPhase"]
    for t, z in enumerate(video.phase_labels):
        name = phase_names[int(z)]
        lines.extend(f"{t * fps + k}\t{name}" for k in range(fps))
    Path(phase_file).write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["Frame\t" + "\t".join(tool_columns)]
    for t, row in enumerate(video.tool_labels):
        lines.append(f"{t * fps}\t" + "\t".join(str(int(v)) for v in row))
    Path(tool_file).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_tsv(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read annotation file: {exc}", path) from exc
    rows = [ln.rstrip("\r").split("\t") for ln in text.split("\n") if ln.strip()]
    if not rows:
        raise ParseError("empty annotation file", path)
    return rows


def load_annotations(phase_file, tool_file, fps_phase: int = 25, fps_tool: int = 1,
                     phase_names=PHASE_NAMES, tool_columns=TOOL_NAMES) -> Annotations:
    """Align phase and tool annotations at 1 fps.

    Phase rows are kept at frame numbers 0, fps_phase, 2*fps_phase, ...; each is
    matched with the tool row of the same frame number. Frames without a tool
    row are dropped and counted.
    """
    if fps_phase < 1 or fps_phase % 1:
        raise ConfigurationError(f"fps_phase must be a positive integer, got {fps_phase}")
    if fps_tool != 1:
        raise ConfigurationError("tool annotations are expected at 1 fps")
    name_to_id = {n: i for i, n in enumerate(phase_names)}

    rows = _read_tsv(phase_file)
    phase_by_frame = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) < 2:
            raise ParseError("expected 'Frame<TAB>Phase'", phase_file, lineno)
        try:
            frame = int(row[0])
        except ValueError:
            raise ParseError(f"bad frame number {row[0]!r}", phase_file, lineno) from None
        if row[1] not in name_to_id:
            raise ParseError(f"unknown phase name {row[1]!r}", phase_file, lineno)
        phase_by_frame[frame] = name_to_id[row[1]]

    rows = _read_tsv(tool_file)
    header = rows[0]
    try:
        cols = [header.index(name) for name in tool_columns]
    except ValueError:
        raise ParseError(f"tool header {header} lacks one of {list(tool_columns)}", tool_file, 1) from None
    tool_by_frame = {}
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            frame = int(row[0])
            bits = [row[i] for i in cols]
        except (ValueError, IndexError):
            raise ParseError("malformed tool row", tool_file, lineno) from None
        if any(b not in ("0", "1") for b in bits):
            raise ParseError(f"tool columns must be 0/1, got {bits}", tool_file, lineno)
        tool_by_frame[frame] = [int(b) for b in bits]

    kept, phases, tools, dropped = [], [], [], 0
    for frame in sorted(f for f in phase_by_frame if f % fps_phase == 0):
        if frame not in tool_by_frame:
            dropped += 1
            continue
        kept.append(frame)
        phases.append(phase_by_frame[frame])
        tools.append(tool_by_frame[frame])
    if dropped:
        log.warning("%s: %d frame(s) without a tool row dropped", tool_file, dropped)
    return Annotations(
        phase_labels=np.asarray(phases, dtype=np.int64),
        tool_labels=np.asarray(tools, dtype=np.uint8).reshape(len(tools), len(tool_columns)),
        frame_index=np.asarray(kept, dtype=np.int64),
        dropped=dropped,
    )


def video_paths(root, video_id):
    root = Path(root)
    return (root / f"{video_id}.frames", root / f"{video_id}-phase.txt", root / f"{video_id}-tool.txt")


def generate_dataset(spec: WorkflowSpec, num_videos: int, out_dir, seed: int = 0,
                     train_ratio: float = 0.5, annotation_fps: int = 25) -> DatasetSplit:
    """Write ``num_videos`` synthetic videos plus annotations and ``split.json``.

    The first ``round(train_ratio * num_videos)`` videos form the training set.
    """
    if num_videos < 2:
        raise ConfigurationError("need at least two videos for a train/test split")
    n_train = int(round(train_ratio * num_videos))
    if not 0 < n_train < num_videos:
        raise ConfigurationError(f"train_ratio {train_ratio} leaves an empty split")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    ids = [f"video{i + 1:02d}" for i in range(num_videos)]
    for i, vid in enumerate(ids):
        video = generate_video(spec, video_seed(seed, i), vid)
        frames_path, phase_path, tool_path = video_paths(out, vid)
        try:
            write_frames(frames_path, video.frames)
            write_annotations(video, phase_path, tool_path, fps=annotation_fps)
        except OSError as exc:
            raise OSError(f"failed writing {vid} under {out}: {exc}") from exc
    split = DatasetSplit(ids[:n_train], ids[n_train:])
    meta = {
        "train_videos": split.train_videos,
        "test_videos": split.test_videos,
        "annotation_fps": annotation_fps,
        "seed": seed,
        "spec": spec.to_dict(),
    }
    (out / "split.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return split


def load_split(root):
    meta = json.loads((Path(root) / "split.json").read_text(encoding="utf-8"))
    return DatasetSplit(meta["train_videos"], meta["test_videos"]), meta


def load_video(root, video_id, fps_phase: int = 25) -> VideoRecord:
    frames_path, phase_path, tool_path = video_paths(root, video_id)
    ann = load_annotations(phase_path, tool_path, fps_phase=fps_phase)
    frames = read_frames(frames_path)
    if ann.dropped or len(frames) != len(ann.phase_labels):
        frames = frames[ann.frame_index // fps_phase]
    return VideoRecord(video_id, frames, ann.phase_labels, ann.tool_labels)


def load_dataset(root):
    """Returns ``(split, {video_id: VideoRecord})``."""
    split, meta = load_split(root)
    fps = meta.get("annotation_fps", 25)
    videos = {v: load_video(root, v, fps) for v in split.train_videos + split.test_videos}
    return split, videos


# --------------------------------------------------------------------------- clips


def clip_starts(length: int, clip_len: int, stride: int) -> list:
    if clip_len < 1 or stride < 1:
        raise ConfigurationError("clip_len and stride must be positive")
    if clip_len > length:
        return []
    return list(range(0, length - clip_len + 1, stride))


def make_clips(video: VideoRecord, clip_len: int, stride: int) -> list:
    """Sliding windows over ``video``; the short tail is dropped."""
    starts = clip_starts(len(video), clip_len, stride)
    if not starts:
        log.warning("%s: clip_len %d exceeds video length %d", video.video_id, clip_len, len(video))
    return [
        ClipBatch(
            frames=video.frames[s:s + clip_len][None],
            tool_labels=video.tool_labels[s:s + clip_len][None],
            phase_labels=video.phase_labels[s:s + clip_len][None],
            video_ids=[video.video_id],
            start_frames=[s],
        )
        for s in starts
    ]


def augment(frames: np.ndarray, seed, crop_size: int, mirror: Optional[bool] = None) -> np.ndarray:
    """Random crop plus horizontal mirror (p = 0.5).

    ``frames`` is (C, H, W) or (T, C, H, W); one crop offset and one mirror
    decision cover every frame. Passing ``mirror`` forces the flip decision.
    """
    frames = np.asarray(frames)
    h, w = frames.shape[-2:]
    if crop_size > h or crop_size > w:
        raise ConfigurationError(f"crop size {crop_size} exceeds frame size {h}x{w}")
    rng = _rng(seed)
    y0 = int(rng.integers(0, h - crop_size + 1))
    x0 = int(rng.integers(0, w - crop_size + 1))
    flip = bool(rng.random() < 0.5)
    if mirror is not None:
        flip = mirror
    out = frames[..., y0:y0 + crop_size, x0:x0 + crop_size]
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def center_crop(frames: np.ndarray, crop_size: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    if crop_size > h or crop_size > w:
        raise ConfigurationError(f"crop size {crop_size} exceeds frame size {h}x{w}")
    y0, x0 = (h - crop_size) // 2, (w - crop_size) // 2
    return np.ascontiguousarray(frames[..., y0:y0 + crop_size, x0:x0 + crop_size])
