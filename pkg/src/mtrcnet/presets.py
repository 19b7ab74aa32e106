"""Pinned desk-scale settings shared by the CLI, the demos and the acceptance suite.

Each dict holds keyword overrides for the matching dataclass.
"""

# P(tool | phase): rows are tools, columns are phases. Sharper than the
# package default so that tools are largely predictable from the phase.
TOOL_GIVEN_PHASE = (
    (0.6, 0.9, 0.6, 0.9, 0.6, 0.5, 0.9),
    (0.02, 0.02, 0.02, 0.05, 0.0, 0.85, 0.02),
    (0.1, 0.95, 0.05, 0.95, 0.0, 0.05, 0.0),
    (0.0, 0.0, 0.4, 0.0, 0.0, 0.0, 0.0),
    (0.0, 0.0, 0.85, 0.0, 0.0, 0.0, 0.0),
    (0.0, 0.0, 0.0, 0.0, 0.0, 0.85, 0.1),
    (0.0, 0.0, 0.0, 0.0, 0.9, 0.05, 0.9),
)

SPEC = dict(frame_size=28, glyph_size=8, illumination_jitter=0.06, noise_level=0.12, glyph_contrast=0.5,
            tool_given_phase=TOOL_GIVEN_PHASE)
ARCH = dict(frame_size=24, encoder_channels=(8, 16), feature_dim=32)
PLAN = dict(epochs=(20, 10, 10), lr_backbone=0.01, lr_branches=0.01)
DATA = dict(num_videos=20, train_ratio=0.5, annotation_fps=25)
