"""Grid tensors, channel layouts, reversible spatial transforms and activity masks.

Grid tensors are plain numpy arrays whose last three axes are
``(height, width, channels)``.  Any leading axes (time, batch) are carried
through untouched by every function here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_INPUT_FRAMES = 12
TARGET_OFFSETS_MIN = (5, 10, 15, 30, 45, 60)
# steps after the last input frame at 5-minute sampling
TARGET_STEPS = tuple(m // 5 for m in TARGET_OFFSETS_MIN)
STEPS_PER_DAY = 288


class ShapeError(ValueError):
    pass


def check_grid(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate a grid tensor: rank >= 3, finite, values in [0, 255]."""
    t = np.asarray(t)
    if t.ndim < 3:
        raise ShapeError(f"{name} must have at least 3 axes (h, w, c), got shape {t.shape}")
    if t.size and not np.all(np.isfinite(t)):
        raise ValueError(f"{name} contains non-finite values")
    if t.size and (t.min() < 0 or t.max() > 255):
        raise ValueError(f"{name} values must lie in [0, 255]")
    return t


@dataclass(frozen=True)
class ChannelLayout:
    """Which channels hold volume and which hold speed.

    The i-th volume channel and the i-th speed channel describe the same
    heading.  The default mirrors the interleaved 8-channel layout
    (NE, NW, SE, SW headings; volume then speed for each).
    """

    volume_channel_indices: tuple[int, ...] = (0, 2, 4, 6)
    speed_channel_indices: tuple[int, ...] = (1, 3, 5, 7)

    def __post_init__(self):
        vol, spd = self.volume_channel_indices, self.speed_channel_indices
        if len(vol) != len(spd):
            raise ValueError("volume and speed index lists must have equal length")
        if set(vol) & set(spd):
            raise ValueError("volume and speed channel indices overlap")
        if len(set(vol)) != len(vol) or len(set(spd)) != len(spd):
            raise ValueError("duplicate channel index")
        if sorted(vol + spd) != list(range(len(vol) + len(spd))):
            raise ValueError("channel indices must jointly cover 0..n_channels-1")

    @property
    def n_directions(self) -> int:
        return len(self.volume_channel_indices)

    @property
    def n_channels(self) -> int:
        return 2 * self.n_directions


DEFAULT_LAYOUT = ChannelLayout()


@dataclass(frozen=True)
class TransformSpec:
    """A dihedral transform: optional flips followed by a rotation.

    ``rotation`` is in degrees, one of 90, 180, 270, 360 (360 is no rotation).
    Rotations are counter-clockwise quarter turns in the (h, w) plane.
    """

    flip_h: bool = False
    flip_v: bool = False
    rotation: int = 360

    def __post_init__(self):
        if self.rotation not in (90, 180, 270, 360):
            raise ValueError(f"rotation must be one of 90, 180, 270, 360, got {self.rotation}")

    @property
    def quarter_turns(self) -> int:
        return (self.rotation // 90) % 4

    @property
    def is_identity(self) -> bool:
        return self.canonical() == IDENTITY

    def canonical(self) -> "TransformSpec":
        """Return the element of ``ALL_TRANSFORMS`` acting identically."""
        probe = np.arange(9).reshape(3, 3, 1)
        out = apply_transform(probe, self)
        for cand in ALL_TRANSFORMS:
            if np.array_equal(apply_transform(probe, cand), out):
                return cand
        raise AssertionError("unreachable: dihedral group is closed")


IDENTITY = TransformSpec()
# identity first, then the seven non-identity augmentations
ALL_TRANSFORMS: tuple[TransformSpec, ...] = (
    IDENTITY,
    TransformSpec(flip_h=True),
    TransformSpec(flip_v=True),
    TransformSpec(rotation=90),
    TransformSpec(rotation=180),
    TransformSpec(rotation=270),
    TransformSpec(flip_v=True, rotation=90),
    TransformSpec(flip_v=True, rotation=270),
)
AUGMENTATIONS = ALL_TRANSFORMS[1:]


def _check_rotatable(t: np.ndarray, spec: TransformSpec) -> None:
    if t.ndim < 3:
        raise ShapeError(f"expected (..., h, w, c) array, got shape {t.shape}")
    if spec.quarter_turns % 2 == 1 and t.shape[-3] != t.shape[-2]:
        raise ShapeError(
            f"quarter-turn rotation needs a square grid, got {t.shape[-3]}x{t.shape[-2]}; pad first"
        )


def apply_transform(t: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Flip (h then v) and rotate the spatial axes; channel order is untouched."""
    t = np.asarray(t)
    _check_rotatable(t, spec)
    out = t
    if spec.flip_h:
        out = out[..., :, ::-1, :]
    if spec.flip_v:
        out = out[..., ::-1, :, :]
    if spec.quarter_turns:
        out = np.rot90(out, k=spec.quarter_turns, axes=(-3, -2))
    return np.ascontiguousarray(out)


def invert_transform(t: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Undo :func:`apply_transform` exactly."""
    t = np.asarray(t)
    _check_rotatable(t, spec)
    out = t
    if spec.quarter_turns:
        out = np.rot90(out, k=-spec.quarter_turns, axes=(-3, -2))
    if spec.flip_v:
        out = out[..., ::-1, :, :]
    if spec.flip_h:
        out = out[..., :, ::-1, :]
    return np.ascontiguousarray(out)


def pad_to_square(t: np.ndarray, target: int) -> np.ndarray:
    """Zero-pad the spatial axes to ``target x target``, content anchored top-left."""
    t = np.asarray(t)
    h, w = t.shape[-3], t.shape[-2]
    if target < max(h, w):
        raise ShapeError(f"target {target} smaller than grid {h}x{w}")
    pad = [(0, 0)] * t.ndim
    pad[-3] = (0, target - h)
    pad[-2] = (0, target - w)
    return np.pad(t, pad)


def unpad(t: np.ndarray, height: int, width: int) -> np.ndarray:
    """Crop the top-left ``height x width`` block (inverse of :func:`pad_to_square`)."""
    t = np.asarray(t)
    if height > t.shape[-3] or width > t.shape[-2]:
        raise ShapeError(f"cannot crop {t.shape[-3]}x{t.shape[-2]} to {height}x{width}")
    return np.ascontiguousarray(t[..., :height, :width, :])


def activity_mask(frames: Sequence[np.ndarray] | np.ndarray, layout: ChannelLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Boolean (h, w, c) mask of cells with traffic in any frame.

    A volume cell is active iff it is nonzero in at least one frame; each
    speed cell copies the activity of its paired volume cell.
    """
    if len(frames) == 0:
        raise ValueError("activity_mask needs at least one frame")
    stack = np.asarray(frames)
    if stack.ndim == 3:
        stack = stack[None]
    if stack.shape[-1] != layout.n_channels:
        raise ShapeError(f"layout expects {layout.n_channels} channels, got {stack.shape[-1]}")
    vol = list(layout.volume_channel_indices)
    active_vol = np.any(stack[..., vol] != 0, axis=tuple(range(stack.ndim - 3)))
    mask = np.zeros(stack.shape[-3:], dtype=bool)
    mask[..., vol] = active_vol
    mask[..., list(layout.speed_channel_indices)] = active_vol
    return mask


def stack_frames(inputs: np.ndarray) -> np.ndarray:
    """(..., T, h, w, c) -> (..., h, w, T*c), frame-major along the channel axis."""
    inputs = np.asarray(inputs)
    t, h, w, c = inputs.shape[-4:]
    moved = np.moveaxis(inputs, -4, -2)  # (..., h, w, T, c)
    return moved.reshape(inputs.shape[:-4] + (h, w, t * c))


@dataclass(frozen=True)
class SampleSequence:
    """A 12-frame input window and its 6 future targets, read lazily from a day array.

    ``frames`` is a (steps, h, w, c) array; ``start`` indexes the first input
    frame.  Nothing is copied until ``inputs``/``targets`` are accessed.
    """

    frames: np.ndarray
    start: int
    day: int = 0

    def __post_init__(self):
        last = self.start + N_INPUT_FRAMES - 1 + TARGET_STEPS[-1]
        if self.start < 0 or last >= self.frames.shape[0]:
            raise ValueError(f"window starting at {self.start} does not fit {self.frames.shape[0]} frames")

    @property
    def inputs(self) -> np.ndarray:
        return self.frames[self.start:self.start + N_INPUT_FRAMES]

    @property
    def targets(self) -> np.ndarray:
        last = self.start + N_INPUT_FRAMES - 1
        return self.frames[[last + k for k in TARGET_STEPS]]

    def target(self, horizon: int = len(TARGET_STEPS) - 1) -> np.ndarray:
        return self.frames[self.start + N_INPUT_FRAMES - 1 + TARGET_STEPS[horizon]]
