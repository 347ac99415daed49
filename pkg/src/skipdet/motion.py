"""Motion gate: stack a frame with its reference, run a 1x1 convolution to
get a per-pixel motion probability map, and decide whether the expensive
detector pass is needed.

The default gate weights are the analytic frame difference: +1/C on each
current channel, -1/C on each reference channel, zero bias, squashed by
abs then clamp to [0,1]. Identical frames therefore produce an exactly
zero map. Arbitrary 1x1 weights can be substituted through the policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, pointwise

__all__ = ["Frame", "GatingPolicy", "MotionProbabilityMap", "decide",
           "motion_map", "stack_frames"]


@dataclass(frozen=True)
class Frame:
    """A video frame: time index plus [C,H,W] pixels in [0,1], C in {1,3}."""

    index: int
    pixels: Tensor

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"frame index must be non-negative, got {self.index}")
        if self.pixels.data.ndim != 3:
            raise ShapeError(f"frame pixels must be [C,H,W], got shape {self.pixels.shape}")
        if self.pixels.shape[0] not in (1, 3):
            raise ShapeError(f"frame channels must be 1 or 3, got {self.pixels.shape[0]}")
        lo, hi = float(self.pixels.data.min()), float(self.pixels.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"frame pixels must lie in [0,1], got range [{lo}, {hi}]")


@dataclass(frozen=True)
class MotionProbabilityMap:
    """Per-pixel motion likelihood in [0,1] with shape [1,H,W]."""

    values: Tensor

    def __post_init__(self) -> None:
        if self.values.data.ndim != 3 or self.values.shape[0] != 1:
            raise ShapeError(f"motion map must be [1,H,W], got shape {self.values.shape}")
        lo, hi = float(self.values.data.min()), float(self.values.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"motion map values must lie in [0,1], got range [{lo}, {hi}]")


@dataclass(frozen=True)
class GatingPolicy:
    """Thresholds and 1x1-conv parameters that turn a map into a decision.

    ``pixel_threshold`` (p0) marks a pixel as moving; ``area_threshold``
    (tau) is the moving-pixel fraction above which inference runs;
    ``force_every`` N forces inference once N frames have passed since the
    last one (0 disables forcing, the default behavior).
    """

    kernel: Tensor
    bias: Tensor
    pixel_threshold: float = 0.1
    area_threshold: float = 0.002
    force_every: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.pixel_threshold <= 1.0 and 0.0 <= self.area_threshold <= 1.0):
            raise ValueError(
                f"thresholds must lie in [0,1], got p0={self.pixel_threshold}, "
                f"tau={self.area_threshold}")
        if self.force_every < 0:
            raise ValueError(f"force_every must be non-negative, got {self.force_every}")
        shape = self.kernel.shape
        if len(shape) != 4 or shape[0] != 1 or shape[2] != 1 or shape[3] != 1:
            raise ShapeError(f"gate kernel must be [1,2C,1,1], got shape {shape}")
        if shape[1] % 2:
            raise ShapeError(f"gate kernel needs an even channel count, got {shape[1]}")
        if self.bias.shape != (1,):
            raise ShapeError(f"gate bias must have shape (1,), got {self.bias.shape}")

    @classmethod
    def default(cls, channels: int, pixel_threshold: float = 0.1,
                area_threshold: float = 0.002, force_every: int = 0) -> "GatingPolicy":
        """Analytic frame-difference weights for C-channel frames."""
        if channels < 1:
            raise ValueError(f"channels must be positive, got {channels}")
        w = np.empty((1, 2 * channels, 1, 1), dtype=np.float32)
        w[0, :channels] = 1.0 / channels
        w[0, channels:] = -1.0 / channels
        return cls(kernel=Tensor(w), bias=Tensor.zeros((1,)),
                   pixel_threshold=pixel_threshold, area_threshold=area_threshold,
                   force_every=force_every)


def stack_frames(current: Frame, reference: Frame) -> Tensor:
    """Concatenate to [2C,H,W]: current frame channels first, reference after."""
    if current.pixels.shape != reference.pixels.shape:
        raise ShapeError(
            f"frame shape mismatch: current {current.pixels.shape} vs "
            f"reference {reference.pixels.shape}")
    return Tensor(np.concatenate([current.pixels.data, reference.pixels.data], axis=0))


def motion_map(stack: Tensor, policy: GatingPolicy) -> MotionProbabilityMap:
    """1x1 convolution over the stack, squashed into [0,1] by abs and clamp.

    The per-pixel dot product pairs each current channel with its reference
    channel before accumulating. Under the default antisymmetric weights the
    paired products are exact IEEE negations, so identical frames yield a
    map of exact zeros rather than rounding residue.
    """
    if stack.data.ndim != 3 or stack.shape[0] != policy.kernel.shape[1]:
        raise ShapeError(
            f"stack shape {stack.shape} does not match gate kernel input "
            f"channels {policy.kernel.shape[1]}")
    c = stack.shape[0] // 2
    w = policy.kernel.data[0, :, 0, 0]
    paired = (w[:c, None, None] * stack.data[:c]
              + w[c:, None, None] * stack.data[c:])
    raw = Tensor(paired.sum(axis=0, keepdims=True) + policy.bias.data[0])
    return MotionProbabilityMap(pointwise(pointwise(raw, "abs"), "clamp01"))


def decide(m: MotionProbabilityMap, policy: GatingPolicy,
           frames_since_inference: int) -> bool:
    """True iff deep inference is needed for the current frame.

    Fires when the fraction of pixels above p0 exceeds tau, or when forcing
    is enabled and at least ``force_every`` frames have passed since the
    last inference.
    """
    if frames_since_inference < 0:
        raise ValueError(f"frames_since_inference must be non-negative, got {frames_since_inference}")
    values = m.values.data
    fraction = float(np.count_nonzero(values > policy.pixel_threshold)) / values.size
    if fraction > policy.area_threshold:
        return True
    return policy.force_every > 0 and frames_since_inference >= policy.force_every
