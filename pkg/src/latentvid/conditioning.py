"""Frame-level condition masks, ground-truth substitution and condition noising.

A mask marks which latent frames are given (1) and which are generated (0).
It is broadcast over space and concatenated to the latent as one extra channel.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import q_sample, randn
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

MODES = ("unconditional", "predict", "interpolate")
ROLES = ("unconditional", "prediction", "interpolation")
DEFAULT_UNCOND_PROB = {"unconditional": 1.0, "prediction": 0.5, "interpolation": 0.1}


@dataclass(frozen=True)
class ConditionSpec:
    mode: str = "unconditional"
    k: int = 0
    sparse_stride: int = 0
    perturb_s: int = 0
    s_max: int = 250

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown condition mode {self.mode!r}")
        if self.perturb_s < 0 or self.s_max < 0:
            raise ConfigError("perturb_s and s_max must be >= 0")
        if self.mode == "interpolate" and self.sparse_stride < 2:
            raise ConfigError("interpolate mode needs sparse_stride >= 2")
        if self.mode == "predict" and self.k < 1:
            raise ConfigError("predict mode needs k >= 1")

    def validate(self, l, T=None):
        if l < 1:
            raise ConfigError("clip needs at least one latent frame")
        if self.mode == "predict" and not self.k < l:
            raise ConfigError(f"predict needs k < l, got k={self.k}, l={l}")
        if self.mode == "interpolate" and (l - 1) % self.sparse_stride:
            raise ConfigError(
                f"last frame of a {l}-frame clip is not on the stride-{self.sparse_stride} grid"
            )
        if T is not None and not self.perturb_s <= self.s_max <= T:
            raise ConfigError(f"need perturb_s <= s_max <= T, got {self.perturb_s}, {self.s_max}, {T}")
        return self

    def describe(self):
        if self.mode == "predict":
            return f"predict(k={self.k})"
        if self.mode == "interpolate":
            return f"interpolate(stride={self.sparse_stride})"
        return "unconditional"


def frame_pattern(spec, l):
    """Per-frame 0/1 indicator of length ``l`` (frame 0 first)."""
    spec.validate(l)
    pattern = np.zeros(l, dtype=np.int64)
    if spec.mode == "predict":
        pattern[: spec.k] = 1
    elif spec.mode == "interpolate":
        pattern[:: spec.sparse_stride] = 1
    return pattern


def build_mask(spec, l, h=1, w=1):
    """Binary clip of shape ``(h, w, l, 1)``, constant within each frame."""
    pattern = frame_pattern(spec, l).astype(np.float32)
    return np.broadcast_to(pattern[None, None, :, None], (h, w, l, 1)).copy()


def mask_tensor(pattern, like):
    """``(B, 1, l, ...)`` mask from per-example frame patterns ``(B, l)``."""
    pattern = torch.as_tensor(np.asarray(pattern), dtype=like.dtype, device=like.device)
    if pattern.ndim == 1:
        pattern = pattern.expand(like.shape[0], -1)
    shape = (like.shape[0], 1, like.shape[2]) + tuple(like.shape[3:])
    view = pattern.reshape(like.shape[0], 1, like.shape[2], *([1] * (like.ndim - 3)))
    return view.expand(shape).contiguous()


def batch_masks(specs, like):
    l = like.shape[2]
    return mask_tensor(np.stack([frame_pattern(s, l) for s in specs]), like)


def empty_mask(like):
    return torch.zeros((like.shape[0], 1) + tuple(like.shape[2:]), dtype=like.dtype, device=like.device)


def apply_condition(z_t, source, mask):
    """Substitute ``source`` at masked frames and append the mask channel."""
    if source.shape != z_t.shape:
        raise ShapeError(f"source {tuple(source.shape)} and z_t {tuple(z_t.shape)} differ")
    expected = (z_t.shape[0], 1) + tuple(z_t.shape[2:])
    if tuple(mask.shape) != expected:
        raise ShapeError(f"mask shape {tuple(mask.shape)} != {expected}")
    latent = torch.where(mask > 0.5, source, z_t)
    return torch.cat([latent, mask.to(z_t.dtype)], dim=1)


@dataclass
class Condition:
    """Sampling-time condition: mask ``(B, 1, l, ...)`` and source latents ``(B, c, l, ...)``."""

    mask: torch.Tensor
    source: torch.Tensor

    @classmethod
    def from_spec(cls, spec, source):
        return cls(batch_masks([spec] * source.shape[0], source), source)


def perturb_condition(z0_cond, s, s_max, schedule, generator=None):
    """Noise the conditional latents to step ``min(s, s_max)``; ``s = 0`` is the identity.

    ``s`` may be an int or one value per example. The noisy value is exactly
    :func:`~latentvid.diffusion.q_sample` with a fresh standard-normal draw.
    """
    s_arr = np.asarray(s, dtype=np.int64)
    clamped = np.minimum(s_arr, int(s_max))
    if np.any(clamped != s_arr):
        log.debug("condition noise step clamped from %s to s_max=%d", s_arr.max(), s_max)
    if np.all(clamped == 0):
        return z0_cond
    eps = randn(tuple(z0_cond.shape), generator, z0_cond.dtype)
    if clamped.ndim == 0:
        return q_sample(z0_cond, int(clamped), eps, schedule)
    noisy = q_sample(z0_cond, np.maximum(clamped, 1), eps, schedule)
    keep = torch.as_tensor(clamped == 0).reshape(-1, *([1] * (z0_cond.ndim - 1)))
    return torch.where(keep, z0_cond, noisy)


def sample_training_mode(role, rng, l, k_choices=None, sparse_stride=2, s_max=250,
                         uncond_prob=None):
    """Draw the condition used for one training example.

    ``prediction`` is unconditional with probability 0.5, otherwise predicts
    from ``k`` leading frames (``k`` uniform over ``k_choices``, default
    ``1..l//2``); ``interpolation`` is unconditional with probability 0.1,
    otherwise conditions on the stride grid. Conditional draws get a noise
    step uniform on ``0..s_max``.
    """
    if role not in ROLES:
        raise ConfigError(f"unknown training role {role!r}")
    p = DEFAULT_UNCOND_PROB[role] if uncond_prob is None else uncond_prob
    if role == "unconditional" or rng.random() < p:
        return ConditionSpec("unconditional", s_max=s_max)
    s = int(rng.integers(0, s_max + 1))
    if role == "prediction":
        choices = list(k_choices) if k_choices else list(range(1, max(l // 2, 1) + 1))
        k = int(choices[int(rng.integers(len(choices)))])
        return ConditionSpec("predict", k=k, perturb_s=s, s_max=s_max).validate(l)
    return ConditionSpec("interpolate", sparse_stride=sparse_stride, perturb_s=s, s_max=s_max).validate(l)
