"""Arbitrary-length generation by autoregressive extension and hierarchical filling.

All latents here are in normalized space with layout ``(B, c, l, h, w)``.
Every sampling call draws from per-chain generators derived from
``(seed, stage, index, chain)``, so results do not depend on batch
composition and each stream is named in the orchestration log.
"""
import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch

from .conditioning import Condition, ConditionSpec, perturb_condition
from .diffusion import SamplerConfig, sample
from .errors import ConfigError, LatentVidError

_STAGES = {"seed": 0, "extend": 1, "interp": 2}


def guided_eps(eps_c, eps_u, w):
    """``(1 + w) eps_c - w eps_u``; ``w = 0`` returns ``eps_c`` untouched."""
    if eps_c.shape != eps_u.shape:
        raise ValueError("guidance inputs differ in shape")
    if w == 0:
        return eps_c
    return (1.0 + w) * eps_c - w * eps_u


def stream_generators(seed, stage, index, n):
    gens = []
    for chain in range(n):
        state = np.random.SeedSequence([int(seed), _STAGES[stage], int(index), chain]).generate_state(
            2, dtype=np.uint32)
        g = torch.Generator()
        g.manual_seed(int(state[0]) << 32 | int(state[1]))
        gens.append(g)
    return gens


class OrchestrationLog:
    """One record per sampling call: step, stage, mask mode, noise level, stream id."""

    def __init__(self):
        self.records = []

    def add(self, step, stage, mask, perturb, stream):
        self.records.append(
            {"step": step, "stage": stage, "mask": mask, "perturb": perturb, "stream": stream}
        )

    def lines(self):
        return [
            f"step={r['step']} stage={r['stage']} mask={r['mask']} perturb={r['perturb']} stream={r['stream']}"
            for r in self.records
        ]

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + ("\n" if self.records else ""))


@dataclass
class ExtensionPlan:
    total_latent_frames: int
    window: int
    overlap: int
    noise_level: int = 200
    guidance_w: float = 0.0

    def __post_init__(self):
        if not 0 < self.overlap < self.window:
            raise ConfigError(f"need 0 < overlap < window, got {self.overlap}, {self.window}")
        if self.total_latent_frames < 1:
            raise ConfigError("total_latent_frames must be >= 1")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")

    @property
    def steps(self):
        extra = self.total_latent_frames - self.window
        return max(0, math.ceil(extra / (self.window - self.overlap)))


@dataclass
class HierarchyPlan:
    total_latent_frames: int
    sparse_stride: int
    window: int
    overlap: int
    interp_window: int
    noise_level: int = 200
    interp_noise_level: int = None
    guidance_w: float = 0.0

    def __post_init__(self):
        if self.sparse_stride < 1:
            raise ConfigError("sparse_stride must be >= 1")
        if self.sparse_stride > 1 and (self.interp_window - 1) % self.sparse_stride:
            raise ConfigError(
                f"interp_window - 1 = {self.interp_window - 1} is not a multiple of "
                f"sparse_stride {self.sparse_stride}"
            )
        if self.interp_noise_level is None:
            self.interp_noise_level = self.noise_level
        self.sparse_plan  # validates the sparse extension geometry

    @property
    def sparse_length(self):
        if self.sparse_stride == 1:
            return self.total_latent_frames
        return math.ceil((self.total_latent_frames - 1) / self.sparse_stride) + 1

    @property
    def dense_length(self):
        return (self.sparse_length - 1) * self.sparse_stride + 1

    @property
    def sparse_plan(self):
        return ExtensionPlan(self.sparse_length, self.window, self.overlap, self.noise_level,
                             self.guidance_w)

    @property
    def gaps_per_window(self):
        return (self.interp_window - 1) // self.sparse_stride


def _latent_channels(model):
    return getattr(getattr(model, "cfg", None), "latent_channels", None)


def _sampler(sampler_cfg, guidance_w):
    return dataclasses.replace(sampler_cfg or SamplerConfig(), guidance_w=guidance_w)


def generate_seed_clip(model, shape, schedule, sampler_cfg=None, seed=0, log=None):
    """Unconditional ``l``-frame clip used to start an extension."""
    cfg = _sampler(sampler_cfg, 0.0)
    gens = stream_generators(seed, "seed", 0, shape[0])
    if log is not None:
        log.add(0, "seed", "unconditional", 0, "seed/0")
    return sample(model, shape, None, cfg, schedule, generator=gens)


def autoregressive_extend(model, seed_latent, plan, schedule, sampler_cfg=None, seed=0,
                          log=None, stage_label="extend"):
    """Extend ``seed_latent`` (``l = plan.window`` frames) to ``plan.total_latent_frames``.

    Each step noises the last ``k`` frames to ``plan.noise_level``, samples a
    full window under a ``predict(k)`` mask and appends the ``l - k`` new frames.
    """
    b, c, l = seed_latent.shape[:3]
    if l != plan.window:
        raise ConfigError(f"seed clip has {l} latent frames, plan window is {plan.window}")
    k = plan.overlap
    spec = ConditionSpec("predict", k=k, perturb_s=plan.noise_level, s_max=plan.noise_level)
    cfg = _sampler(sampler_cfg, plan.guidance_w)
    frames = seed_latent
    for step in range(plan.steps):
        gens = stream_generators(seed, "extend", step, b)
        tail = frames[:, :, -k:]
        source = torch.zeros_like(seed_latent)
        source[:, :, :k] = perturb_condition(tail, plan.noise_level, plan.noise_level, schedule, gens)
        if log is not None:
            log.add(step, stage_label, spec.describe(), plan.noise_level, f"extend/{step}")
        try:
            window = sample(model, tuple(seed_latent.shape), Condition.from_spec(spec, source),
                            cfg, schedule, generator=gens)
        except LatentVidError as exc:
            raise type(exc)(f"extension step {step}: {exc}") from exc
        frames = torch.cat([frames, window[:, :, k:]], dim=2)
    return frames[:, :, : plan.total_latent_frames]


def _interp_windows(n_sparse, gaps_per_window):
    """Start anchors of interpolation windows covering every gap exactly once."""
    n_gaps = n_sparse - 1
    starts, covered = [], 0
    while covered < n_gaps:
        start = min(covered, max(n_gaps - gaps_per_window, 0))
        starts.append((start, covered))
        covered = start + gaps_per_window
    return starts


def hierarchical_generate(sparse_model, interp_model, hplan, schedule, sampler_cfg=None,
                          seed=0, batch_size=1, latent_hw=(4, 4), seed_latent=None, log=None):
    """Sparse storyline by autoregression, then fill the gaps with the interpolation model.

    Anchors in the dense output are copied from the sparse stage. The dense
    timeline is truncated to ``hplan.total_latent_frames``.
    """
    c_sparse, c_interp = _latent_channels(sparse_model), _latent_channels(interp_model)
    if c_sparse is not None and c_interp is not None and c_sparse != c_interp:
        raise ConfigError(f"sparse model has {c_sparse} latent channels, interpolation model {c_interp}")
    c = c_sparse or c_interp
    if seed_latent is None:
        if c is None:
            raise ConfigError("cannot infer latent channels; pass seed_latent")
        shape = (batch_size, c, hplan.window) + tuple(latent_hw)
        seed_latent = generate_seed_clip(sparse_model, shape, schedule, sampler_cfg, seed, log)
    sparse = autoregressive_extend(sparse_model, seed_latent, hplan.sparse_plan, schedule,
                                   sampler_cfg, seed, log, stage_label="sparse")
    stride = hplan.sparse_stride
    if stride == 1:
        return sparse[:, :, : hplan.total_latent_frames]

    b, c, n_sparse = sparse.shape[:3]
    spatial = tuple(sparse.shape[3:])
    g = hplan.gaps_per_window
    if n_sparse < g + 1:
        raise ConfigError(f"{n_sparse} sparse frames cannot fill a {hplan.interp_window}-frame window")
    windows = _interp_windows(n_sparse, g)
    spec = ConditionSpec("interpolate", sparse_stride=stride, perturb_s=hplan.interp_noise_level,
                         s_max=hplan.interp_noise_level)
    cfg = _sampler(sampler_cfg, hplan.guidance_w)
    dense = torch.zeros((b, c, hplan.dense_length) + spatial, dtype=sparse.dtype)
    dense[:, :, ::stride] = sparse
    # one batched sampling call: chains ordered (window, video)
    sources, gens = [], []
    for w_idx, (start, _) in enumerate(windows):
        anchor_clip = sparse[:, :, start : start + g + 1]
        wgens = stream_generators(seed, "interp", w_idx, b)
        src = torch.zeros((b, c, hplan.interp_window) + spatial, dtype=sparse.dtype)
        src[:, :, ::stride] = perturb_condition(anchor_clip, hplan.interp_noise_level,
                                                hplan.interp_noise_level, schedule, wgens)
        sources.append(src)
        gens.extend(wgens)
        if log is not None:
            log.add(w_idx, "interp", spec.describe(), hplan.interp_noise_level, f"interp/{w_idx}")
    source = torch.cat(sources, dim=0)
    filled = sample(interp_model, tuple(source.shape), Condition.from_spec(spec, source), cfg,
                    schedule, generator=gens)
    for w_idx, (start, first_new) in enumerate(windows):
        block = filled[w_idx * b : (w_idx + 1) * b]
        for gap in range(first_new, start + g):
            local = (gap - start) * stride
            dense[:, :, gap * stride + 1 : (gap + 1) * stride] = block[:, :, local + 1 : local + stride]
    assert torch.equal(dense[:, :, ::stride], sparse)
    return dense[:, :, : hplan.total_latent_frames]


def render_long_video(latent, decoder, stats, window):
    """Denormalize and decode in non-overlapping windows of ``window`` latent frames."""
    from .autoencoder import denormalize

    if latent.shape[1] != stats.channels:
        raise ConfigError(f"latent has {latent.shape[1]} channels, stats have {stats.channels}")
    if latent.shape[1] != decoder.cfg.c:
        raise ConfigError(f"latent has {latent.shape[1]} channels, decoder expects {decoder.cfg.c}")
    z = denormalize(latent, stats)
    dtype = next(decoder.parameters()).dtype
    pieces = []
    with torch.no_grad():
        for start in range(0, z.shape[2], window):
            pieces.append(decoder.decode(z[:, :, start : start + window].to(dtype)))
    return torch.cat(pieces, dim=2)
