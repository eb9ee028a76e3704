"""Sampling and evaluation commands built on trained checkpoints."""
import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import DatasetSpec, from_model_layout, make_dataset, to_model_layout
from .diffusion import SamplerConfig, sample, schedule_from_params
from .errors import ConfigError, IngestionError
from .evalkit import degradation_curve, encoder_feature_fn
from .long_video import (ExtensionPlan, HierarchyPlan, OrchestrationLog, autoregressive_extend,
                         generate_seed_clip, hierarchical_generate, render_long_video)
from .rawclip import read_raw_clip, write_raw_clip
from .train import load_autoencoder, load_diffusion


def _check_pair(ae_manifest, dm_manifest, what):
    if dm_manifest.get("ae_payload_sha256") != ae_manifest["payload_sha256"]:
        raise ConfigError(f"{what} was trained on a different autoencoder checkpoint")


def write_video(out_dir, index, video):
    """Write ``(H, W, L, 3)`` frames as PNGs plus one raw clip file."""
    from PIL import Image

    out_dir = Path(out_dir)
    frame_dir = out_dir / f"video_{index:03d}"
    frame_dir.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round((video + 1.0) * 127.5), 0, 255).astype(np.uint8)
    for f in range(video.shape[2]):
        Image.fromarray(pixels[:, :, f]).save(frame_dir / f"{f:04d}.png")
    write_raw_clip(out_dir / f"video_{index:03d}.raw", video)


def _frames_to_latent(frames, f_t):
    if frames % f_t:
        raise ConfigError(f"frame count {frames} not divisible by f_t={f_t}")
    return frames // f_t


def _latent_hw(ae_manifest):
    data = ae_manifest["config"]["data"]
    f_s = ae_manifest["config"]["autoencoder"]["f_s"]
    return tuple(r // f_s for r in data["resolution"])


def sample_command(cfg, ae_dir, dm_dir, out_dir, frames, num_videos=1, seed=0, mode="sample",
                   overlap=None, noise_level=None, guidance_w=None, sparse_stride=None,
                   interp_dir=None):
    """Generate videos and write frames, raw clips and the orchestration log.

    ``mode`` is ``sample`` (one window, unconditional), ``extend`` (autoregressive)
    or ``hierarchical`` (sparse prediction model ``dm_dir`` + ``interp_dir``).
    """
    ae, stats, ae_manifest = load_autoencoder(ae_dir)
    model, dm_manifest = load_diffusion(dm_dir, use_ema=cfg.dm_train.use_ema)
    _check_pair(ae_manifest, dm_manifest, "diffusion model")
    interp = None
    if mode == "hierarchical":
        if interp_dir is None:
            raise ConfigError("hierarchical sampling needs an interpolation checkpoint")
        interp, interp_manifest = load_diffusion(interp_dir, use_ema=cfg.dm_train.use_ema)
        _check_pair(ae_manifest, interp_manifest, "interpolation model")
    schedule = schedule_from_params(dm_manifest["schedule"])
    f_t = ae.cfg.f_t
    n_latent = _frames_to_latent(frames, f_t)
    window = dm_manifest["latent_window"]
    hw = _latent_hw(ae_manifest)
    sampler = dataclasses.replace(cfg.sampler, seed=seed)
    lv = cfg.long_video
    overlap = lv.overlap if overlap is None else overlap
    noise_level = lv.noise_level if noise_level is None else noise_level
    guidance_w = lv.guidance_w if guidance_w is None else guidance_w
    olog = OrchestrationLog()
    shape = (num_videos, ae.cfg.c, window) + hw
    if mode == "sample":
        if n_latent != window:
            raise ConfigError(f"sample produces exactly {window * f_t} frames; use extend for more")
        latent = generate_seed_clip(model, shape, schedule, sampler, seed, olog)
    elif mode == "extend":
        plan = ExtensionPlan(n_latent, window, overlap, noise_level, guidance_w)
        seed_clip = generate_seed_clip(model, shape, schedule, sampler, seed, olog)
        latent = autoregressive_extend(model, seed_clip, plan, schedule, sampler, seed, olog)
    elif mode == "hierarchical":
        stride = lv.sparse_stride if sparse_stride is None else sparse_stride
        if dm_manifest.get("latent_stride", 1) != stride:
            raise ConfigError(
                f"sparse model was trained at latent stride {dm_manifest.get('latent_stride')}, "
                f"requested {stride}"
            )
        hplan = HierarchyPlan(n_latent, stride, window, overlap,
                              interp_manifest["latent_window"], noise_level,
                              guidance_w=guidance_w)
        latent = hierarchical_generate(model, interp, hplan, schedule, sampler, seed,
                                       batch_size=num_videos, latent_hw=hw, log=olog)
    else:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    video = render_long_video(latent, ae, stats, window=ae_manifest["config"]["data"]["clip_length"] // f_t)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    videos = from_model_layout(video)
    for i in range(videos.shape[0]):
        write_video(out_dir, i, videos[i])
    olog.write(out_dir / "orchestration.log")
    return out_dir


def read_video_set(directory):
    files = sorted(Path(directory).glob("*.raw"))
    if not files:
        raise IngestionError(f"no raw clip files in {directory}")
    return torch.stack([to_model_layout(read_raw_clip(f))[0] for f in files])


def reference_videos(cfg, n, length, seed):
    """``n`` real videos of ``length`` frames drawn from the configured dataset."""
    d = cfg.data
    spec = DatasetSpec(source=d.source, clip_length=length, frame_stride=d.frame_stride,
                       resolution=d.resolution, seed=d.seed, num_videos=d.num_videos,
                       video_length=max(d.video_length, length * d.frame_stride), path=d.path)
    dataset = make_dataset(spec)
    from .data import sample_batch

    rng = np.random.default_rng(seed)
    return to_model_layout(sample_batch(dataset, rng, n))


def eval_command(cfg, ae_dir, generated_dir, out_dir, reference=None, label=None):
    """Degradation curve of generated videos against a reference set; writes table, records and plot."""
    ae, _, _ = load_autoencoder(ae_dir, require_stats=False)
    gen = read_video_set(generated_dir)
    if reference is None or reference == "synthetic":
        n_ref = max(cfg.eval.n_reference, 2)
        ref = reference_videos(cfg, n_ref, cfg.eval.clip_len, cfg.eval.reference_seed)
    else:
        ref = read_video_set(reference)
    series = degradation_curve(gen, ref, cfg.eval.clip_len, encoder_feature_fn(ae))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series.write(out_dir / "metrics.txt", out_dir / "records.jsonl")
    series.plot(out_dir / "curve.png", label=label)
    return series
