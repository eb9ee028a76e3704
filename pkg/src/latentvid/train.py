"""Training loops for the autoencoder and the diffusion models.

Both loops are single-process and deterministic for a given config and seed
on one platform. Checkpoints hold weights, optimizer state and every RNG
state, so a resumed run continues exactly where it stopped.
"""
import copy
import json
import logging
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .autoencoder import (AutoEncoder3d, AEConfig, LatentStats, PatchDiscriminator3d,
                          compute_latent_stats, generator_objective, hinge_d_loss, normalize)
from .conditioning import sample_training_mode
from .config import RunConfig
from .data import DatasetSpec, make_dataset, sample_batch, to_model_layout
from .denoiser import DenoiserConfig, Denoiser3d
from .diffusion import make_linear_schedule, training_loss
from .errors import CheckpointError, ConfigError, NumericalFault

log = logging.getLogger(__name__)

AE_DIR = "autoencoder"
STATS_FILE = "latent_stats.json"


def _seed_all(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def prepare_run_dir(run_dir, resume, sub):
    """Refuse to reuse a populated stage directory unless resuming."""
    run_dir = Path(run_dir)
    target = run_dir / sub
    if target.exists() and not resume:
        raise ConfigError(f"{target} already exists; pass resume or choose a new output dir")
    run_dir.mkdir(parents=True, exist_ok=True)
    return target


class StepLog:
    def __init__(self, path):
        self.path = Path(path)

    def write(self, rec):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_autoencoder(directory, require_stats=True):
    manifest, payload = ckpt.load_checkpoint(directory)
    if manifest.get("kind") != "autoencoder":
        raise CheckpointError(f"{directory} is not an autoencoder checkpoint")
    cfg = AEConfig(**manifest["config"]["autoencoder"])
    ae = AutoEncoder3d(cfg)
    ckpt.load_strict(ae, payload["ae"], cfg.to_dict(), manifest["config"]["autoencoder"], "autoencoder")
    ae.eval().requires_grad_(False)
    stats = None
    if manifest.get("latent_stats") is not None:
        stats = LatentStats.from_dict(manifest["latent_stats"])
    elif require_stats:
        raise CheckpointError(f"autoencoder checkpoint {directory} has no latent statistics")
    return ae, stats, manifest


def train_autoencoder(cfg, run_dir, resume=False, max_steps=None):
    """Train the autoencoder (plus discriminator once past warm-up) and compute latent stats.

    Returns the checkpoint directory. Latent statistics are added to the
    manifest only after the final step.
    """
    cfg.validate()
    tc = cfg.ae_train
    target = prepare_run_dir(run_dir, resume, AE_DIR)
    _seed_all(cfg.run.seed)
    dataset = make_dataset(cfg.data)
    rng = np.random.default_rng([cfg.run.seed, 1])
    ae = AutoEncoder3d(cfg.autoencoder)
    disc = PatchDiscriminator3d(cfg.autoencoder.disc_width)
    opt_g = torch.optim.Adam(ae.parameters(), lr=tc.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=tc.lr)
    step, trace = 0, []
    if resume and target.exists():
        manifest, payload = ckpt.load_checkpoint(target)
        ckpt.load_strict(ae, payload["ae"], cfg.autoencoder.to_dict(),
                         manifest["config"]["autoencoder"], "autoencoder")
        disc.load_state_dict(payload["disc"])
        opt_g.load_state_dict(payload["opt_g"])
        opt_d.load_state_dict(payload["opt_d"])
        rng.bit_generator.state = payload["np_rng"]
        torch.set_rng_state(payload["torch_rng"])
        step = manifest["step"]
        trace = list(payload.get("trace", []))
    steplog = StepLog(Path(run_dir) / "ae_train_log.jsonl")
    last = tc.steps if max_steps is None else min(tc.steps, max_steps)
    adv_on = cfg.autoencoder.adv_weight > 0

    def save(final):
        payload = {"ae": ae.state_dict(), "disc": disc.state_dict(), "opt_g": opt_g.state_dict(),
                   "opt_d": opt_d.state_dict(), "np_rng": rng.bit_generator.state,
                   "torch_rng": torch.get_rng_state(), "trace": trace}
        manifest = {"kind": "autoencoder", "step": step, "config": cfg.to_dict(),
                    "loss_tail": trace[-100:], "latent_stats": None, "complete": False}
        if final:
            stats = compute_latent_stats(dataset, ae, tc.stats_clips, seed=cfg.run.seed + 7,
                                         batch_size=tc.stats_batch)
            manifest["latent_stats"] = stats.to_dict()
            manifest["complete"] = True
            stats.save(Path(run_dir) / STATS_FILE)
        ckpt.save_checkpoint(target, payload, manifest)

    ae.train()
    while step < last:
        step += 1
        x = to_model_layout(sample_batch(dataset, rng, tc.batch_size))
        use_adv = adv_on and step > cfg.autoencoder.adv_warmup
        loss, parts = generator_objective(ae, disc, x, use_adv=use_adv)
        if not torch.isfinite(loss):
            raise NumericalFault(f"autoencoder loss is {loss.item()} at step {step}; "
                                 f"last good checkpoint kept in {target}")
        opt_g.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(ae.parameters(), tc.grad_clip)
        opt_g.step()
        rec = {"step": step, "mse": float(parts["mse"].detach()),
               "adv": float(torch.as_tensor(parts["adv"]).detach())}
        if use_adv:
            d_loss = hinge_d_loss(disc(x), disc(parts["x_rec"].detach()))
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            torch.nn.utils.clip_grad_norm_(disc.parameters(), tc.grad_clip)
            opt_d.step()
            rec["d_loss"] = float(d_loss.detach())
        trace.append(rec["mse"])
        if step % tc.log_every == 0 or step == last:
            steplog.write(rec)
            log.info("ae step %d mse %.5f", step, rec["mse"])
        if step % tc.checkpoint_every == 0 and step < tc.steps:
            save(final=False)
    save(final=step >= tc.steps)
    return target


class EMA:
    def __init__(self, model, decay):
        self.decay = decay
        self.model = copy.deepcopy(model).requires_grad_(False)

    @torch.no_grad()
    def update(self, model):
        for p_ema, p in zip(self.model.parameters(), model.parameters()):
            p_ema.mul_(self.decay).add_(p.detach(), alpha=1 - self.decay)


def dm_dir_name(role):
    return f"dm_{role}"


def _latent_batch(cfg, dataset, ae, stats, rng, role):
    stride = 1 if role == "interpolation" else cfg.dm_train.latent_stride
    spec = dataset.spec
    x = to_model_layout(sample_batch(dataset, rng, cfg.dm_train.batch_size))
    with torch.no_grad():
        z = normalize(ae.encode(x.to(next(ae.parameters()).dtype)), stats)
    return z[:, :, ::stride].float()


def _dm_dataset(cfg, role):
    d = cfg.data
    spec = DatasetSpec(source=d.source, clip_length=cfg.dm_pixel_frames(role), frame_stride=d.frame_stride,
                       resolution=d.resolution, seed=d.seed, num_videos=d.num_videos,
                       video_length=d.video_length, path=d.path)
    return make_dataset(spec)


def load_diffusion(directory, use_ema=True):
    manifest, payload = ckpt.load_checkpoint(directory)
    if manifest.get("kind") != "diffusion":
        raise CheckpointError(f"{directory} is not a diffusion checkpoint")
    dcfg = DenoiserConfig(**manifest["config"]["denoiser"])
    model = Denoiser3d(dcfg)
    key = "ema" if use_ema and payload.get("ema") is not None else "model"
    ckpt.load_strict(model, payload[key], dcfg.to_dict(), manifest["config"]["denoiser"], "denoiser")
    model.eval().requires_grad_(False)
    return model, manifest


def train_diffusion(cfg, run_dir, ae_checkpoint, role, init_from=None, resume=False,
                    max_steps=None, model=None):
    """Train one diffusion model in normalized latent space.

    ``role`` selects the condition draws: ``unconditional`` (all-zero mask),
    ``prediction`` or ``interpolation``. ``init_from`` resumes weights from
    another diffusion checkpoint (the unconditional model). ``model`` replaces
    the denoiser (used for wiring checks with stub models).
    """
    cfg.validate()
    tc = cfg.dm_train
    if role not in ("unconditional", "prediction", "interpolation"):
        raise ConfigError(f"unknown role {role!r}")
    ae, stats, ae_manifest = load_autoencoder(ae_checkpoint)
    if ae.cfg.to_dict() != cfg.autoencoder.to_dict():
        raise ConfigError("autoencoder checkpoint geometry differs from the run config")
    if cfg.denoiser.latent_channels != ae.cfg.c:
        raise ConfigError("denoiser latent channels do not match the autoencoder")
    target = prepare_run_dir(run_dir, resume, dm_dir_name(role))
    _seed_all(cfg.run.seed + 101)
    dataset = _dm_dataset(cfg, role)
    rng = np.random.default_rng([cfg.run.seed, 2, ("unconditional", "prediction", "interpolation").index(role)])
    gen = torch.Generator().manual_seed(cfg.run.seed + 202)
    schedule = make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end,
                                    cfg.schedule.sigma_mode)
    net = model if model is not None else Denoiser3d(cfg.denoiser)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=tc.lr) if params else None
    ema = EMA(net, tc.ema_decay) if tc.use_ema and params else None
    step, trace = 0, []
    if init_from is not None:
        src_manifest, src_payload = ckpt.load_checkpoint(init_from)
        ckpt.load_strict(net, src_payload["model"], cfg.denoiser.to_dict(),
                         src_manifest["config"]["denoiser"], "denoiser")
        if ema is not None:
            ema.model.load_state_dict(src_payload.get("ema") or src_payload["model"])
    if resume and target.exists():
        manifest, payload = ckpt.load_checkpoint(target)
        ckpt.load_strict(net, payload["model"], cfg.denoiser.to_dict(),
                         manifest["config"]["denoiser"], "denoiser")
        if opt is not None:
            opt.load_state_dict(payload["opt"])
        if ema is not None and payload.get("ema") is not None:
            ema.model.load_state_dict(payload["ema"])
        rng.bit_generator.state = payload["np_rng"]
        gen.set_state(payload["torch_gen"])
        step = manifest["step"]
        trace = list(payload.get("trace", []))
        resumed_modes = manifest.get("mode_counts", {})
    else:
        resumed_modes = {}

    l = tc.interp_window if role == "interpolation" else cfg.latent_window
    cc = cfg.conditioning
    uncond_prob = {"prediction": cc.prediction_uncond_prob,
                   "interpolation": cc.interpolation_uncond_prob}.get(role)
    steplog = StepLog(Path(run_dir) / f"dm_{role}_train_log.jsonl")
    modes = Counter(resumed_modes)
    last = tc.steps if max_steps is None else min(tc.steps, max_steps)

    def save():
        payload = {"model": net.state_dict(), "ema": ema.model.state_dict() if ema else None,
                   "opt": opt.state_dict() if opt else None, "np_rng": rng.bit_generator.state,
                   "torch_gen": gen.get_state(), "trace": trace}
        manifest = {"kind": "diffusion", "role": role, "step": step, "config": cfg.to_dict(),
                    "schedule": schedule.params(), "latent_stats": stats.to_dict(),
                    "latent_window": l, "latent_stride": 1 if role == "interpolation" else tc.latent_stride,
                    "ae_payload_sha256": ae_manifest["payload_sha256"],
                    "loss_tail": trace[-100:], "mode_counts": dict(modes),
                    "complete": step >= tc.steps}
        ckpt.save_checkpoint(target, payload, manifest)

    net.train()
    while step < last:
        step += 1
        z0 = _latent_batch(cfg, dataset, ae, stats, rng, role)
        specs = [sample_training_mode(role, rng, l, cc.k_choices, cfg.long_video.sparse_stride,
                                      cc.s_max, uncond_prob) for _ in range(z0.shape[0])]
        step_modes = Counter(s.mode for s in specs)
        modes.update(step_modes)
        loss = training_loss(net, z0, specs, schedule, gen, s_max=cc.s_max)
        if not torch.isfinite(loss):
            raise NumericalFault(f"diffusion loss is {loss.item()} at step {step}; "
                                 f"last good checkpoint kept in {target}")
        if opt is not None:
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
            opt.step()
            if ema is not None:
                ema.update(net)
        trace.append(float(loss.detach()))
        if step % tc.log_every == 0 or step == last:
            steplog.write({"step": step, "loss": float(loss.detach()), "modes": dict(step_modes)})
        if step % tc.checkpoint_every == 0 and step < last:
            save()
    save()
    return target
