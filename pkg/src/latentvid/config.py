"""Run configuration: one YAML document with nested sections.

Every key can be overridden with ``section.key=value`` strings (values are
parsed as YAML scalars). :meth:`RunConfig.validate` checks cross-module
geometry before any compute starts.
"""
import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .autoencoder import AEConfig
from .data import DatasetSpec
from .denoiser import DenoiserConfig
from .diffusion import SamplerConfig
from .errors import ConfigError

OUTPUT_ROOT_ENV = "LATENTVID_OUTPUT_ROOT"


@dataclass
class AETrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    stats_clips: int = 1024
    stats_batch: int = 32
    log_every: int = 50


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "beta"


@dataclass
class DMTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    use_ema: bool = True
    ema_decay: float = 0.999
    clip_frames: int = 16
    latent_stride: int = 1
    interp_window: int = 5
    log_every: int = 50


@dataclass
class ConditioningConfig:
    s_max: int = 250
    k_choices: list = None
    prediction_uncond_prob: float = 0.5
    interpolation_uncond_prob: float = 0.1


@dataclass
class LongVideoConfig:
    overlap: int = 2
    noise_level: int = 200
    guidance_w: float = 0.0
    sparse_stride: int = 4


@dataclass
class EvalConfig:
    clip_len: int = 16
    n_reference: int = 256
    reference_seed: int = 12345


@dataclass
class RunMeta:
    seed: int = 0
    output_dir: str = "runs/default"


_SECTIONS = {
    "data": DatasetSpec,
    "autoencoder": AEConfig,
    "ae_train": AETrainConfig,
    "schedule": ScheduleConfig,
    "denoiser": DenoiserConfig,
    "dm_train": DMTrainConfig,
    "conditioning": ConditioningConfig,
    "sampler": SamplerConfig,
    "long_video": LongVideoConfig,
    "eval": EvalConfig,
    "run": RunMeta,
}


def _plain(obj):
    d = asdict(obj)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=lambda: DatasetSpec(clip_length=8))
    autoencoder: AEConfig = field(default_factory=AEConfig)
    ae_train: AETrainConfig = field(default_factory=AETrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    dm_train: DMTrainConfig = field(default_factory=DMTrainConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    long_video: LongVideoConfig = field(default_factory=LongVideoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunMeta = field(default_factory=RunMeta)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw or {})
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, typ in _SECTIONS.items():
            section = raw.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(typ)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            if name == "data" and "clip_length" not in section:
                section = dict(section, clip_length=8)
            try:
                kwargs[name] = typ(**section)
            except TypeError as exc:
                raise ConfigError(f"section {name!r}: {exc}") from exc
        return cls(**kwargs)

    def to_dict(self):
        return {name: _plain(getattr(self, name)) for name in _SECTIONS}

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, overrides):
        return RunConfig.from_dict(apply_overrides(self.to_dict(), overrides))

    # derived geometry

    @property
    def latent_window(self):
        return self.dm_train.clip_frames // self.autoencoder.f_t

    def validate(self):
        ae, den, dm = self.autoencoder, self.denoiser, self.dm_train
        h, w = self.data.resolution
        if h % ae.f_s or w % ae.f_s:
            raise ConfigError(f"resolution {h}x{w} not divisible by f_s={ae.f_s}")
        if self.data.clip_length % ae.f_t:
            raise ConfigError(f"AE clip_length {self.data.clip_length} not divisible by f_t={ae.f_t}")
        if den.latent_channels != ae.c:
            raise ConfigError(
                f"denoiser latent_channels={den.latent_channels} != autoencoder c={ae.c}"
            )
        if dm.clip_frames % ae.f_t:
            raise ConfigError(f"dm clip_frames {dm.clip_frames} not divisible by f_t={ae.f_t}")
        l = self.latent_window
        if l < 2:
            raise ConfigError("diffusion window must hold at least two latent frames")
        k = self.long_video.overlap
        if not 0 < k < l:
            raise ConfigError(f"overlap k={k} must satisfy 0 < k < l={l}")
        if self.conditioning.k_choices:
            if any(not 0 < kk < l for kk in self.conditioning.k_choices):
                raise ConfigError(f"k_choices {self.conditioning.k_choices} must lie in 1..{l - 1}")
        stride = self.long_video.sparse_stride
        if stride < 1:
            raise ConfigError("sparse_stride must be >= 1")
        if stride > 1 and (dm.interp_window - 1) % stride:
            raise ConfigError(
                f"interp_window {dm.interp_window} incompatible with sparse_stride {stride}: "
                f"interp_window - 1 must be a multiple of the stride"
            )
        for name, frames in (("latent window", l), ("interp_window", dm.interp_window)):
            if frames > den.max_frames:
                raise ConfigError(f"{name} {frames} exceeds denoiser max_frames {den.max_frames}")
        T = self.schedule.T
        if not 0 <= self.conditioning.s_max <= T:
            raise ConfigError(f"s_max={self.conditioning.s_max} outside 0..T={T}")
        if not 0 <= self.long_video.noise_level <= T:
            raise ConfigError(f"noise_level outside 0..T={T}")
        if self.sampler.steps is not None and self.sampler.steps > T:
            raise ConfigError(f"sampler steps {self.sampler.steps} exceed T={T}")
        if self.eval.clip_len % ae.f_t:
            raise ConfigError(f"eval clip_len {self.eval.clip_len} not divisible by f_t={ae.f_t}")
        if self.data.source == "synthetic-shapes":
            need = self.dm_pixel_span("prediction")
            if self.data.video_length < need:
                raise ConfigError(
                    f"video_length {self.data.video_length} shorter than the {need} frames a "
                    f"diffusion training clip spans"
                )
        return self

    def dm_pixel_frames(self, role):
        """Pixel frames encoded per diffusion training example for ``role``."""
        f_t = self.autoencoder.f_t
        if role == "interpolation":
            return self.dm_train.interp_window * f_t
        return self.latent_window * self.dm_train.latent_stride * f_t

    def dm_pixel_span(self, role):
        return self.dm_pixel_frames(role) * self.data.frame_stride


def _parse_scalar(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from exc


def apply_overrides(raw, overrides):
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = parts
        raw.setdefault(section, {})[name] = _parse_scalar(value)
    return raw


def load_config(path=None, overrides=()):
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid config file {path}: {exc}") from exc
    return RunConfig.from_dict(apply_overrides(raw, overrides))


def resolve_output(path):
    """Relative paths are placed under ``$LATENTVID_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p
