"""3D convolutional video autoencoder, patch discriminator and latent statistics.

All convolutions pad by edge replication on the time, height and width axes,
and no layer normalizes across positions, so the encoder is shift-equivariant
in time away from the clip borders. The latent space carries no KL or VQ
penalty; it is standardized afterwards with :class:`LatentStats`.
"""
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DegenerateLatentError, ShapeError


def _log2_exact(n, name):
    k = int(round(math.log2(n))) if n >= 1 else -1
    if k < 0 or 2**k != n:
        raise ConfigError(f"{name} must be a power of two, got {n}")
    return k


@dataclass
class AEConfig:
    f_s: int = 8
    f_t: int = 4
    c: int = 4
    base_width: int = 32
    channel_mult: tuple = (1, 2, 2)
    n_down: int = None
    adv_weight: float = 0.1
    mse_weight: float = 1.0
    perceptual_weight: float = 1.0
    perceptual: str = "off"
    adv_warmup: int = 5000
    disc_width: int = 32

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        n_s = _log2_exact(self.f_s, "f_s")
        n_t = _log2_exact(self.f_t, "f_t")
        if self.n_down is None:
            self.n_down = n_s
        if self.n_down != n_s:
            raise ConfigError(f"n_down={self.n_down} inconsistent with f_s={self.f_s}")
        if n_t > n_s:
            raise ConfigError("temporal factor may not exceed the spatial factor")
        if self.c < 1:
            raise ConfigError("latent channels c must be >= 1")
        if len(self.channel_mult) != self.n_down:
            raise ConfigError(
                f"channel_mult needs {self.n_down} entries for f_s={self.f_s}, "
                f"got {len(self.channel_mult)}"
            )
        if self.adv_weight < 0:
            raise ConfigError("adv_weight must be >= 0")

    @property
    def temporal_downs(self):
        return _log2_exact(self.f_t, "f_t")

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d


class RepConv3d(nn.Module):
    """Conv3d preceded by replicate padding so output size is ``ceil(in / stride)``."""

    def __init__(self, cin, cout, kernel=3, stride=1):
        super().__init__()
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
        self.kernel, self.stride = kernel, stride
        pt, ph, pw = (k // 2 for k in kernel)
        self.pad = (pw, pw, ph, ph, pt, pt)
        self.conv = nn.Conv3d(cin, cout, kernel, stride=stride)

    def forward(self, x):
        if any(self.pad):
            x = F.pad(x, self.pad, mode="replicate")
        return self.conv(x)

    def temporal_ops(self):
        return [("conv", self.kernel[0], self.stride[0])]


class ChannelNorm(nn.Module):
    """Layer norm over channels at each voxel; never mixes positions."""

    def __init__(self, ch, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(ch))
        self.bias = nn.Parameter(torch.zeros(ch))
        self.eps = eps

    def forward(self, x):
        x = F.layer_norm(x.movedim(1, -1), (x.shape[1],), self.weight, self.bias, self.eps)
        return x.movedim(-1, 1)


class ResBlock3d(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.norm1 = ChannelNorm(cin)
        self.conv1 = RepConv3d(cin, cout)
        self.norm2 = ChannelNorm(cout)
        self.conv2 = RepConv3d(cout, cout)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h

    def temporal_ops(self):
        # both convs sit on the residual branch; the skip is pointwise
        return self.conv1.temporal_ops() + self.conv2.temporal_ops()


class Upsample3d(nn.Module):
    def __init__(self, ch, temporal):
        super().__init__()
        self.factor = (2 if temporal else 1, 2, 2)
        self.conv = RepConv3d(ch, ch)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=self.factor, mode="nearest")
        return self.conv(x)

    def temporal_ops(self):
        return [("up", self.factor[0])] + self.conv.temporal_ops()


def _chain_ops(layers):
    ops = []
    for layer in layers:
        ops.extend(layer.temporal_ops())
    return ops


def temporal_support(ops, lo, hi):
    """Input frame interval feeding output frames ``[lo, hi]`` through ``ops``.

    Indices may fall outside the input clip; those positions see replicated
    border frames.
    """
    for op in reversed(ops):
        if op[0] == "conv":
            _, k, s = op
            r = k // 2
            lo, hi = s * lo - r, s * hi + r
        else:
            f = op[1]
            lo, hi = math.floor(lo / f), math.floor(hi / f)
    return lo, hi


class Encoder3d(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        w = cfg.base_width
        chans = [w * m for m in cfg.channel_mult]
        layers = [RepConv3d(3, chans[0])]
        cin = chans[0]
        for i, ch in enumerate(chans):
            temporal = i < cfg.temporal_downs
            layers.append(ResBlock3d(cin, ch))
            layers.append(RepConv3d(ch, ch, 3, stride=(2 if temporal else 1, 2, 2)))
            cin = ch
        layers.append(ResBlock3d(cin, cin))
        self.body = nn.ModuleList(layers)
        self.norm_out = ChannelNorm(cin)
        self.out = RepConv3d(cin, cfg.c)

    def forward(self, x):
        for layer in self.body:
            x = layer(x)
        return self.out(F.silu(self.norm_out(x)))

    def temporal_ops(self):
        return _chain_ops(list(self.body) + [self.out])


class Decoder3d(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        w = cfg.base_width
        chans = [w * m for m in cfg.channel_mult]
        top = chans[-1]
        layers = [RepConv3d(cfg.c, top), ResBlock3d(top, top)]
        cin = top
        n = len(chans)
        for i in reversed(range(n)):
            ch = chans[i]
            temporal = i < cfg.temporal_downs
            layers.append(Upsample3d(cin, temporal))
            layers.append(ResBlock3d(cin, ch))
            cin = ch
        self.body = nn.ModuleList(layers)
        self.norm_out = ChannelNorm(cin)
        self.out = RepConv3d(cin, 3)

    def forward(self, z):
        for layer in self.body:
            z = layer(z)
        return self.out(F.silu(self.norm_out(z)))

    def temporal_ops(self):
        return _chain_ops(list(self.body) + [self.out])


class AutoEncoder3d(nn.Module):
    """Video encoder/decoder pair operating on ``(B, C, L, H, W)`` tensors."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder3d(cfg)
        self.decoder = Decoder3d(cfg)

    def check_video(self, x):
        if x.ndim != 5 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, L, H, W) video, got {tuple(x.shape)}")
        _, _, L, H, W = x.shape
        for axis, n, f in (("H", H, self.cfg.f_s), ("W", W, self.cfg.f_s), ("L", L, self.cfg.f_t)):
            if n % f:
                raise ShapeError(f"axis {axis}={n} is not divisible by factor {f}")

    def encode(self, x):
        self.check_video(x)
        return self.encoder(x)

    def decode_raw(self, z):
        if z.ndim != 5 or z.shape[1] != self.cfg.c:
            raise ShapeError(
                f"expected (B, {self.cfg.c}, l, h, w) latent, got {tuple(z.shape)}"
            )
        return self.decoder(z)

    def decode(self, z):
        return self.decode_raw(z).clamp(-1.0, 1.0)

    def forward(self, x):
        return self.decode_raw(self.encode(x))


def encode(ae, video):
    """Encode one ``(H, W, L, 3)`` array to an ``(h, w, l, c)`` latent array."""
    from .data import from_model_layout, to_model_layout

    x = to_model_layout(video).to(next(ae.parameters()).dtype)
    with torch.no_grad():
        z = ae.encode(x)
    return from_model_layout(z)[0]


def decode(ae, latent):
    """Decode one ``(h, w, l, c)`` latent array to an ``(H, W, L, 3)`` video."""
    from .data import from_model_layout, to_model_layout

    z = to_model_layout(latent).to(next(ae.parameters()).dtype)
    with torch.no_grad():
        x = ae.decode(z)
    return from_model_layout(x)[0]


class PatchDiscriminator3d(nn.Module):
    """Four-layer 3D patch discriminator returning per-patch realism logits.

    Spatial strides are 2, 2, 2, 1 and temporal strides 2, 2, 1, 1, so a
    ``(B, 3, 16, 64, 64)`` input yields ``(B, 1, 4, 8, 8)`` logits.
    """

    def __init__(self, width=32):
        super().__init__()
        strides = [(2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 1, 1)]
        chans = [3, width, width * 2, width * 4, 1]
        self.convs = nn.ModuleList(
            nn.Conv3d(chans[i], chans[i + 1], 3, stride=strides[i], padding=1)
            for i in range(4)
        )

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, 0.2)
        return x


def discriminate(disc, x):
    return disc(x)


_PERCEPTUAL_PLUGINS = {}


def register_perceptual(name, fn):
    """Register ``fn(x, x_rec) -> scalar tensor`` as a perceptual loss plugin."""
    _PERCEPTUAL_PLUGINS[name] = fn


def reconstruction_loss(x, x_rec, cfg):
    if x.shape != x_rec.shape:
        raise ShapeError(f"reconstruction shapes differ: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    mse = torch.mean((x - x_rec) ** 2)
    if cfg.perceptual == "off":
        perceptual = torch.zeros((), dtype=mse.dtype)
    else:
        try:
            fn = _PERCEPTUAL_PLUGINS[cfg.perceptual]
        except KeyError:
            raise ConfigError(f"perceptual plugin {cfg.perceptual!r} is not registered") from None
        perceptual = fn(x, x_rec)
    return {"mse": mse, "perceptual": perceptual}


def hinge_d_loss(logits_real, logits_fake):
    return torch.mean(F.relu(1.0 - logits_real)) + torch.mean(F.relu(1.0 + logits_fake))


def hinge_g_loss(logits_fake):
    return -torch.mean(logits_fake)


def ae_adversarial_losses(disc, real, fake, mode):
    if mode == "discriminator":
        return hinge_d_loss(disc(real), disc(fake.detach()))
    if mode == "generator":
        return hinge_g_loss(disc(fake))
    raise ValueError(f"mode must be 'generator' or 'discriminator', got {mode!r}")


def generator_objective(ae, disc, x, use_adv=True):
    """Weighted autoencoder objective: MSE + perceptual + adversarial terms."""
    cfg = ae.cfg
    x_rec = ae(x)
    rec = reconstruction_loss(x, x_rec, cfg)
    total = cfg.mse_weight * rec["mse"] + cfg.perceptual_weight * rec["perceptual"]
    adv = torch.zeros((), dtype=total.dtype)
    if use_adv and disc is not None and cfg.adv_weight > 0:
        adv = hinge_g_loss(disc(x_rec))
        total = total + cfg.adv_weight * adv
    return total, {"mse": rec["mse"], "perceptual": rec["perceptual"], "adv": adv, "x_rec": x_rec}


@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ShapeError("mean and std lengths differ")
        if np.any(self.std <= 0):
            raise DegenerateLatentError("latent std must be positive in every channel")

    @property
    def channels(self):
        return self.mean.size

    @classmethod
    def from_scale_factor(cls, scale, channels):
        """Scalar rescaling ``z * scale`` expressed as stats ``(0, 1/scale)``."""
        return cls(np.zeros(channels), np.full(channels, 1.0 / scale), 0)

    def to_dict(self):
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "sample_count": int(self.sample_count),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]), int(d["sample_count"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _stats_view(stats, z, channel_axis):
    if z.shape[channel_axis] != stats.channels:
        raise ShapeError(
            f"latent has {z.shape[channel_axis]} channels, stats have {stats.channels}"
        )
    shape = [1] * z.ndim
    shape[channel_axis] = stats.channels
    if torch.is_tensor(z):
        mean = torch.as_tensor(stats.mean, dtype=z.dtype, device=z.device).reshape(shape)
        std = torch.as_tensor(stats.std, dtype=z.dtype, device=z.device).reshape(shape)
    else:
        mean, std = stats.mean.reshape(shape), stats.std.reshape(shape)
    return mean, std


def normalize(z, stats, channel_axis=1):
    mean, std = _stats_view(stats, z, channel_axis)
    return (z - mean) / std


def denormalize(z, stats, channel_axis=1):
    mean, std = _stats_view(stats, z, channel_axis)
    return z * std + mean


class RunningMoments:
    """Per-channel mean/variance merged batch by batch (Chan et al. pairwise update)."""

    def __init__(self, channels):
        self.n = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, z, channel_axis=1):
        z = z.detach().cpu().numpy() if torch.is_tensor(z) else np.asarray(z)
        flat = np.moveaxis(z.astype(np.float64), channel_axis, 0).reshape(z.shape[channel_axis], -1)
        nb = flat.shape[1]
        if nb == 0:
            return
        mb = flat.mean(axis=1)
        m2b = ((flat - mb[:, None]) ** 2).sum(axis=1)
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta**2 * (self.n * nb / n)
        self.n = n

    def merge(self, other):
        if other.n == 0:
            return
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.n / n)
        self.m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        self.n = n

    def finalize(self, sample_count, eps=1e-8):
        std = np.sqrt(self.m2 / self.n)
        if np.any(std < eps):
            bad = np.flatnonzero(std < eps).tolist()
            raise DegenerateLatentError(f"latent std below {eps} in channels {bad}")
        return LatentStats(self.mean.copy(), std, sample_count)


def latent_stats_from_batches(batches, channel_axis=1):
    moments = None
    count = 0
    for z in batches:
        if moments is None:
            moments = RunningMoments(z.shape[channel_axis])
        moments.update(z, channel_axis)
        count += z.shape[0]
    if moments is None:
        raise ValueError("no latent batches given")
    return moments.finalize(count)


def compute_latent_stats(dataset, encoder, n_clips, seed=0, batch_size=16):
    """Per-channel population mean/std of encoded clips drawn from ``dataset``.

    ``encoder`` is an :class:`AutoEncoder3d` or any callable mapping a
    ``(B, 3, L, H, W)`` tensor to ``(B, c, l, h, w)`` latents. Clips come from
    :func:`latentvid.data.sample_clip` with ``np.random.default_rng(seed)``.
    """
    from .data import sample_batch, to_model_layout

    if n_clips < 2:
        raise ValueError("n_clips must be >= 2")
    fn = encoder.encode if isinstance(encoder, AutoEncoder3d) else encoder
    dtype = next(encoder.parameters()).dtype if isinstance(encoder, nn.Module) else torch.float32
    rng = np.random.default_rng(seed)

    def batches():
        remaining = n_clips
        while remaining > 0:
            b = min(batch_size, remaining)
            x = to_model_layout(sample_batch(dataset, rng, b)).to(dtype)
            with torch.no_grad():
                yield fn(x)
            remaining -= b

    return latent_stats_from_batches(batches())
