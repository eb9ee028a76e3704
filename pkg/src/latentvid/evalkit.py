"""Reconstruction and distribution metrics for generated videos.

Distribution distances use features from the project's own 3D encoder
(mean-pooled latents) in place of a pretrained video classifier, so values
are comparable between runs of this package only.
"""
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericalFault, ShapeError


def psnr(x, y):
    """PSNR in dB for signals in ``[-1, 1]`` (peak-to-peak 2); ``inf`` when identical."""
    x = np.asarray(x.detach().cpu() if torch.is_tensor(x) else x, dtype=np.float64)
    y = np.asarray(y.detach().cpu() if torch.is_tensor(y) else y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr shapes differ: {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(4.0 / mse))


def encoder_feature_fn(ae):
    """Clip -> c-dimensional feature: encoder latents averaged over time and space."""
    dtype = next(ae.parameters()).dtype

    def fn(clips):
        with torch.no_grad():
            z = ae.encode(clips.to(dtype))
        return z.mean(dim=(2, 3, 4)).double().numpy()

    return fn


def clip_features(videos, feature_fn, batch_size=32):
    """Feature matrix ``(n_videos, d)`` for a ``(N, 3, L, H, W)`` batch of clips."""
    videos = torch.as_tensor(videos)
    rows = []
    for start in range(0, videos.shape[0], batch_size):
        rows.append(np.asarray(feature_fn(videos[start : start + batch_size]), dtype=np.float64))
    feats = np.concatenate(rows, axis=0)
    bad = ~np.isfinite(feats).all(axis=1)
    if bad.any():
        raise NumericalFault(f"non-finite features for clip {int(np.flatnonzero(bad)[0])}")
    return feats


def _sym_sqrt_psd(a):
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(f_real, f_fake, ridge=1e-6):
    """``|mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^(1/2))`` with ridge-regularized covariances.

    The trace of the product square root is taken from the eigenvalues of the
    symmetric matrix ``S_r^(1/2) S_f S_r^(1/2)``, which shares its spectrum with
    ``S_r S_f``.
    """
    f_real = np.atleast_2d(np.asarray(f_real, dtype=np.float64))
    f_fake = np.atleast_2d(np.asarray(f_fake, dtype=np.float64))
    if f_real.shape[1] != f_fake.shape[1]:
        raise ShapeError("feature dimensions differ")
    d = f_real.shape[1]
    mu_r, mu_f = f_real.mean(axis=0), f_fake.mean(axis=0)
    eye = np.eye(d) * ridge
    s_r = np.atleast_2d(np.cov(f_real, rowvar=False, bias=False)) + eye
    s_f = np.atleast_2d(np.cov(f_fake, rowvar=False, bias=False)) + eye
    root_r = _sym_sqrt_psd(s_r)
    middle = root_r @ s_f @ root_r
    vals = np.linalg.eigvalsh((middle + middle.T) / 2)
    if vals.min() < -1e-8 * max(1.0, abs(vals.max())):
        cond = vals.max() / max(abs(vals.min()), 1e-300)
        raise NumericalFault(
            f"covariance product not PSD after ridge (min eigenvalue {vals.min():.3e}, "
            f"condition {cond:.3e})"
        )
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_r - mu_f
    value = diff @ diff + np.trace(s_r) + np.trace(s_f) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def polynomial_kernel(a, b):
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kernel_distance(f_real, f_fake):
    """Unbiased MMD^2 with the cubic polynomial kernel ``(x.y/d + 1)^3``."""
    x = np.atleast_2d(np.asarray(f_real, dtype=np.float64))
    y = np.atleast_2d(np.asarray(f_fake, dtype=np.float64))
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("kernel distance needs at least two rows per set")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * kxy.mean())


@dataclass
class MetricSeries:
    clip_index: list
    value: list
    clip_len: int = 16
    n_samples: int = 0
    metric: str = "frechet"
    extra: dict = field(default_factory=dict)

    def table(self):
        lines = ["clip_index\tvalue"]
        lines += [f"{i}\t{v:.6g}" for i, v in zip(self.clip_index, self.value)]
        return "\n".join(lines) + "\n"

    def records(self):
        return [
            {"clip_index": int(i), "start_frame": int(i) * self.clip_len, "value": float(v),
             "metric": self.metric, "n_samples": self.n_samples}
            for i, v in zip(self.clip_index, self.value)
        ]

    def write(self, table_path, records_path):
        with open(table_path, "w") as fh:
            fh.write(self.table())
        with open(records_path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def plot(self, path, label=None):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3))
        frames = [i * self.clip_len for i in self.clip_index]
        ax.plot(frames, self.value, marker="o", label=label)
        ax.set_xlabel("start frame")
        ax.set_ylabel(f"{self.metric} distance")
        if label:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)


def split_clips(videos, clip_len):
    """``(N, C, L, H, W)`` -> list of ``L // clip_len`` tensors ``(N, C, clip_len, H, W)``."""
    L = videos.shape[2]
    if L % clip_len:
        raise ShapeError(f"video length {L} is not a multiple of clip_len {clip_len}")
    return [videos[:, :, i * clip_len : (i + 1) * clip_len] for i in range(L // clip_len)]


def degradation_curve(long_videos, real_reference, clip_len, feature_fn):
    """Distance per non-overlapping clip index of the generated videos.

    ``real_reference`` either has the same length as ``long_videos`` (clip
    ``i`` is compared with reference clip ``i``) or is exactly ``clip_len``
    frames long (one reference pool for every index). Fréchet distance is
    used when both sets have more rows than feature dimensions; otherwise
    the kernel distance, with a warning.
    """
    gen_clips = split_clips(torch.as_tensor(long_videos), clip_len)
    ref = torch.as_tensor(real_reference)
    if ref.shape[0] == 0 or gen_clips[0].shape[0] == 0:
        raise ValueError("empty video set")
    if ref.shape[2] == long_videos.shape[2]:
        ref_feats = [clip_features(c, feature_fn) for c in split_clips(ref, clip_len)]
    elif ref.shape[2] == clip_len:
        ref_feats = [clip_features(ref, feature_fn)] * len(gen_clips)
    else:
        raise ShapeError(
            f"reference length {ref.shape[2]} must equal the generated length or clip_len"
        )
    values, metric = [], "frechet"
    for i, clips in enumerate(gen_clips):
        gen = clip_features(clips, feature_fn)
        d = gen.shape[1]
        if min(gen.shape[0], ref_feats[i].shape[0]) < d + 1:
            if metric == "frechet":
                warnings.warn(
                    f"{min(gen.shape[0], ref_feats[i].shape[0])} samples cannot support a "
                    f"{d}-dim covariance; using kernel distance"
                )
            metric = "kernel"
            values.append(kernel_distance(ref_feats[i], gen))
        else:
            values.append(frechet_distance(ref_feats[i], gen))
    return MetricSeries(list(range(len(values))), values, clip_len, gen_clips[0].shape[0], metric)
