"""Gaussian diffusion on latent videos: schedules, forward noising, DDPM/DDIM.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar(0) = 1``.
Functions take ``t`` as a Python int or a ``(B,)`` integer tensor.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericalFault

log = logging.getLogger(__name__)

SIGMA_MODES = ("beta", "beta_squared")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    sigma_mode: str = "beta"
    beta_start: float = None
    beta_end: float = None

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("beta must be a non-empty vector")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ConfigError("every beta must lie in (0, 1)")
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        # index 0 holds alpha_bar(0) = 1
        object.__setattr__(self, "_alpha_bar0", np.concatenate([[1.0], alpha_bar]))

    @property
    def T(self):
        return self.beta.size

    def alpha_bar_at(self, t):
        """``alpha_bar(t)`` for ``0 <= t <= T`` (numpy, float64)."""
        return self._alpha_bar0[np.asarray(t)]

    def variance(self, t):
        b = self.beta[np.asarray(t) - 1]
        return b if self.sigma_mode == "beta" else b**2

    def snr(self):
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def params(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "sigma_mode": self.sigma_mode}


def make_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02, sigma_mode="beta"):
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(beta, sigma_mode, float(beta_start), float(beta_end))


def schedule_from_params(params):
    return make_linear_schedule(params["T"], params["beta_start"], params["beta_end"],
                                params.get("sigma_mode", "beta"))


def _check_t(t, lo, hi):
    tt = t if not torch.is_tensor(t) else t.detach().cpu().numpy()
    tt = np.asarray(tt)
    if tt.size and (tt.min() < lo or tt.max() > hi):
        raise ValueError(f"timestep outside [{lo}, {hi}]: {tt.min()}..{tt.max()}")
    return tt


def _coef(values, x):
    """Broadcast per-example coefficients against ``x`` of shape ``(B, ...)``."""
    v = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=x.dtype, device=x.device)
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (x.ndim - 1)))


def q_sample(z0, t, eps, schedule):
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``."""
    tt = _check_t(t, 1, schedule.T)
    if eps.shape != z0.shape:
        raise ValueError("eps and z0 shapes differ")
    ab = schedule.alpha_bar_at(tt)
    return _coef(np.sqrt(ab), z0) * z0 + _coef(np.sqrt(1.0 - ab), z0) * eps


def predict_mu(z_t, t, eps_hat, schedule):
    """Posterior mean from a noise prediction: ``(z_t - beta_t / sqrt(1-ab_t) eps) / sqrt(alpha_t)``."""
    tt = _check_t(t, 1, schedule.T)
    if eps_hat.shape != z_t.shape:
        raise ValueError("eps_hat and z_t shapes differ")
    beta = schedule.beta[tt - 1]
    alpha = schedule.alpha[tt - 1]
    ab = schedule.alpha_bar_at(tt)
    return _coef(1.0 / np.sqrt(alpha), z_t) * (z_t - _coef(beta / np.sqrt(1.0 - ab), z_t) * eps_hat)


def chain_generators(seed, n):
    """One independent torch generator per chain, derived from ``(seed, chain)``."""
    gens = []
    for i in range(n):
        state = np.random.SeedSequence([int(seed), i]).generate_state(2, dtype=np.uint32)
        g = torch.Generator()
        g.manual_seed(int(state[0]) << 32 | int(state[1]))
        gens.append(g)
    return gens


def randn(shape, generator=None, dtype=torch.float32):
    """Standard normal draws; a list of generators gives one per leading index."""
    if isinstance(generator, (list, tuple)):
        if len(generator) != shape[0]:
            raise ValueError("need one generator per chain")
        return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in generator])
    return torch.randn(shape, generator=generator, dtype=dtype)


def ddpm_step(z_t, t, eps_hat, schedule, generator=None):
    """One ancestral step; no noise is added at ``t = 1``."""
    mu = predict_mu(z_t, t, eps_hat, schedule)
    tt = np.asarray(_check_t(t, 1, schedule.T))
    if np.all(tt == 1):
        return mu
    sigma = np.sqrt(schedule.variance(tt)) * (tt > 1)
    xi = randn(tuple(z_t.shape), generator, z_t.dtype)
    return mu + _coef(sigma, z_t) * xi


def ddim_step(z_t, t, t_prev, eps_hat, eta, schedule, generator=None):
    if not 0 <= t_prev < t <= schedule.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab_t = float(schedule.alpha_bar_at(t))
    ab_prev = float(schedule.alpha_bar_at(t_prev))
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    direction = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = np.sqrt(ab_prev) * z0_hat + direction * eps_hat
    if sigma > 0:
        out = out + sigma * randn(tuple(z_t.shape), generator, z_t.dtype)
    return out


def ddim_timesteps(T, steps):
    """Evenly spaced, strictly increasing timesteps ending at ``T``."""
    if not 1 <= steps <= T:
        raise ConfigError(f"DDIM steps must lie in [1, T={T}], got {steps}")
    ts = np.round(np.linspace(0, T, steps + 1)[1:]).astype(np.int64)
    assert ts[-1] == T and np.all(np.diff(ts) > 0)
    return ts


@dataclass
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 100
    eta: float = 0.0
    guidance_w: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ConfigError(f"sampler kind must be ddpm or ddim, got {self.kind!r}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("sampler steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


def _check_finite(x, what):
    if not torch.isfinite(x).all():
        raise NumericalFault(f"non-finite values in {what}")


def predict_eps(model, z_t, t, cond=None, guidance_w=0.0):
    """Noise prediction for ``z_t``, optionally guided by the unconditional branch.

    ``cond`` is a :class:`latentvid.conditioning.Condition` or ``None`` (all-zero
    mask). With ``guidance_w != 0`` the network is also run with an all-zero
    mask and the two predictions are combined by :func:`guided_eps`.
    """
    from .conditioning import apply_condition, empty_mask
    from .long_video import guided_eps

    b = z_t.shape[0]
    t_vec = torch.full((b,), int(t), dtype=torch.long) if not torch.is_tensor(t) else t
    if cond is None:
        return model(apply_condition(z_t, z_t, empty_mask(z_t)), t_vec)
    eps_c = model(apply_condition(z_t, cond.source, cond.mask), t_vec)
    if guidance_w == 0:
        return eps_c
    eps_u = model(apply_condition(z_t, z_t, empty_mask(z_t)), t_vec)
    return guided_eps(eps_c, eps_u, guidance_w)


@torch.no_grad()
def sample(model, shape, cond=None, sampler_cfg=None, schedule=None, generator=None,
           callback=None):
    """Draw latents of ``shape`` (normalized space) by iterating the reverse chain.

    Chain noise comes from ``generator`` when given, otherwise from per-chain
    generators derived from ``sampler_cfg.seed``.
    """
    cfg = sampler_cfg or SamplerConfig()
    if schedule is None:
        schedule = make_linear_schedule()
    if cond is not None and cond.source.shape != tuple(shape):
        raise ValueError(f"condition source shape {tuple(cond.source.shape)} != {tuple(shape)}")
    dtype = next(model.parameters()).dtype if hasattr(model, "parameters") and any(
        True for _ in model.parameters()) else torch.float32
    gens = generator if generator is not None else chain_generators(cfg.seed, shape[0])
    z = randn(tuple(shape), gens, dtype)
    if cfg.kind == "ddpm":
        if cfg.steps not in (None, schedule.T):
            raise ConfigError("ddpm sampling runs every timestep; set steps = T")
        for t in range(schedule.T, 0, -1):
            eps = predict_eps(model, z, t, cond, cfg.guidance_w)
            _check_finite(eps, f"model output at t={t}")
            z = ddpm_step(z, t, eps, schedule, gens)
            if callback is not None:
                callback(t, z)
    else:
        ts = ddim_timesteps(schedule.T, cfg.steps or schedule.T)
        for i in range(len(ts) - 1, -1, -1):
            t = int(ts[i])
            t_prev = int(ts[i - 1]) if i > 0 else 0
            eps = predict_eps(model, z, t, cond, cfg.guidance_w)
            _check_finite(eps, f"model output at t={t}")
            z = ddim_step(z, t, t_prev, eps, cfg.eta, schedule, gens)
            if callback is not None:
                callback(t, z)
    return z


def training_loss(model, z0, cond, schedule, generator=None, s_max=None):
    """Simple noise-prediction loss ``mean((eps_hat - eps)^2)`` on a batch.

    ``cond`` is one :class:`~latentvid.conditioning.ConditionSpec` for the whole
    batch or a list with one spec per example. Random draws, in order: ``t``
    uniform on ``1..T`` per example, ``eps``, then the perturbation noise of the
    conditional frames.
    """
    from .conditioning import ConditionSpec, apply_condition, batch_masks, perturb_condition

    b = z0.shape[0]
    specs = [cond] * b if isinstance(cond, ConditionSpec) else list(cond)
    if len(specs) != b:
        raise ValueError("need one ConditionSpec per example")
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, schedule)
    mask = batch_masks(specs, z0)
    s = np.array([spec.perturb_s for spec in specs])
    limit = s_max if s_max is not None else max(max(sp.s_max for sp in specs), 0)
    source = perturb_condition(z0, s, limit, schedule, generator)
    x_in = apply_condition(z_t, source, mask)
    if getattr(model, "is_noise_oracle", False):
        eps_hat = model(x_in, t, noise=eps)
    else:
        eps_hat = model(x_in, t)
    if eps_hat.shape != eps.shape:
        raise ValueError(f"model output shape {tuple(eps_hat.shape)} != {tuple(eps.shape)}")
    _check_finite(eps_hat, "model output during training")
    return torch.mean((eps_hat - eps) ** 2)
