"""Forward noising process, noise schedule bookkeeping, and ancestral sampling."""

from dataclasses import dataclass, field

import numpy as np

OMEGA_MODES = ("constant", "snr")
DEFAULT_OMEGA_CLIP = 5.0


class NumericDivergenceError(ArithmeticError):
    """Non-finite values encountered during sampling or loss evaluation."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise coefficients for a discrete-time diffusion process.

    ``alpha_bar[t]`` is the cumulative product of (1 - beta[s]) for s <= t and
    ``lambda_log_snr[t] = ln(alpha_bar[t] / (1 - alpha_bar[t]))``; both are
    strictly decreasing in t.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    lambda_log_snr: np.ndarray
    omega_mode: str = "constant"
    omega_clip: float = field(default=DEFAULT_OMEGA_CLIP)


def make_schedule(T, beta_start=1e-4, beta_end=0.02, omega_mode="constant",
                  omega_clip=DEFAULT_OMEGA_CLIP):
    """Build a linear-beta schedule with T steps.

    Raises ValueError unless 0 < beta_start <= beta_end < 1 and T >= 1.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if omega_mode not in OMEGA_MODES:
        raise ValueError(f"omega_mode must be one of {OMEGA_MODES}, got {omega_mode!r}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    lam = np.log(alpha_bar) - np.log1p(-alpha_bar)
    return DiffusionSchedule(T=int(T), beta=beta, alpha_bar=alpha_bar,
                             lambda_log_snr=lam, omega_mode=omega_mode,
                             omega_clip=float(omega_clip))


def _check_t(sched, t):
    if not 0 <= t < sched.T:
        raise ValueError(f"step index {t} out of range [0, {sched.T})")


def q_sample(x0, t, eps, sched):
    """Noise x0 to step t: sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps."""
    _check_t(sched, t)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def omega(sched, t):
    """Loss weight at step t: 1.0 in constant mode, clipped SNR in snr mode."""
    _check_t(sched, t)
    if sched.omega_mode == "constant":
        return 1.0
    return float(min(np.exp(sched.lambda_log_snr[t]), sched.omega_clip))


def omega_vector(sched, t_arr):
    """Vectorized ``omega`` over an array of step indices."""
    t_arr = np.asarray(t_arr)
    if t_arr.size and (t_arr.min() < 0 or t_arr.max() >= sched.T):
        raise ValueError("step index out of range")
    if sched.omega_mode == "constant":
        return np.ones(t_arr.shape)
    return np.minimum(np.exp(sched.lambda_log_snr[t_arr]), sched.omega_clip)


def ddpm_sample_batch(params, encodings, sched, seeds):
    """Ancestral sampling for a batch of caption encodings.

    Each row of ``encodings`` gets its own generator seeded from ``seeds``, so
    results are independent of how samples are batched. Returns an array of
    images clamped to [-1, 1].

    Raises NumericDivergenceError naming the offending step if any
    intermediate becomes non-finite.
    """
    from . import net  # local import: net depends on this module for schedules

    encodings = np.asarray(encodings)
    n = encodings.shape[0]
    if len(seeds) != n:
        raise ValueError("need one seed per encoding")
    gens = [np.random.default_rng(np.random.SeedSequence(int(s) & 0xFFFFFFFFFFFFFFFF))
            for s in seeds]
    cfg = params.cfg
    shape = (cfg.grid, cfg.grid, cfg.channels)
    dtype = params.layers[0][0].dtype
    x = np.stack([g.standard_normal(shape) for g in gens]).astype(dtype)

    alpha = 1.0 - sched.beta
    alpha_bar_prev = np.concatenate([[1.0], sched.alpha_bar[:-1]])
    post_var = (1.0 - alpha_bar_prev) / (1.0 - sched.alpha_bar) * sched.beta

    for t in range(sched.T - 1, -1, -1):
        t_arr = np.full(n, t)
        try:
            eps_hat = net.forward_batch(params, x, t_arr, encodings, sched)
        except NumericDivergenceError as exc:
            raise NumericDivergenceError(f"step t={t}: {exc}") from exc
        ab = sched.alpha_bar[t]
        # posterior mean in denoised form, with the usual clip on the implied
        # clean image to keep model error from compounding
        x0_hat = np.clip((x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -1.0, 1.0)
        mean = (np.sqrt(alpha_bar_prev[t]) * sched.beta[t] * x0_hat
                + np.sqrt(alpha[t]) * (1.0 - alpha_bar_prev[t]) * x) / (1.0 - ab)
        if t > 0:
            z = np.stack([g.standard_normal(shape) for g in gens]).astype(dtype)
            x = mean + np.sqrt(post_var[t]) * z
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise NumericDivergenceError(f"non-finite sample state at step t={t}")
    return np.clip(x, -1.0, 1.0)


def ddpm_sample(params, caption, sched, rng_seed):
    """Sample one image for a caption; deterministic given rng_seed."""
    from . import net

    enc = net.encode_caption(caption).vector
    out = ddpm_sample_batch(params, enc[None, :], sched, [rng_seed])
    return out[0]
