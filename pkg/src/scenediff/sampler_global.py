"""Global diffusion sampler operating directly on metric point coordinates.

The reverse chain can start from an intermediate step t0 built by noising a
duplicated sparse scan, uses classifier-free guidance to blend conditioned
and unconditioned noise predictions, and runs either as stochastic ancestral
steps or as a deterministic multi-step solver in half-log-SNR time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud, duplicate
from .denoiser import Denoiser, DenoiserQuery
from .errors import NumericalError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling hyperparameters.

    t0: step the reverse process starts from (0 is the no-noise boundary).
    gamma: guidance weight blending unconditioned and conditioned predictions.
    k_dup: how many copies of the sparse scan seed the start point.
    steps_fast: number of solver steps for the deterministic sampler.
    """

    t0: int = 300
    gamma: float = 6.0
    k_dup: int = 10
    steps_fast: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.t0 < 0:
            raise ValueError("t0 must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.k_dup < 1:
            raise ValueError("k_dup must be >= 1")
        if self.steps_fast < 1:
            raise ValueError("steps_fast must be >= 1")


def forward_noise(x0: PointCloud, t: int, sched: NoiseSchedule, seed=None) -> PointCloud:
    """Closed-form forward corruption to step t.

    Each point becomes signal_scale * p + noise_scale * eps with i.i.d.
    standard-normal eps per coordinate; t = 0 returns the cloud unchanged.
    """
    sig, noi = sched.scales(t)
    if t == 0:
        return x0
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(x0.points.shape)
    return x0.with_points(sig * x0.points + noi * eps)


def make_start(
    p_s: PointCloud, cfg: SamplerConfig, sched: NoiseSchedule, seed=None
) -> PointCloud:
    """Reverse-chain start: duplicate the preprocessed scan k_dup times, then
    apply forward noise at t0. Output has k_dup * |p_s| points."""
    if len(p_s) == 0:
        raise ValueError("p_s must be non-empty")
    if cfg.t0 > sched.T:
        raise ValueError(f"t0={cfg.t0} exceeds schedule length {sched.T}")
    return forward_noise(duplicate(p_s, cfg.k_dup), cfg.t0, sched, seed)


def guided_noise(
    denoiser: Denoiser, query: DenoiserQuery, gamma: float
) -> PointCloud:
    """Classifier-free guided prediction.

    Evaluates the denoiser with the query's condition and with no condition,
    returning (1 - gamma) * unconditioned + gamma * conditioned. gamma = 1
    collapses to the conditioned branch, gamma = 0 to the unconditioned one.
    """
    if query.condition is None:
        raise ValueError("guided_noise requires a conditioned query")
    uncond = denoiser.predict_noise(
        DenoiserQuery(query.noisy, query.t, condition=None)
    )
    cond = denoiser.predict_noise(query)
    blended = (1.0 - gamma) * uncond.points + gamma * cond.points
    return PointCloud(blended)


def reverse_step(
    xt: PointCloud, t: int, eps_hat: PointCloud, sched: NoiseSchedule, seed=None
) -> PointCloud:
    """One stochastic reverse update from step t to t-1.

    Applies the standard ancestral formula: rescale after removing the
    predicted noise contribution, then re-inject variance beta_t, except at
    t = 1 where the added noise is zero by convention.
    """
    if len(eps_hat) != len(xt):
        raise ValueError(
            f"eps_hat has {len(eps_hat)} points but xt has {len(xt)}"
        )
    t = int(t)
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    alpha = sched.alpha(t)
    beta = sched.beta(t)
    ab = sched.alpha_bar(t)
    coef = (1.0 - alpha) / np.sqrt(1.0 - ab)
    mean = (xt.points - coef * eps_hat.points) / np.sqrt(alpha)
    if t > 1:
        rng = np.random.default_rng(seed)
        mean = mean + np.sqrt(beta) * rng.standard_normal(xt.points.shape)
    return xt.with_points(mean)


def _guidance_fn(denoiser: Denoiser, condition: PointCloud | None, gamma: float):
    """Per-step prediction closure; skips the redundant branch at gamma 0/1."""

    def predict(points: np.ndarray, t: int) -> np.ndarray:
        noisy = PointCloud(points)
        if condition is None or gamma == 0.0:
            return denoiser.predict_noise(DenoiserQuery(noisy, t, None)).points
        if gamma == 1.0:
            return denoiser.predict_noise(DenoiserQuery(noisy, t, condition)).points
        return guided_noise(denoiser, DenoiserQuery(noisy, t, condition), gamma).points

    return predict


def _check_finite(points: np.ndarray, t: int) -> None:
    if not np.isfinite(points).all():
        raise NumericalError(f"non-finite sample at step t={t}", t=t)


def sample(
    denoiser: Denoiser,
    p_s: PointCloud,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    seed=None,
) -> PointCloud:
    """Ancestral sampling from t0 down to 1 with guidance at every step.

    The conditioning cloud passed to the denoiser is the preprocessed,
    non-duplicated scan. Output cardinality is k_dup * |p_s|.
    """
    rng = np.random.default_rng(seed if seed is not None else cfg.seed)
    x = make_start(p_s, cfg, sched, rng).points
    predict = _guidance_fn(denoiser, p_s, cfg.gamma)
    for t in range(cfg.t0, 0, -1):
        eps_hat = predict(x, t)
        x = reverse_step(PointCloud(x), t, PointCloud(eps_hat), sched, rng).points
        _check_finite(x, t)
    return PointCloud(x)


def _solver_grid(sched: NoiseSchedule, t0: int, steps: int) -> list:
    """Strictly decreasing integer steps from t0 to 1, uniform in half-log-SNR."""
    lams = np.array([sched.half_log_snr(t) for t in range(1, sched.T + 1)])

    def snap(lam: float) -> int:
        return int(np.argmin(np.abs(lams - lam))) + 1

    targets = np.linspace(lams[t0 - 1], lams[0], steps + 1)
    ts = [t0]
    for lam in targets[1:]:
        t = snap(lam)
        if t < ts[-1]:
            ts.append(t)
    if ts[-1] != 1:
        ts.append(1)
    return ts


def fast_solve(
    denoiser: Denoiser,
    p_s: PointCloud,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    seed=None,
    order: int = 2,
) -> PointCloud:
    """Deterministic multi-step sampler from t0 to the clean state.

    Steps are spaced uniformly in half-log-SNR and snapped to integer
    schedule indices. Each interval applies an exponential-integrator update
    of the requested order (2 = midpoint, 1 = plain); after reaching step 1
    the clean cloud is recovered by removing the residual predicted noise.
    Randomness enters only through the start point.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    rng = np.random.default_rng(seed if seed is not None else cfg.seed)
    x = make_start(p_s, cfg, sched, rng).points
    if cfg.t0 == 0:
        return PointCloud(x)
    predict = _guidance_fn(denoiser, p_s, cfg.gamma)

    alp = lambda t: np.sqrt(sched.alpha_bar(t))
    sig = lambda t: np.sqrt(1.0 - sched.alpha_bar(t))
    lam = sched.half_log_snr

    ts = _solver_grid(sched, cfg.t0, cfg.steps_fast)
    for s, t in zip(ts[:-1], ts[1:]):
        h = lam(t) - lam(s)
        eps_s = predict(x, s)
        ratio = alp(t) / alp(s)
        if order == 1:
            x = ratio * x - sig(t) * np.expm1(h) * eps_s
        else:
            s_mid = _snap_mid(sched, lam(s) + 0.5 * h, t, s)
            if s_mid is None:
                x = ratio * x - sig(t) * np.expm1(h) * eps_s
            else:
                h1 = lam(s_mid) - lam(s)
                r = h1 / h
                u = (alp(s_mid) / alp(s)) * x - sig(s_mid) * np.expm1(h1) * eps_s
                _check_finite(u, s_mid)
                eps_mid = predict(u, s_mid)
                corr = eps_s + (eps_mid - eps_s) / (2.0 * r)
                x = ratio * x - sig(t) * np.expm1(h) * corr
        _check_finite(x, t)

    eps_final = predict(x, 1)
    x = (x - sig(1) * eps_final) / alp(1)
    _check_finite(x, 0)
    return PointCloud(x)


def _snap_mid(sched: NoiseSchedule, lam_target: float, t: int, s: int):
    """Integer step nearest to the target half-log-SNR, or None when the
    interval is too narrow to host a distinct midpoint."""
    best, best_d = None, np.inf
    for cand in range(t + 1, s):
        d = abs(sched.half_log_snr(cand) - lam_target)
        if d < best_d:
            best, best_d = cand, d
    return best
