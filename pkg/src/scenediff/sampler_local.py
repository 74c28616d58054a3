"""Local offset-diffusion baseline, implemented for controlled comparison.

Here the forward process perturbs points around the clean cloud without
rescaling the signal (only the noise term grows with t), which is equivalent to
running the global process on per-point offsets with a zero clean state. The
exact reverse step therefore needs the clean cloud itself; the practical
variant substitutes a noisy duplicate of the sparse scan, and the start point
adds unit-variance noise directly to that substitute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .denoiser import Denoiser, DenoiserQuery, ToyDenoiser, condition_summary
from .errors import NumericalError
from .sampler_global import reverse_step
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class LocalRegConfig:
    """Weight of the output-statistics penalty pulling predicted noise toward
    zero mean and unit standard deviation."""

    lam: float = 5.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")


def forward_noise_local(
    p0: PointCloud, t: int, sched: NoiseSchedule, seed=None
) -> PointCloud:
    """Offset forward process: p0 + noise_scale * eps, no signal rescaling."""
    _, noi = sched.scales(t)
    if t == 0:
        return p0
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(p0.points.shape)
    return p0.with_points(p0.points + noi * eps)


def reg_loss(eps_hat: PointCloud, cfg: LocalRegConfig | None = None):
    """Statistics penalty terms for a predicted-noise cloud.

    Returns (total, mean_term, std_term) with mean_term the squared deviation
    of the component mean from 0 and std_term the squared deviation of the
    component standard deviation from 1. The regularization weight applies
    where the total enters a combined training objective, not here.
    """
    if len(eps_hat) == 0:
        raise ValueError("eps_hat must be non-empty")
    comps = eps_hat.points.reshape(-1)
    mean_term = float(comps.mean() ** 2)
    std_term = float((comps.std() - 1.0) ** 2)
    return mean_term + std_term, mean_term, std_term


def reverse_step_local_exact(
    pt: PointCloud,
    p0: PointCloud,
    t: int,
    eps_hat: PointCloud,
    sched: NoiseSchedule,
    seed=None,
) -> PointCloud:
    """Reverse update that uses the true clean cloud (test-only operation).

    Implemented as the global reverse step conjugated by the shift to
    offsets, which it equals identically: shift to pt - p0, update, shift
    back. Unusable in practice since p0 is unknown at generation time.
    """
    if not len(pt) == len(p0) == len(eps_hat):
        raise ValueError("pt, p0 and eps_hat must share cardinality")
    offsets = PointCloud(pt.points - p0.points)
    stepped = reverse_step(offsets, t, eps_hat, sched, seed)
    return pt.with_points(p0.points + stepped.points)


def reverse_step_local(
    pt: PointCloud,
    p_s_tilde: PointCloud,
    t: int,
    eps_hat: PointCloud,
    sched: NoiseSchedule,
    seed=None,
) -> PointCloud:
    """Practical reverse update substituting the duplicated sparse scan for
    the unknown clean cloud. Reduces to the exact step when they coincide."""
    if not len(pt) == len(p_s_tilde) == len(eps_hat):
        raise ValueError("pt, p_s_tilde and eps_hat must share cardinality")
    return reverse_step_local_exact(pt, p_s_tilde, t, eps_hat, sched, seed)


def make_start_local(p_s_tilde: PointCloud, seed=None) -> PointCloud:
    """Start point: unit-variance Gaussian displacement of the duplicated scan
    (the noise scale at the final step is approximated as exactly 1)."""
    if len(p_s_tilde) == 0:
        raise ValueError("p_s_tilde must be non-empty")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(p_s_tilde.points.shape)
    return p_s_tilde.with_points(p_s_tilde.points + z)


def sample_local(
    denoiser: Denoiser,
    p_s_tilde: PointCloud,
    sched: NoiseSchedule,
    seed=None,
    t_start: int | None = None,
) -> PointCloud:
    """Full reverse loop of the local baseline.

    Starts from the unit-noise displacement of the duplicated scan and runs
    the approximate reverse step down to t = 1. The denoiser is queried on
    the noisy cloud itself, unconditioned.
    """
    rng = np.random.default_rng(seed)
    t_start = sched.T if t_start is None else int(t_start)
    if not 1 <= t_start <= sched.T:
        raise ValueError(f"t_start {t_start} outside [1, {sched.T}]")
    p = make_start_local(p_s_tilde, rng).points
    for t in range(t_start, 0, -1):
        eps_hat = denoiser.predict_noise(DenoiserQuery(PointCloud(p), t, None))
        p = reverse_step_local(
            PointCloud(p), p_s_tilde, t, eps_hat, sched, rng
        ).points
        if not np.isfinite(p).all():
            raise NumericalError(f"non-finite sample at step t={t}", t=t)
    return PointCloud(p)


def train_step_local(
    denoiser: ToyDenoiser,
    batch: list,
    reg: LocalRegConfig | None,
    lr: float,
    seed=None,
) -> float:
    """One update of the offset-diffusion objective with statistics penalty.

    Items are clean clouds; each is noised with the offset forward process at
    a uniformly drawn step and the denoiser (queried unconditioned, on the
    noisy cloud itself) is trained to recover the noise, plus lam times the
    statistics penalty on its prediction. ``reg=None`` disables the penalty.
    Returns the pre-update loss.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    lam = 0.0 if reg is None else reg.lam
    rng = np.random.default_rng(seed)
    items, targets, ts = [], [], []
    for x0 in batch:
        t = int(rng.integers(1, denoiser.schedule.T + 1))
        eps = rng.standard_normal(x0.points.shape)
        _, noi = denoiser.schedule.scales(t)
        noisy = x0.points + noi * eps
        items.append((noisy, t, condition_summary(None)))
        targets.append(eps)
        ts.append(t)
    flat = denoiser.flat_params()
    loss, grad, per_item = denoiser._loss_and_grad(flat, items, targets, lam=lam)
    denoiser._raise_if_diverged(loss, per_item, ts)
    new_flat = flat - lr * grad
    if not np.isfinite(new_flat).all():
        raise NumericalError("non-finite parameters after update")
    denoiser.set_flat_params(new_flat)
    return loss
