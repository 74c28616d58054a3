"""Variance schedule shared by the forward and reverse diffusion processes.

The schedule fixes, for steps t = 1..T, the per-step variance beta_t, its
complement alpha_t = 1 - beta_t, and the cumulative signal fraction
alpha_bar_t = prod_{i<=t} alpha_i. Step 0 is the identity boundary where
alpha_bar is defined as exactly 1 (no noise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed variance tables, immutable after construction.

    ``alphas`` and ``alpha_bars`` are derived from ``betas`` at construction
    so the product identity alpha_bars[t] == alpha_bars[t-1] * alphas[t]
    holds bit-exactly. Queries are O(1).
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.atleast_1d(np.asarray(self.betas, dtype=np.float64)).copy()
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @classmethod
    def linear(cls, beta_start: float, beta_end: float, steps: int) -> "NoiseSchedule":
        """Schedule with betas linearly spaced from beta_start at t=1 to beta_end at t=T."""
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )
        if steps < 2:
            raise ValueError(f"need at least 2 steps, got {steps}")
        return cls(betas=np.linspace(beta_start, beta_end, steps))

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check_step(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_step(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_step(t) - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction; accepts the t = 0 boundary (returns 1)."""
        t = self._check_step(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def scales(self, t: int) -> tuple[float, float]:
        """(signal_scale, noise_scale) = (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)).

        The squares sum to 1: the forward process preserves total variance for
        unit-variance data. Accepts t = 0, returning (1, 0).
        """
        ab = self.alpha_bar(t)
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))

    def half_log_snr(self, t: int) -> float:
        """log(signal_scale / noise_scale), the solver's time variable; t >= 1."""
        ab = self.alpha_bar(self._check_step(t))
        return 0.5 * float(np.log(ab) - np.log1p(-ab))
