"""Pluggable per-point noise predictors.

Two implementations are provided. ``GaussianOracleDenoiser`` is the
closed-form optimal predictor for an isotropic Gaussian target and exists so
the samplers can be verified against an analytically known answer.
``ToyDenoiser`` is a small dense network over per-point features with manual
backpropagation, used to study training behaviour (conditioning dropout,
normalization statistics) at desk scale.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import NumericalError
from .schedule import NoiseSchedule

_NORM_EPS = 1e-5
_NORM_MODES = ("instance", "batch")


@dataclass(frozen=True)
class DenoiserQuery:
    """One denoiser evaluation: noisy cloud, step index, optional condition.

    ``condition=None`` encodes the all-zero conditioning input used for
    unconditional prediction.
    """

    noisy: PointCloud
    t: int
    condition: PointCloud | None = None


class Denoiser(ABC):
    """Predicts the per-point noise that produced a noisy cloud at step t."""

    schedule: NoiseSchedule

    @abstractmethod
    def predict_noise(self, query: DenoiserQuery) -> PointCloud:
        """Per-point noise prediction with the same cardinality as the query."""

    def _check_query(self, query: DenoiserQuery) -> int:
        t = int(query.t)
        if not 1 <= t <= self.schedule.T:
            raise ValueError(f"step {t} outside schedule range [1, {self.schedule.T}]")
        return t


class GaussianOracleDenoiser(Denoiser):
    """Exact noise predictor when the clean data is N(mean, variance * I).

    With x_t = s*x0 + n*eps, s = sqrt(alpha_bar), n = sqrt(1 - alpha_bar) and
    x0 Gaussian, (x0, eps, x_t) are jointly Gaussian, so the loss-minimizing
    prediction is the conditional mean

        E[eps | x_t] = n * (x_t - s*mean) / (s^2 * variance + n^2).

    The conditioning input is ignored: the oracle already knows the target.
    """

    def __init__(self, mean, variance: float, schedule: NoiseSchedule):
        mean = np.asarray(mean, dtype=np.float64).reshape(3)
        if variance <= 0:
            raise ValueError("variance must be positive")
        self.mean = mean
        self.variance = float(variance)
        self.schedule = schedule

    def predict_noise(self, query: DenoiserQuery) -> PointCloud:
        t = self._check_query(query)
        ab = self.schedule.alpha_bar(t)
        coef = np.sqrt(1.0 - ab) / (ab * self.variance + 1.0 - ab)
        pred = coef * (query.noisy.points - np.sqrt(ab) * self.mean)
        return PointCloud(pred)


def time_embedding(t: float, n_freqs: int = 16) -> np.ndarray:
    """Sinusoidal embedding of the step index at geometrically spaced frequencies."""
    i = np.arange(n_freqs)
    freqs = 10000.0 ** (-i / max(n_freqs - 1, 1))
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def condition_summary(cond: PointCloud | None) -> np.ndarray:
    """Pooled conditioning features: per-axis mean and variance, zeros when absent."""
    if cond is None or len(cond) == 0:
        return np.zeros(6)
    pts = cond.points
    return np.concatenate([pts.mean(axis=0), pts.var(axis=0)])


class ToyDenoiser(Denoiser):
    """Dense per-point network with manual forward/backward passes.

    Each hidden layer applies a linear map over the point coordinates (or the
    previous activations), normalizes the result, then adds a learned affine
    together with per-channel biases projected from the sinusoidal step
    embedding and the pooled condition summary, followed by tanh. Injecting
    step and condition after normalization matters: both are constant within
    an instance, so normalization would otherwise erase them. A linear skip
    from the raw coordinates to the output carries the dominant linear part
    of the noise prediction. ``norm_mode`` selects where normalization
    statistics come from:

    - ``"instance"``: each query's own points, so a prediction never depends
      on what else shares its batch;
    - ``"batch"``: all points of all queries evaluated together, which couples
      predictions across the batch.

    ``hidden=()`` yields a single linear map over [coords, step embedding,
    condition summary] with no normalization, useful as an exactly
    differentiable reference. Parameters are held on the float32 grid
    (serialization is lossless) while all arithmetic runs in float64.
    """

    def __init__(
        self,
        schedule: NoiseSchedule,
        hidden: tuple = (48, 48),
        norm_mode: str = "instance",
        cond_prob: float = 0.1,
        time_freqs: int = 16,
        seed=0,
    ):
        if norm_mode not in _NORM_MODES:
            raise ValueError(f"norm_mode must be one of {_NORM_MODES}")
        if not 0.0 <= cond_prob <= 1.0:
            raise ValueError("cond_prob must lie in [0, 1]")
        self.schedule = schedule
        self.hidden = tuple(int(h) for h in hidden)
        self.norm_mode = norm_mode
        self.cond_prob = float(cond_prob)
        self.time_freqs = int(time_freqs)
        self.emb_dim = 2 * self.time_freqs

        shapes = []
        if self.hidden:
            d = 3
            for l, h in enumerate(self.hidden):
                shapes += [
                    (f"W{l}", (d, h)),
                    (f"b{l}", (h,)),
                    (f"g{l}", (h,)),
                    (f"c{l}", (h,)),
                    (f"U{l}", (self.emb_dim, h)),
                    (f"V{l}", (6, h)),
                ]
                d = h
            shapes += [("W_out", (d, 3)), ("W_skip", (3, 3)), ("b_out", (3,))]
        else:
            shapes += [("W_out", (3 + self.emb_dim + 6, 3)), ("b_out", (3,))]
        self._shapes = shapes
        self._offsets = {}
        off = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self._offsets[name] = (off, off + size, shape)
            off += size
        self.n_params = off

        rng = np.random.default_rng(seed)
        flat = np.zeros(off)
        for name, shape in shapes:
            lo, hi, _ = self._offsets[name]
            if name[0] in "WUV":
                fan_in = shape[0]
                flat[lo:hi] = rng.standard_normal(hi - lo) / np.sqrt(fan_in)
            elif name.startswith("g"):
                flat[lo:hi] = 1.0
        self._flat32 = flat.astype(np.float32)

    # -- parameter plumbing -------------------------------------------------

    def flat_params(self) -> np.ndarray:
        """Current parameters as a float64 vector."""
        return self._flat32.astype(np.float64)

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if len(flat) != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {len(flat)}")
        self._flat32 = flat.astype(np.float32)

    def _unpack(self, flat: np.ndarray) -> dict:
        return {
            name: flat[lo:hi].reshape(shape)
            for name, (lo, hi, shape) in self._offsets.items()
        }

    # -- forward / backward -------------------------------------------------

    def _norm_stats(self, zs: list) -> list:
        """(mu, inv_std) per instance, pooled across the batch in batch mode."""
        if self.norm_mode == "batch" and len(zs) > 1:
            pooled = np.concatenate(zs, axis=0)
            mu = pooled.mean(axis=0)
            inv = 1.0 / np.sqrt(pooled.var(axis=0) + _NORM_EPS)
            return [(mu, inv)] * len(zs)
        out = []
        for z in zs:
            mu = z.mean(axis=0)
            inv = 1.0 / np.sqrt(z.var(axis=0) + _NORM_EPS)
            out.append((mu, inv))
        return out

    def _forward(self, flat: np.ndarray, items: list):
        """items: list of (points, t, cond_vec). Returns (outputs, caches)."""
        p = self._unpack(flat)
        embs = [time_embedding(t, self.time_freqs) for _, t, _ in items]
        if not self.hidden:
            outs = []
            for (pts, _, cv), emb in zip(items, embs):
                feats = np.concatenate(
                    [pts, np.tile(emb, (len(pts), 1)), np.tile(cv, (len(pts), 1))],
                    axis=1,
                )
                outs.append(feats @ p["W_out"] + p["b_out"])
            return outs, (items, embs, [])
        hs = [pts for pts, _, _ in items]
        layer_caches = []
        for l in range(len(self.hidden)):
            zs = [h @ p[f"W{l}"] + p[f"b{l}"] for h in hs]
            stats = self._norm_stats(zs)
            zhats = [(z - mu) * inv for z, (mu, inv) in zip(zs, stats)]
            acts = [
                np.tanh(zh * p[f"g{l}"] + p[f"c{l}"] + emb @ p[f"U{l}"] + cv @ p[f"V{l}"])
                for zh, emb, (_, _, cv) in zip(zhats, embs, items)
            ]
            layer_caches.append((hs, zhats, stats, acts))
            hs = acts
        outs = [
            h @ p["W_out"] + pts @ p["W_skip"] + p["b_out"]
            for h, (pts, _, _) in zip(hs, items)
        ]
        return outs, (items, embs, layer_caches)

    def _loss_terms(self, outs: list, targets: list, lam: float):
        """Per-item data losses + optional output-statistics penalty."""
        per_item = []
        for out, tgt in zip(outs, targets):
            data = float(np.mean(np.sum((out - tgt) ** 2, axis=1)))
            if lam > 0.0:
                m = out.mean()
                s = out.std()
                data += lam * ((m - 0.0) ** 2 + (s - 1.0) ** 2)
            per_item.append(data)
        return per_item

    def _loss_only(self, flat, items, targets, lam=0.0) -> tuple:
        outs, _ = self._forward(flat, items)
        per_item = self._loss_terms(outs, targets, lam)
        return float(np.mean(per_item)), per_item

    def _loss_and_grad(self, flat, items, targets, lam=0.0):
        p = self._unpack(flat)
        outs, (_, embs, layer_caches) = self._forward(flat, items)
        per_item = self._loss_terms(outs, targets, lam)
        loss = float(np.mean(per_item))
        nb = len(items)

        grad = np.zeros_like(flat)
        g = self._unpack(grad)

        douts = []
        for out, tgt in zip(outs, targets):
            n = len(out)
            dout = 2.0 * (out - tgt) / n
            if lam > 0.0:
                m_tot = out.size
                m = out.mean()
                s = max(out.std(), 1e-12)
                dreg = 2.0 * m / m_tot + 2.0 * (out.std() - 1.0) * (out - m) / (m_tot * s)
                dout = dout + lam * dreg
            douts.append(dout / nb)

        if not self.hidden:
            for (pts, _, cv), emb, dout in zip(items, embs, douts):
                feats = np.concatenate(
                    [pts, np.tile(emb, (len(pts), 1)), np.tile(cv, (len(pts), 1))],
                    axis=1,
                )
                g["W_out"] += feats.T @ dout
                g["b_out"] += dout.sum(axis=0)
            return loss, grad, per_item

        das = []
        for (pts, _, _), h_cache, dout in zip(items, layer_caches[-1][3], douts):
            g["W_out"] += h_cache.T @ dout
            g["W_skip"] += pts.T @ dout
            g["b_out"] += dout.sum(axis=0)
            das.append(dout @ p["W_out"].T)

        for l in reversed(range(len(self.hidden))):
            hs, zhats, stats, acts = layer_caches[l]
            dpres = [(1.0 - a * a) * da for a, da in zip(acts, das)]
            for zh, emb, (_, _, cv), dpre in zip(zhats, embs, items, dpres):
                col = dpre.sum(axis=0)
                g[f"g{l}"] += (dpre * zh).sum(axis=0)
                g[f"c{l}"] += col
                g[f"U{l}"] += emb[:, None] @ col[None, :]
                g[f"V{l}"] += cv[:, None] @ col[None, :]
            dzhats = [dpre * p[f"g{l}"] for dpre in dpres]
            if self.norm_mode == "batch" and nb > 1:
                dzh = np.concatenate(dzhats, axis=0)
                zh = np.concatenate(zhats, axis=0)
                inv = stats[0][1]
                dz_all = inv * (
                    dzh - dzh.mean(axis=0) - zh * (dzh * zh).mean(axis=0)
                )
                splits = np.cumsum([len(x) for x in zhats])[:-1]
                dzs = np.split(dz_all, splits)
            else:
                dzs = [
                    inv * (dzh - dzh.mean(axis=0) - zh * (dzh * zh).mean(axis=0))
                    for (_, inv), zh, dzh in zip(stats, zhats, dzhats)
                ]
            das = []
            for h, dz in zip(hs, dzs):
                g[f"W{l}"] += h.T @ dz
                g[f"b{l}"] += dz.sum(axis=0)
                das.append(dz @ p[f"W{l}"].T)

        return loss, grad, per_item

    # -- public API ----------------------------------------------------------

    def predict_noise_batch(self, queries: list) -> list:
        """Evaluate several queries jointly (batch statistics pool over all of
        them in batch mode)."""
        items = []
        for q in queries:
            t = self._check_query(q)
            items.append((q.noisy.points, t, condition_summary(q.condition)))
        outs, _ = self._forward(self.flat_params(), items)
        return [PointCloud(out) for out in outs]

    def predict_noise(self, query: DenoiserQuery) -> PointCloud:
        return self.predict_noise_batch([query])[0]

    def train_step(self, batch: list, lr: float, seed=None) -> float:
        """One gradient-descent update of the standard noise-matching loss.

        ``batch`` is a list of (clean cloud, condition-or-None) pairs. For
        each item, a step t is drawn uniformly from 1..T, Gaussian noise is
        applied through the schedule, and the condition is kept with
        probability ``cond_prob`` (dropped to None otherwise). Returns the
        pre-update loss.
        """
        if not batch:
            raise ValueError("batch must be non-empty")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        rng = np.random.default_rng(seed)
        items, targets, ts = [], [], []
        for x0, condition in batch:
            t = int(rng.integers(1, self.schedule.T + 1))
            eps = rng.standard_normal(x0.points.shape)
            sig, noi = self.schedule.scales(t)
            noisy = sig * x0.points + noi * eps
            keep = rng.random() < self.cond_prob
            cond_vec = condition_summary(condition if keep else None)
            items.append((noisy, t, cond_vec))
            targets.append(eps)
            ts.append(t)
        flat = self.flat_params()
        loss, grad, per_item = self._loss_and_grad(flat, items, targets)
        self._raise_if_diverged(loss, per_item, ts)
        new_flat = flat - lr * grad
        if not np.isfinite(new_flat).all():
            raise NumericalError("non-finite parameters after update")
        self.set_flat_params(new_flat)
        return loss

    def _raise_if_diverged(self, loss, per_item, ts):
        if np.isfinite(loss):
            return
        for i, (li, t) in enumerate(zip(per_item, ts)):
            if not np.isfinite(li):
                raise NumericalError(
                    f"non-finite loss {li} at step t={t}, batch index {i}",
                    t=t,
                    batch_index=i,
                )
        raise NumericalError(f"non-finite loss {loss}")

    # -- persistence ----------------------------------------------------------

    def save_params(self, path) -> None:
        """Write parameters as a flat little-endian float32 array plus a JSON
        sidecar (``<path>.json``) recording the architecture."""
        path = str(path)
        self._flat32.astype("<f4").tofile(path)
        sidecar = {
            "hidden": list(self.hidden),
            "norm_mode": self.norm_mode,
            "cond_prob": self.cond_prob,
            "time_freqs": self.time_freqs,
            "layer_shapes": [[name, list(shape)] for name, shape in self._shapes],
        }
        with open(path + ".json", "w") as f:
            json.dump(sidecar, f, indent=2)

    @classmethod
    def load_params(cls, path, schedule: NoiseSchedule) -> "ToyDenoiser":
        path = str(path)
        with open(path + ".json") as f:
            sidecar = json.load(f)
        d = cls(
            schedule,
            hidden=tuple(sidecar["hidden"]),
            norm_mode=sidecar["norm_mode"],
            cond_prob=sidecar["cond_prob"],
            time_freqs=sidecar["time_freqs"],
        )
        flat = np.fromfile(path, dtype="<f4")
        if len(flat) != d.n_params:
            raise ValueError(
                f"parameter file holds {len(flat)} values, expected {d.n_params}"
            )
        d._flat32 = flat.astype(np.float32)
        return d


def noise_stats(denoiser: Denoiser, queries: list) -> tuple:
    """Mean and standard deviation over all predicted noise components."""
    if not queries:
        raise ValueError("queries must be non-empty")
    comps = np.concatenate(
        [denoiser.predict_noise(q).points.reshape(-1) for q in queries]
    )
    return float(comps.mean()), float(comps.std())


def diffusion_loss(
    denoiser: Denoiser, batch: list, sched: NoiseSchedule, seed=None, t: int | None = None
) -> float:
    """Monte-Carlo estimate of the noise-matching loss for a frozen denoiser.

    Draws (t, eps) per item exactly as a training step would (or holds t
    fixed when given) without updating anything.
    """
    rng = np.random.default_rng(seed)
    losses = []
    for x0, condition in batch:
        ti = int(rng.integers(1, sched.T + 1)) if t is None else int(t)
        eps = rng.standard_normal(x0.points.shape)
        sig, noi = sched.scales(ti)
        noisy = PointCloud(sig * x0.points + noi * eps)
        pred = denoiser.predict_noise(DenoiserQuery(noisy, ti, condition)).points
        losses.append(float(np.mean(np.sum((eps - pred) ** 2, axis=1))))
    return float(np.mean(losses))


def gradient_check(
    denoiser: ToyDenoiser,
    probe: DenoiserQuery,
    eps: float = 1e-5,
    n_params: int = 24,
    seed=0,
    lam: float = 0.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``n_params`` randomly chosen parameters of the noise-matching loss
    (plus the statistics penalty when ``lam > 0``) at the probe query, with a
    seeded noise target. The relative error is normalized by the largest
    gradient magnitude among the checked parameters, floored at 1e-8.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("finite-difference step must lie in [1e-6, 1e-3]")
    t = denoiser._check_query(probe)
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(probe.noisy.points.shape)
    items = [(probe.noisy.points, t, condition_summary(probe.condition))]
    targets = [target]

    flat = denoiser.flat_params()
    _, grad, _ = denoiser._loss_and_grad(flat, items, targets, lam=lam)
    idx = rng.choice(denoiser.n_params, size=min(n_params, denoiser.n_params), replace=False)

    fds = np.empty(len(idx))
    for k, i in enumerate(idx):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        up, _ = denoiser._loss_only(bumped, items, targets, lam=lam)
        bumped[i] = flat[i] - eps
        down, _ = denoiser._loss_only(bumped, items, targets, lam=lam)
        fds[k] = (up - down) / (2.0 * eps)

    ana = grad[idx]
    scale = max(np.abs(ana).max(), np.abs(fds).max(), 1e-8)
    return float(np.abs(ana - fds).max() / scale)
