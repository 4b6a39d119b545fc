"""Quantization and likelihood models for the two latent streams.

The hyperlatent z gets a learned per-channel factorized prior built from
stacked monotone layers; the main latent y gets a conditional Gaussian
whose mean and scale come from the hyper decoder.  Rates are estimated
as -sum(log2 p) over integer-bin masses, the same masses later fed to
the range coder, which is what keeps estimates and real streams close.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Node, Tape, value_of

MASS_FLOOR = 1e-9
MONOTONE_TOL = 1e-7
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def quantize(x: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Train mode adds Uniform(-1/2, 1/2) noise; eval rounds half away from zero."""
    x = np.asarray(x)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs the seeded RNG")
        return x + rng.uniform(-0.5, 0.5, size=x.shape).astype(x.dtype)
    if mode == "eval":
        return np.copysign(np.floor(np.abs(x) + 0.5), x).astype(x.dtype)
    raise ValueError(f"unknown quantization mode '{mode}'")


def quantize_noise(tape: Tape | None, x, rng: np.random.Generator) -> Node:
    """Differentiable training surrogate: add fixed noise drawn once."""
    xv = value_of(x)
    u = rng.uniform(-0.5, 0.5, size=xv.shape).astype(xv.dtype)
    return ad.add(tape, x, u)


def gaussian_mass(tape: Tape | None, y, mu, sigma) -> Node:
    """Integer-bin probability Phi((d+1/2)/sigma) - Phi((d-1/2)/sigma), d = y - mu."""
    yv, mv, sv = value_of(y), value_of(mu), value_of(sigma)
    d = yv - mv
    a = (d + 0.5) / sv
    b = (d - 0.5) / sv
    raw = ndtr(a) - ndtr(b)
    out = Node(np.maximum(raw, MASS_FLOOR).astype(yv.dtype))
    if tape is not None:
        mask = raw > MASS_FLOOR
        phi_a = INV_SQRT_2PI * np.exp(-0.5 * a * a)
        phi_b = INV_SQRT_2PI * np.exp(-0.5 * b * b)
        def bw():
            g = out.grad * mask
            dd = g * (phi_a - phi_b) / sv
            if isinstance(y, Node):
                y.accumulate(ad._unbroadcast(dd.astype(yv.dtype), yv.shape))
            if isinstance(mu, Node):
                mu.accumulate(ad._unbroadcast((-dd).astype(mv.dtype), mv.shape))
            if isinstance(sigma, Node):
                ds = -g * (phi_a * a - phi_b * b) / sv
                sigma.accumulate(ad._unbroadcast(ds.astype(sv.dtype), sv.shape))
        tape.record(out, bw)
    return out


class FactorizedModel:
    """Learned monotone CDF per channel: three positive-weight layers with
    tanh-gated residuals, closed by a sigmoid."""

    HIDDEN = 3
    INIT_SCALE = 10.0

    def __init__(self, h1, b1, a1, h2, b2, a2, h3, b3):
        self.h1, self.b1, self.a1 = h1, b1, a1
        self.h2, self.b2, self.a2 = h2, b2, a2
        self.h3, self.b3 = h3, b3

    @classmethod
    def create(cls, store: ad.ParamStore, prefix: str, channels: int,
               rng: np.random.Generator) -> "FactorizedModel":
        h = cls.HIDDEN
        # softplus-inverse of the per-layer slope that spreads the fresh
        # CDF over roughly +-INIT_SCALE
        init = float(np.log(np.expm1(1.0 / cls.INIT_SCALE ** (1.0 / 3.0))))
        u = lambda shape: rng.uniform(-0.5, 0.5, size=shape).astype(np.float32)
        return cls(
            store.create(f"{prefix}.h1", np.full((channels, h), init, dtype=np.float32)),
            store.create(f"{prefix}.b1", u((channels, h))),
            store.create(f"{prefix}.a1", np.zeros((channels, h), dtype=np.float32)),
            store.create(f"{prefix}.h2", np.full((channels, h, h), init, dtype=np.float32)),
            store.create(f"{prefix}.b2", u((channels, h))),
            store.create(f"{prefix}.a2", np.zeros((channels, h), dtype=np.float32)),
            store.create(f"{prefix}.h3", np.full((channels, h), init, dtype=np.float32)),
            store.create(f"{prefix}.b3", u((channels,))),
        )

    def mirror(self, dtype=np.float64) -> "FactorizedModel":
        cast = lambda p: Node(value_of(p).astype(dtype))
        return FactorizedModel(cast(self.h1), cast(self.b1), cast(self.a1),
                               cast(self.h2), cast(self.b2), cast(self.a2),
                               cast(self.h3), cast(self.b3))

    @property
    def channels(self) -> int:
        return value_of(self.h1).shape[0]

    def cdf(self, tape: Tape | None, x) -> Node:
        """Evaluate every channel's CDF; x and the result have shape (P, C)."""
        xv = value_of(x)
        p, c = xv.shape
        h = self.HIDDEN
        u = ad.mul(tape, ad.reshape(tape, x, (p, c, 1)), ad.softplus(tape, self.h1))
        u = ad.add(tape, u, self.b1)
        u = ad.add(tape, u, ad.mul(tape, ad.tanh(tape, self.a1), ad.tanh(tape, u)))
        v = ad.sum_axis(tape, ad.mul(tape, ad.reshape(tape, u, (p, c, h, 1)),
                                     ad.softplus(tape, self.h2)), 2)
        v = ad.add(tape, v, self.b2)
        v = ad.add(tape, v, ad.mul(tape, ad.tanh(tape, self.a2), ad.tanh(tape, v)))
        w = ad.sum_axis(tape, ad.mul(tape, v, ad.softplus(tape, self.h3)), 2)
        w = ad.add(tape, w, self.b3)
        return ad.sigmoid(tape, w)


def factorized_mass(tape: Tape | None, z, model: FactorizedModel) -> Node:
    """Integer-bin probability F(z + 1/2) - F(z - 1/2) per element."""
    upper = model.cdf(tape, ad.sadd(tape, z, 0.5))
    lower = model.cdf(tape, ad.sadd(tape, z, -0.5))
    raw = ad.sub(tape, upper, lower)
    worst = float(raw.value.min())
    if worst < -MONOTONE_TOL:
        raise ValueError(f"factorized CDF not monotone: bin mass {worst:.3e}")
    return ad.clip_min(tape, raw, MASS_FLOOR)


def rate_bits(tape: Tape | None, masses) -> Node:
    """-sum(log2 p) over all elements, in bits."""
    total = ad.sum_all(tape, ad.log(tape, masses))
    return ad.smul(tape, total, -1.0 / np.log(2.0))


def estimate_rate(masses: np.ndarray) -> float:
    m = np.asarray(value_of(masses), dtype=np.float64)
    return float(-(np.log2(m)).sum())


# ---------------------------------------------------------------------------
# bin-mass tables for the range coder (evaluation path, no tape)


def gaussian_bin_masses(mu: np.ndarray, sigma: np.ndarray, base: np.ndarray,
                        n_bins: int) -> np.ndarray:
    """Per-element masses of integer bins base..base+n_bins-1, shape (M, n_bins)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    base = np.asarray(base, dtype=np.float64).reshape(-1)
    centers = base[:, None] + np.arange(n_bins)[None, :]
    upper = ndtr((centers + 0.5 - mu[:, None]) / sigma[:, None])
    lower = ndtr((centers - 0.5 - mu[:, None]) / sigma[:, None])
    return np.maximum(upper - lower, MASS_FLOOR)


def factorized_bin_masses(model: FactorizedModel, lo: int, hi: int) -> np.ndarray:
    """Per-channel masses of integer bins lo..hi inclusive, shape (C, hi-lo+1)."""
    centers = np.arange(lo, hi + 1, dtype=np.float64)
    c = model.channels
    x = np.repeat(centers[:, None], c, axis=1)
    upper = model.cdf(None, Node(x + 0.5)).value
    lower = model.cdf(None, Node(x - 0.5)).value
    return np.maximum(upper - lower, MASS_FLOOR).T.copy()
