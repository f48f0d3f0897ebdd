"""Noise schedule, forward corruption and reverse posteriors.

Both diffusion variants share the survival probability ``alpha(t)``:

* masked (MDLM): a token is replaced by the mask id with prob ``1 - alpha(t)``;
* uniform-state (USDM): a token is resampled uniformly from the vocabulary
  with prob ``1 - alpha(t)`` (the draw may hit the clean token again).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .vocab import TokenSeq


def _check_level(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"noise level {t} outside [0, 1]")
    return t


@dataclass(frozen=True)
class LinearSchedule:
    """``alpha(t) = 1 - t``."""

    kind: str = "linear"

    def alpha(self, t: float) -> float:
        return 1.0 - _check_level(t)

    def alpha_prime(self, t: float) -> float:
        _check_level(t)
        return -1.0

    def elbo_weight(self, t: float) -> float:
        """``alpha'(t) / (1 - alpha(t))``, the masked-diffusion loss weight."""
        return self.alpha_prime(t) / (1.0 - self.alpha(t))


NoiseSchedule = LinearSchedule


def alpha_at(sched: NoiseSchedule, t: float) -> float:
    return sched.alpha(t)


@dataclass(frozen=True)
class NoisySeq:
    ids: TokenSeq
    t: float
    masked: frozenset[int] = field(default_factory=frozenset)


# -- forward processes ------------------------------------------------------


def mask_draws(rng: np.random.Generator, shape, p_mask: float) -> np.ndarray:
    """Boolean array, True where a position gets masked."""
    return rng.random(shape) < p_mask


def mdlm_corrupt(
    w: Sequence[int], t: float, rng: np.random.Generator, mask_id: int, sched: NoiseSchedule = LinearSchedule()
) -> NoisySeq:
    a = sched.alpha(t)
    w = np.asarray(w, dtype=np.int64)
    hit = mask_draws(rng, w.shape, 1.0 - a)
    z = np.where(hit, mask_id, w)
    return NoisySeq(tuple(int(x) for x in z), float(t), frozenset(int(j) for j in np.flatnonzero(hit)))


def usdm_corrupt_array(
    w: np.ndarray, t: float, rng: np.random.Generator, n_vocab: int, sched: NoiseSchedule = LinearSchedule()
) -> np.ndarray:
    """Vectorised uniform-state corruption of an integer array of any shape."""
    a = sched.alpha(t)
    w = np.asarray(w, dtype=np.int64)
    resample = rng.random(w.shape) >= a
    draws = rng.integers(0, n_vocab, size=w.shape)
    return np.where(resample, draws, w)


def usdm_corrupt(
    w: Sequence[int], t: float, rng: np.random.Generator, n_vocab: int, sched: NoiseSchedule = LinearSchedule()
) -> NoisySeq:
    z = usdm_corrupt_array(np.asarray(w, dtype=np.int64), t, rng, n_vocab, sched)
    return NoisySeq(tuple(int(x) for x in z), float(t))


# -- marginals and posteriors ---------------------------------------------------
# Returned distributions are log-probability vectors.  For the masked process
# the vector has n_vocab + 1 entries and the last one is the mask state.


def mdlm_marginal(w: int, t: float, n_vocab: int, sched: NoiseSchedule = LinearSchedule()) -> np.ndarray:
    a = sched.alpha(t)
    p = np.zeros(n_vocab + 1)
    p[w] = a
    p[n_vocab] += 1.0 - a
    with np.errstate(divide="ignore"):
        return np.log(p)


def usdm_marginal(w: int, t: float, n_vocab: int, sched: NoiseSchedule = LinearSchedule()) -> np.ndarray:
    a = sched.alpha(t)
    p = np.full(n_vocab, (1.0 - a) / n_vocab)
    p[w] += a
    with np.errstate(divide="ignore"):
        return np.log(p)


def _check_pair(s: float, t: float) -> None:
    _check_level(s)
    _check_level(t)
    if not s < t:
        raise ValueError(f"posterior needs s < t, got s={s}, t={t}")


def mdlm_posterior(
    z_t: int, w: int, s: float, t: float, sched: NoiseSchedule, n_vocab: int, mask_id: int
) -> np.ndarray:
    """q(z_s | z_t, w) for the masked process, over ``V + [mask]``."""
    _check_pair(s, t)
    a_s, a_t = sched.alpha(s), sched.alpha(t)
    p = np.zeros(n_vocab + 1)
    if z_t != mask_id:
        p[z_t] = 1.0
    else:
        p[n_vocab] = (1.0 - a_s) / (1.0 - a_t)
        p[w] += (a_s - a_t) / (1.0 - a_t)
    with np.errstate(divide="ignore"):
        return np.log(p)


def usdm_posterior_probs(z_t, w, s: float, t: float, sched: NoiseSchedule, n_vocab: int) -> np.ndarray:
    """Vectorised q(z_s | z_t, w) for the uniform process, in probability space.

    ``z_t`` and ``w`` are broadcastable integer arrays; the result has an
    extra trailing axis of size ``n_vocab``.
    """
    _check_pair(s, t)
    a_s, a_t = sched.alpha(s), sched.alpha(t)
    a_ts = a_t / a_s
    z_t = np.asarray(z_t)[..., None]
    w = np.asarray(w)[..., None]
    v = np.arange(n_vocab)
    # q(z_t | z_s = v) * q(z_s = v | w)
    fwd = a_ts * (v == z_t) + (1.0 - a_ts) / n_vocab
    prior = a_s * (v == w) + (1.0 - a_s) / n_vocab
    joint = fwd * prior
    return joint / joint.sum(axis=-1, keepdims=True)


def usdm_posterior(z_t: int, w: int, s: float, t: float, sched: NoiseSchedule, n_vocab: int) -> np.ndarray:
    """q(z_s | z_t, w) for the uniform process, as log-probabilities over V."""
    with np.errstate(divide="ignore"):
        return np.log(usdm_posterior_probs(z_t, w, s, t, sched, n_vocab))
