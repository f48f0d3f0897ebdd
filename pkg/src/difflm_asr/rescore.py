"""Diffusion-LM hypothesis scores and n-best rescoring.

Every estimator is written as a ratio of per-sample sums,
``score = sum_k num_k / sum_k den_k``.  For all kinds except
``global_mask`` the denominator is 1 and the score is a plain Monte-Carlo
mean; ``global_mask`` pools token predictions across samples.
"""

from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ctc import LabelPrior, NBestList
from .schedule import LinearSchedule, NoiseSchedule, mask_draws, usdm_corrupt_array

MDLM_KINDS = ("seq_norm", "sample_mask", "global_mask", "coupled")
KINDS = MDLM_KINDS + ("usdm",)


@dataclass(frozen=True)
class RescoreWeights:
    lambda_ctc: float = 1.0
    lambda_difflm: float = 0.3
    lambda_prior: float = 0.0

    def __post_init__(self):
        for v in (self.lambda_ctc, self.lambda_difflm, self.lambda_prior):
            if not math.isfinite(v):
                raise ValueError("interpolation weights must be finite")


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "sample_mask"
    K: int = 16
    t_fixed: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 < self.t_fixed < 1.0:
            raise ValueError("t_fixed must lie in (0, 1)")


@dataclass(frozen=True)
class ScoreEstimate:
    value: float
    stderr: float
    num: np.ndarray
    den: np.ndarray


def _mask_id(d) -> int:
    return getattr(d, "mask_id", None) or d.n_vocab + 1


def ratio_stderr(num: np.ndarray, den: np.ndarray) -> float:
    """Delta-method standard error of ``sum(num) / sum(den)``."""
    K = num.size
    if K < 2:
        return math.inf
    r = num.sum() / den.sum()
    resid = num - r * den
    return float(math.sqrt((resid**2).sum() / (K * (K - 1))) / den.mean())


def nonempty_masks(rng: np.random.Generator, K: int, S: int, p_mask: float) -> np.ndarray:
    """``(K, S)`` Bernoulli masks; rows with no masked position are redrawn."""
    masks = mask_draws(rng, (K, S), p_mask)
    empty = ~masks.any(axis=1)
    while empty.any():
        masks[empty] = mask_draws(rng, (int(empty.sum()), S), p_mask)
        empty = ~masks.any(axis=1)
    return masks


def _target_logp(d, z: np.ndarray, hyp: np.ndarray, t: float) -> np.ndarray:
    """log P_theta(hyp_j | z_k) for every row k and position j."""
    if hasattr(d, "target_logprob"):
        return d.target_logprob(z, t, hyp)
    # short hypotheses repeat mask patterns a lot; query each distinct row once
    uniq, inverse = np.unique(z, axis=0, return_inverse=True)
    lp = d(uniq, t)
    tgt = np.take_along_axis(lp, np.broadcast_to(hyp, uniq.shape)[..., None], axis=-1)[..., 0]
    return tgt[inverse.reshape(-1)]


def _mdlm_stats(kind: str, masks: np.ndarray, logp: np.ndarray, weight: float):
    S = masks.shape[1]
    summed = np.where(masks, logp, 0.0).sum(axis=1)
    counts = masks.sum(axis=1).astype(float)
    if kind == "seq_norm":
        return -weight * summed / S, np.ones_like(summed)
    if kind == "sample_mask":
        return summed / counts, np.ones_like(summed)
    if kind == "global_mask":
        return summed, counts
    raise ValueError(kind)


def _check(hyp, cfg: EstimatorConfig) -> np.ndarray:
    hyp = np.asarray(hyp, dtype=np.int64)
    if hyp.ndim != 1 or hyp.size == 0:
        raise ValueError("hypothesis must be a non-empty token sequence")
    if cfg.K < 1:
        raise ValueError("K must be >= 1")
    return hyp


def estimate(
    hyp: Sequence[int], cfg: EstimatorConfig, d, sched: NoiseSchedule, rng: np.random.Generator
) -> ScoreEstimate:
    """Monte-Carlo diffusion-LM score with its standard error."""
    hyp = _check(hyp, cfg)
    S, K, t = hyp.size, cfg.K, cfg.t_fixed
    p_mask = 1.0 - sched.alpha(t)
    if cfg.kind == "usdm":
        z = usdm_corrupt_array(np.broadcast_to(hyp, (K, S)), t, rng, d.n_vocab, sched)
        num = _target_logp(d, z, hyp, t).mean(axis=1)
        den = np.ones(K)
    elif cfg.kind == "coupled":
        m1 = mask_draws(rng, (K, S), p_mask)
        masks = np.concatenate([m1, ~m1])
        z = np.where(masks, _mask_id(d), hyp)
        logp = np.where(masks, _target_logp(d, z, hyp, t), 0.0).sum(axis=1)
        num = (logp[:K] + logp[K:]) / S
        den = np.ones(K)
    else:
        # seq_norm is defined on an empty mask (it contributes 0); the others are not
        if cfg.kind == "seq_norm":
            masks = mask_draws(rng, (K, S), p_mask)
        else:
            masks = nonempty_masks(rng, K, S, p_mask)
        z = np.where(masks, _mask_id(d), hyp)
        num, den = _mdlm_stats(cfg.kind, masks, _target_logp(d, z, hyp, t), sched.elbo_weight(t))
    value = float(num.sum() / den.sum())
    return ScoreEstimate(value, ratio_stderr(num, den), num, den)


def mdlm_score(hyp, cfg: EstimatorConfig, d, sched: NoiseSchedule, rng: np.random.Generator) -> float:
    if cfg.kind == "usdm":
        raise ValueError("mdlm_score called with the usdm estimator")
    return estimate(hyp, cfg, d, sched, rng).value


def usdm_score(hyp, cfg: EstimatorConfig, d, sched: NoiseSchedule, rng: np.random.Generator) -> float:
    if cfg.kind != "usdm":
        raise ValueError("usdm_score needs the usdm estimator kind")
    return estimate(hyp, cfg, d, sched, rng).value


def exact_expected_score(hyp: Sequence[int], kind: str, t: float, d, sched: NoiseSchedule = LinearSchedule()) -> float:
    """Brute-force expectation of an estimator's per-sample statistic.

    Masked kinds enumerate all ``2**S`` mask patterns, conditioning on a
    non-empty mask for the kinds whose sampler redraws empty ones; ``usdm``
    enumerates all ``V**S`` noisy sequences.  For ``global_mask`` the
    result is the ratio of expectations, the large-K limit of the pooled
    estimator.
    """
    hyp = np.asarray(hyp, dtype=np.int64)
    S = hyp.size
    if S == 0:
        raise ValueError("hypothesis must be non-empty")
    if kind == "usdm":
        V = d.n_vocab
        if S > 6 or V > 6:
            raise ValueError("enumeration too large")
        a = sched.alpha(t)
        z = np.array(list(itertools.product(range(V), repeat=S)), dtype=np.int64)
        q = np.where(z == hyp, a + (1 - a) / V, (1 - a) / V).prod(axis=1)
        stat = _target_logp(d, z, hyp, t).mean(axis=1)
        return float((q * stat).sum() / q.sum())
    if kind not in MDLM_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    if S > 12:
        raise ValueError("enumeration too large")
    p = 1.0 - sched.alpha(t)
    masks = np.array(list(itertools.product([False, True], repeat=S)))
    n_masked = masks.sum(axis=1)
    q = p**n_masked * (1 - p) ** (S - n_masked)
    z = np.where(masks, _mask_id(d), hyp)
    logp = np.where(masks, _target_logp(d, z, hyp, t), 0.0)
    if kind == "coupled":
        # pattern and its complement: E over M1 of (sum_M1 + sum_~M1) / S
        summed = logp.sum(axis=1)
        comp = summed[::-1]  # product order makes row r and row -r-1 complements
        return float((q * (summed + comp)).sum() / S)
    if kind != "seq_norm":
        keep = n_masked > 0
        masks, logp, q = masks[keep], logp[keep], q[keep]
    num, den = _mdlm_stats(kind, masks, logp, sched.elbo_weight(t))
    return float((q * num).sum() / (q * den).sum())


def combine_scores(ctc_lp: float, s_difflm: float, prior_lp: float, w: RescoreWeights) -> float:
    """Linear interpolation of CTC, diffusion-LM and (subtracted) prior scores.

    Terms with zero weight are skipped, so an undefined score never leaks in
    through a disabled component.
    """
    if ctc_lp == -math.inf and w.lambda_ctc > 0:
        return -math.inf
    total = 0.0
    if w.lambda_ctc:
        total += w.lambda_ctc * ctc_lp
    if w.lambda_difflm:
        total += w.lambda_difflm * s_difflm
    if w.lambda_prior:
        total -= w.lambda_prior * prior_lp
    return total


@dataclass(frozen=True)
class RescoredEntry:
    hyp: tuple[int, ...]
    ctc_logprob: float
    s_difflm: float
    combined: float
    orig_rank: int


def hypothesis_rng(seed: int, utt_id: str, rank: int) -> np.random.Generator:
    """Sampling stream for one hypothesis, independent of scheduling order."""
    return np.random.default_rng([int(seed), zlib.crc32(utt_id.encode()), int(rank)])


def rescore_nbest(
    nbest: NBestList,
    cfg: EstimatorConfig,
    w: RescoreWeights,
    d,
    prior: LabelPrior | None,
    sched: NoiseSchedule = LinearSchedule(),
    utt_id: str = "",
) -> list[RescoredEntry]:
    """Score every hypothesis and re-sort by combined score (ties: original rank)."""
    if len(nbest) == 0:
        raise ValueError("empty n-best list")
    out = []
    for rank, (hyp, ctc_lp) in enumerate(nbest.entries):
        if w.lambda_difflm == 0:
            s = 0.0
        elif len(hyp) == 0:
            s = -math.inf
        else:
            s = estimate(hyp, cfg, d, sched, hypothesis_rng(cfg.seed, utt_id, rank)).value
        prior_lp = prior.score(hyp) if prior is not None and w.lambda_prior else 0.0
        out.append(RescoredEntry(tuple(hyp), ctc_lp, s, combine_scores(ctc_lp, s, prior_lp, w), rank))
    out.sort(key=lambda e: (-e.combined, e.orig_rank))
    return out
