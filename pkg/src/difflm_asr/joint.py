"""CTC + uniform-state diffusion joint decoding.

Start from the CTC greedy sequence, treat it as the noisy state at
``t_start`` and run ``L`` denoising steps.  At each step every position's
candidate distribution is ``softmax(l_ctc * log P_ctc(. | first frame of the
token) + l_lm * log P_theta(. | z))``; intermediate states are sampled from
it, the last step takes the argmax (or samples, if configured).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .ctc import CtcPosterior, greedy_collapse, renorm_nonblank
from .rescore import RescoreWeights
from .schedule import LinearSchedule, NoiseSchedule
from .vocab import TokenSeq


@dataclass(frozen=True)
class JointConfig:
    t_start: float = 0.3
    L: int = 16
    weights: RescoreWeights = field(default_factory=RescoreWeights)
    seed: int = 0
    final_rule: str = "argmax"

    def __post_init__(self):
        if not 0.0 < self.t_start <= 1.0:
            raise ValueError("t_start must lie in (0, 1]")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.final_rule not in ("argmax", "sample"):
            raise ValueError(f"unknown final rule {self.final_rule!r}")


@dataclass(frozen=True)
class DecodeState:
    z: TokenSeq
    l: int
    t_l: float
    tau: tuple[int, ...]


def noise_grid(t_start: float, L: int) -> np.ndarray:
    """Levels at which the denoiser is queried: t_start, ..., t_start / L."""
    return np.linspace(t_start, 0.0, L + 1)[:-1]


def ctc_token_logprobs(p: CtcPosterior, tau: Sequence[int]) -> np.ndarray:
    return np.stack([renorm_nonblank(p, f) for f in tau]) if len(tau) else np.zeros((0, p.n_vocab))


def combined_position_scores(
    p: CtcPosterior, tau: Sequence[int], z: Sequence[int], t_l: float, d, w: RescoreWeights
) -> np.ndarray:
    """``(len(z), V)`` matrix of combined CTC + diffusion-LM log scores."""
    if len(z) != len(tau):
        raise ValueError(f"state length {len(z)} != alignment length {len(tau)}")
    if len(z) == 0:
        raise ValueError("empty state")
    scores = np.zeros((len(z), p.n_vocab))
    if w.lambda_ctc:
        scores += w.lambda_ctc * ctc_token_logprobs(p, tau)
    if w.lambda_difflm:
        scores += w.lambda_difflm * d(np.asarray(z, dtype=np.int64), t_l)
    return scores


def denoise_step(
    state: DecodeState,
    scores: np.ndarray,
    rng: np.random.Generator,
    final: bool,
    rule: str = "argmax",
    next_t: float = 0.0,
) -> DecodeState:
    if scores.shape[0] != len(state.z):
        raise ValueError("score rows do not match state length")
    if final and rule == "argmax":
        z = np.argmax(scores, axis=1)
    else:
        probs = np.exp(log_softmax(scores, axis=1))
        z = _sample_rows(probs, rng.random((scores.shape[0], 1))[:, 0])
    return DecodeState(tuple(int(v) for v in z), state.l + 1, float(next_t), state.tau)


def _sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    z = (probs.cumsum(axis=-1) < u[..., None]).sum(axis=-1)
    return np.minimum(z, probs.shape[-1] - 1)


def joint_decode_batch(
    posteriors: Sequence[CtcPosterior],
    cfg: JointConfig,
    d,
    rngs: Sequence[np.random.Generator],
    sched: NoiseSchedule = LinearSchedule(),
) -> list[TokenSeq]:
    """Decode several utterances at once, one denoiser call per step and length.

    Each utterance draws from its own generator in the same order as
    :func:`joint_decode`, so the outputs are identical to decoding them one
    by one.
    """
    greedy = [greedy_collapse(p) for p in posteriors]
    out: list[TokenSeq] = [()] * len(posteriors)
    grid = noise_grid(cfg.t_start, cfg.L)
    w = cfg.weights
    by_len: dict[int, list[int]] = {}
    for i, g in enumerate(greedy):
        if g.tokens:
            by_len.setdefault(len(g.tokens), []).append(i)
    for idx in by_len.values():
        ctc = np.stack([ctc_token_logprobs(posteriors[i], greedy[i].tau) for i in idx])
        z = np.array([greedy[i].tokens for i in idx], dtype=np.int64)
        for l, t_l in enumerate(grid):
            scores = np.zeros(ctc.shape)
            if w.lambda_ctc:
                scores += w.lambda_ctc * ctc
            if w.lambda_difflm:
                scores += w.lambda_difflm * d(z, float(t_l))
            if l == len(grid) - 1 and cfg.final_rule == "argmax":
                z = np.argmax(scores, axis=-1)
            else:
                u = np.stack([rngs[i].random((z.shape[1], 1))[:, 0] for i in idx])
                z = _sample_rows(np.exp(log_softmax(scores, axis=-1)), u)
        for row, i in zip(z, idx):
            out[i] = tuple(int(v) for v in row)
    return out


def joint_decode(
    p: CtcPosterior,
    cfg: JointConfig,
    d,
    sched: NoiseSchedule = LinearSchedule(),
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> TokenSeq:
    """Decode one utterance; the output has the greedy sequence's length."""
    greedy = greedy_collapse(p)
    if not greedy.tokens:
        return ()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    grid = noise_grid(cfg.t_start, cfg.L)
    state = DecodeState(greedy.tokens, 0, float(grid[0]), greedy.tau)
    for l, t_l in enumerate(grid):
        scores = combined_position_scores(p, state.tau, state.z, float(t_l), d, cfg.weights)
        final = l == len(grid) - 1
        next_t = 0.0 if final else float(grid[l + 1])
        state = denoise_step(state, scores, rng, final, cfg.final_rule, next_t)
        if trace is not None:
            trace.append((state.l, float(t_l), state.z))
    return state.z
