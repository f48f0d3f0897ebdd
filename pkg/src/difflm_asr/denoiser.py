"""Denoising models ``w_theta(z_t, t)``.

A denoiser is any callable ``d(z, t)`` taking an integer array of noisy ids
with shape ``(S,)`` or ``(B, S)`` and returning log-probabilities of the clean
tokens with shape ``(..., S, n_vocab)``.  It also exposes ``n_vocab``.

Back ends:

* :class:`BigramPosteriorDenoiser` -- exact posterior marginals of the clean
  sequence under a bigram chain prior, with the corruption channel acting as
  the emission model.  Masked inputs use a closed form in matrix powers,
  uniform-state inputs a scaled forward-backward.
* :class:`ReplayDenoiser` -- reads stored outputs of an external model.
* :class:`UniformDenoiser` -- constant model, handy as a baseline.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .schedule import LinearSchedule, NoiseSchedule, NoisySeq

PROB_FLOOR = 1e-10


class Denoiser(Protocol):
    n_vocab: int

    def __call__(self, z: np.ndarray, t: float) -> np.ndarray: ...


@dataclass(frozen=True)
class BigramModel:
    initial: np.ndarray  # (V,) log-probs
    transition: np.ndarray  # (V, V) log-probs, rows = previous token

    @property
    def n_vocab(self) -> int:
        return self.initial.shape[0]

    def log_prob(self, seq: Sequence[int]) -> float:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size == 0:
            return 0.0
        return float(self.initial[seq[0]] + self.transition[seq[:-1], seq[1:]].sum())

    def sample(self, length: int, rng: np.random.Generator) -> tuple[int, ...]:
        p0 = np.exp(self.initial)
        P = np.exp(self.transition)
        out = [int(rng.choice(self.n_vocab, p=p0 / p0.sum()))]
        for _ in range(length - 1):
            row = P[out[-1]]
            out.append(int(rng.choice(self.n_vocab, p=row / row.sum())))
        return tuple(out)

    def to_json(self) -> str:
        # log-probs are stored verbatim so a save/load cycle is bit-exact
        return json.dumps({"log_initial": self.initial.tolist(), "log_transition": self.transition.tolist()})

    @classmethod
    def from_probs(cls, initial, transition) -> "BigramModel":
        initial = np.maximum(np.asarray(initial, dtype=float), PROB_FLOOR)
        transition = np.maximum(np.asarray(transition, dtype=float), PROB_FLOOR)
        initial = initial / initial.sum()
        transition = transition / transition.sum(axis=1, keepdims=True)
        return cls(np.log(initial), np.log(transition))

    @classmethod
    def from_json(cls, text: str) -> "BigramModel":
        d = json.loads(text)
        initial = np.asarray(d["log_initial"], dtype=float)
        transition = np.asarray(d["log_transition"], dtype=float)
        if transition.shape != (initial.size, initial.size):
            raise ValueError("bigram transition shape does not match initial distribution")
        if max(abs(logsumexp(initial)), np.abs(logsumexp(transition, axis=1)).max()) > 1e-9:
            raise ValueError("bigram rows are not normalised")
        return cls(initial, transition)


def bigram_fit(corpus: Iterable[Sequence[int]], n_vocab: int, smoothing: float = 1.0) -> BigramModel:
    """Add-``smoothing`` maximum-likelihood bigram estimates."""
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    first = np.zeros(n_vocab)
    pairs = np.zeros((n_vocab, n_vocab))
    n = 0
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.int64)
        n += 1
        if seq.size == 0:
            continue
        first[seq[0]] += 1
        np.add.at(pairs, (seq[:-1], seq[1:]), 1)
    if n == 0:
        raise ValueError("empty corpus")
    initial = (first + smoothing) / (first.sum() + smoothing * n_vocab)
    transition = (pairs + smoothing) / (pairs.sum(axis=1, keepdims=True) + smoothing * n_vocab)
    return BigramModel.from_probs(initial, transition)


def random_bigram(n_vocab: int, concentration: float, rng: np.random.Generator) -> BigramModel:
    """Dirichlet-sampled chain; small ``concentration`` gives peaked rows."""
    initial = rng.dirichlet(np.full(n_vocab, max(concentration, 1.0)))
    transition = rng.dirichlet(np.full(n_vocab, concentration), size=n_vocab)
    return BigramModel.from_probs(initial, transition)


# -- exact posterior -------------------------------------------------------------


def _usdm_emissions(z: np.ndarray, t: float, n_vocab: int, sched: NoiseSchedule) -> np.ndarray:
    if np.any((z < 0) | (z >= n_vocab)):
        raise ValueError("usdm input holds a mask or out-of-range token")
    a = sched.alpha(t)
    return a * (z[..., None] == np.arange(n_vocab)) + (1.0 - a) / n_vocab


def exact_posterior_denoise(
    z,
    t: float,
    kind: str,
    model: BigramModel,
    sched: NoiseSchedule = LinearSchedule(),
    mask_id: int | None = None,
) -> np.ndarray:
    """Per-position posterior marginals ``log P(w_j | z)`` under the bigram prior.

    Parameters
    ----------
    z : NoisySeq or int array, shape (S,) or (B, S)
    t : float
        Noise level used by the uniform-state channel.
    kind : {"mdlm", "usdm"}
    mask_id : int
        Required for ``kind="mdlm"``.

    Returns
    -------
    np.ndarray, shape (..., S, V)
    """
    if isinstance(z, NoisySeq):
        z = z.ids
    z = np.asarray(z, dtype=np.int64)
    single = z.ndim == 1
    if single:
        z = z[None]
    B, S = z.shape
    V = model.n_vocab
    if S == 0:
        out = np.zeros((B, 0, V))
        return out[0] if single else out
    if kind == "mdlm":
        post = _mdlm_posterior(z, model, mask_id)
        return post[0] if single else post
    if kind != "usdm":
        raise ValueError(f"unknown diffusion kind {kind!r}")
    # Scaled forward-backward in probability space; every message is
    # renormalised per step, so nothing underflows on long sequences.
    e = _usdm_emissions(z, t, V, sched)
    P = np.exp(model.transition)
    fwd = np.empty((B, S, V))
    bwd = np.empty((B, S, V))
    f = np.exp(model.initial) * e[:, 0]
    fwd[:, 0] = f / f.sum(axis=1, keepdims=True)
    for j in range(1, S):
        f = (fwd[:, j - 1] @ P) * e[:, j]
        fwd[:, j] = f / f.sum(axis=1, keepdims=True)
    bwd[:, S - 1] = 1.0
    for j in range(S - 2, -1, -1):
        b = (e[:, j + 1] * bwd[:, j + 1]) @ P.T
        bwd[:, j] = b / b.sum(axis=1, keepdims=True)
    post = fwd * bwd
    post /= post.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        post = np.log(post)
    return post[0] if single else post


def _mdlm_setup(z: np.ndarray, model: BigramModel, mask_id):
    """Matrix powers and nearest observed neighbours for the masked channel."""
    if mask_id is None:
        raise ValueError("mdlm emissions need a mask id")
    B, S = z.shape
    V = model.n_vocab
    masked = z == mask_id
    if np.any(~masked & ((z < 0) | (z >= V))):
        raise ValueError("noisy token outside vocabulary")
    P = np.exp(model.transition)
    powers = np.empty((2 * S + 1, V, V))
    powers[0] = np.eye(V)
    for k in range(1, 2 * S + 1):
        powers[k] = powers[k - 1] @ P
    start = np.exp(model.initial) @ powers[:S]  # marginal of w_j with nothing observed
    pos = np.arange(S)
    last = np.maximum.accumulate(np.where(masked, -1, pos), axis=1)
    left = np.concatenate([np.full((B, 1), -1), last[:, :-1]], axis=1)
    nxt = np.minimum.accumulate(np.where(masked, S, pos)[:, ::-1], axis=1)[:, ::-1]
    right = np.concatenate([nxt[:, 1:], np.full((B, 1), S)], axis=1)
    tok = np.where(masked, 0, z)
    rows = np.arange(B)[:, None]
    x = tok[rows, np.maximum(left, 0)]
    y = tok[rows, np.minimum(right, S - 1)]
    return masked, powers, start, pos, left, right, x, y, tok


def _mdlm_posterior(z: np.ndarray, model: BigramModel, mask_id) -> np.ndarray:
    """Masked-channel marginals from the nearest observed neighbours.

    Observed tokens cut the chain, so a masked position j with nearest
    observations x at a < j and y at b > j has posterior proportional to
    ``P^(j-a)[x, :] * P^(b-j)[:, y]`` (with the initial distribution when no
    left observation exists and ones when no right one does).
    """
    masked, powers, start, pos, left, right, x, y, tok = _mdlm_setup(z, model, mask_id)
    S, V = z.shape[1], model.n_vocab
    has_left, has_right = left >= 0, right < S
    lf = np.where(has_left[..., None], powers[np.where(has_left, pos - left, 0), x], start[pos][None])
    rt = np.swapaxes(powers, 1, 2)
    rf = np.where(has_right[..., None], rt[np.where(has_right, right - pos, 0), y], 1.0)
    post = lf * rf
    post /= post.sum(axis=-1, keepdims=True)
    post = np.where(masked[..., None], post, np.arange(V) == tok[..., None])
    with np.errstate(divide="ignore"):
        return np.log(post)


def _mdlm_target_logprob(z: np.ndarray, model: BigramModel, mask_id, targets: np.ndarray) -> np.ndarray:
    """``log P(targets | z)`` per position without forming full distributions.

    The normaliser of the neighbour product is itself a chain probability:
    ``P^(b-a)[x, y]`` between two observations, the start marginal at b with
    only a right neighbour, and 1 otherwise.  Entries of ``P^k`` (k >= 1) are
    bounded below by PROB_FLOOR, so neither factor underflows.
    """
    masked, powers, start, pos, left, right, x, y, tok = _mdlm_setup(z, model, mask_id)
    S = z.shape[1]
    w = np.broadcast_to(targets, z.shape)
    has_left, has_right = left >= 0, right < S
    d1 = np.where(has_left, pos - left, 0)
    d2 = np.where(has_right, right - pos, 0)
    num = np.where(has_left, powers[d1, x, w], start[pos, w])
    num = num * np.where(has_right, powers[d2, w, y], 1.0)
    den = np.where(
        has_left & has_right,
        powers[d1 + d2, x, y],
        np.where(has_right, start[np.minimum(right, S - 1), y], 1.0),
    )
    with np.errstate(divide="ignore"):
        return np.where(masked, np.log(num / den), np.where(w == tok, 0.0, -np.inf))


class BigramPosteriorDenoiser:
    """Exact-posterior denoiser for one diffusion kind."""

    def __init__(self, model: BigramModel, kind: str, sched: NoiseSchedule = LinearSchedule(), mask_id=None):
        if kind not in ("mdlm", "usdm"):
            raise ValueError(f"unknown diffusion kind {kind!r}")
        if kind == "mdlm" and mask_id is None:
            mask_id = model.n_vocab + 1
        self.model = model
        self.kind = kind
        self.sched = sched
        self.mask_id = mask_id
        self.n_vocab = model.n_vocab

    def __call__(self, z, t: float) -> np.ndarray:
        return exact_posterior_denoise(z, t, self.kind, self.model, self.sched, self.mask_id)

    def target_logprob(self, z, t: float, targets) -> np.ndarray:
        """``log P(targets_j | z)`` for every row of ``z``; same values as a gather from ``__call__``."""
        z = np.atleast_2d(np.asarray(z, dtype=np.int64))
        targets = np.asarray(targets, dtype=np.int64)
        if self.kind == "mdlm":
            return _mdlm_target_logprob(z, self.model, self.mask_id, targets)
        lp = self(z, t)
        return np.take_along_axis(lp, np.broadcast_to(targets, z.shape)[..., None], axis=-1)[..., 0]


class UniformDenoiser:
    def __init__(self, n_vocab: int):
        self.n_vocab = n_vocab

    def __call__(self, z, t: float) -> np.ndarray:
        z = np.asarray(z)
        return np.full(z.shape + (self.n_vocab,), -np.log(self.n_vocab))


# -- replay ----------------------------------------------------------------------

REPLAY_MAGIC = "DIFFLM-REPLAY"


def replay_key(ids: Iterable[int], t: float) -> tuple[tuple[int, ...], float]:
    return tuple(int(i) for i in ids), round(float(t), 4)


def write_replay(path: str | Path, n_vocab: int, entries) -> None:
    """Write ``entries`` -- an iterable of ``(ids, t, log_probs[S, V])``."""
    lines = [f"{REPLAY_MAGIC} 1 {n_vocab}"]
    for ids, t, lp in entries:
        lp = np.asarray(lp, dtype=float)
        if lp.shape != (len(ids), n_vocab):
            raise ValueError("replay entry shape does not match ids / vocabulary")
        lines.append("KEY {:.4f} {}".format(round(float(t), 4), " ".join(str(int(i)) for i in ids)).rstrip())
        lines.extend(" ".join(repr(float(x)) for x in row) for row in lp)
    Path(path).write_text("\n".join(lines) + "\n")


class ReplayDenoiser:
    """Serves per-position log-distributions recorded from an external model."""

    def __init__(self, path: str | Path, n_vocab: int | None = None):
        text = Path(path).read_text().splitlines()
        if not text:
            raise ValueError("empty replay file")
        head = text[0].split()
        if len(head) != 3 or head[0] != REPLAY_MAGIC or head[1] != "1":
            raise ValueError(f"bad replay header: {text[0]!r}")
        self.n_vocab = int(head[2])
        if n_vocab is not None and n_vocab != self.n_vocab:
            raise ValueError(f"replay vocabulary size {self.n_vocab} != expected {n_vocab}")
        self._store: dict = {}
        i = 1
        while i < len(text):
            fields = text[i].split()
            if not fields:
                i += 1
                continue
            if fields[0] != "KEY":
                raise ValueError(f"line {i + 1}: expected KEY record")
            t = float(fields[1])
            ids = [int(x) for x in fields[2:]]
            rows = []
            for j in range(len(ids)):
                row = np.array(text[i + 1 + j].split(), dtype=float)
                if row.shape != (self.n_vocab,):
                    raise ValueError(f"line {i + 2 + j}: wrong vocabulary size {row.size}")
                rows.append(row)
            self._store[replay_key(ids, t)] = np.array(rows).reshape(len(ids), self.n_vocab)
            i += 1 + len(ids)

    def lookup(self, ids, t: float) -> np.ndarray:
        key = replay_key(ids, t)
        try:
            lp = self._store[key]
        except KeyError:
            raise KeyError(f"no replay entry for t={key[1]} ids={list(key[0])}") from None
        if lp.size:
            drift = np.abs(logsumexp(lp, axis=-1)).max()
            if drift > 1e-6:
                warnings.warn(f"replay entry drifts from normalisation by {drift:.3g}; renormalising")
                lp = lp - logsumexp(lp, axis=-1, keepdims=True)
        return lp.copy()

    def __call__(self, z, t: float) -> np.ndarray:
        if isinstance(z, NoisySeq):
            z = z.ids
        z = np.asarray(z, dtype=np.int64)
        if z.ndim == 1:
            return self.lookup(z, t)
        return np.stack([self.lookup(row, t) for row in z])


def replay_denoise(z, t: float, store: ReplayDenoiser) -> np.ndarray:
    return store(z, t)
