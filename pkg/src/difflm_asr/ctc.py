"""Acoustic side: CTC posteriors, collapse/alignment, exact scoring, n-best.

Posterior matrices have shape ``(T, V + 1)``.  Token ``v`` lives in column
``v`` and the blank in column ``blank`` (by default the last one, ``V``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .vocab import TokenSeq

NEG_INF = -math.inf


@dataclass(frozen=True)
class CtcPosterior:
    log_probs: np.ndarray  # (T, V + 1)
    blank: int

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=float)
        if lp.ndim != 2 or lp.shape[0] < 1 or lp.shape[1] < 2:
            raise ValueError(f"posterior must be a (T>=1, C>=2) matrix, got {lp.shape}")
        if not 0 <= self.blank < lp.shape[1]:
            raise ValueError("blank index out of range")
        if np.abs(logsumexp(lp, axis=1)).max() > 1e-9:
            raise ValueError("posterior rows are not normalised")
        lp.setflags(write=False)
        object.__setattr__(self, "log_probs", lp)

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def n_vocab(self) -> int:
        return self.log_probs.shape[1] - 1

    @classmethod
    def from_probs(cls, probs, blank: int | None = None) -> "CtcPosterior":
        probs = np.asarray(probs, dtype=float)
        probs = probs / probs.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            lp = np.log(probs)
        lp = lp - logsumexp(lp, axis=1, keepdims=True)
        return cls(lp, probs.shape[1] - 1 if blank is None else blank)


@dataclass(frozen=True)
class AlignedGreedy:
    tokens: TokenSeq
    tau: tuple[int, ...]


@dataclass(frozen=True)
class NBestList:
    entries: tuple[tuple[TokenSeq, float], ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def hyps(self) -> list[TokenSeq]:
        return [h for h, _ in self.entries]


@dataclass(frozen=True)
class LabelPrior:
    log_probs: np.ndarray  # (V,)

    def score(self, hyp: Sequence[int]) -> float:
        return float(self.log_probs[np.asarray(hyp, dtype=np.int64)].sum()) if len(hyp) else 0.0


def _token_columns(n_cols: int, blank: int) -> np.ndarray:
    return np.array([c for c in range(n_cols) if c != blank])


def _col(v: int, blank: int) -> int:
    """Column holding token ``v``."""
    return v if v < blank else v + 1


def _tok(c: int, blank: int) -> int:
    return c if c < blank else c - 1


# -- synthetic channel ----------------------------------------------------------


def simulate_channel(
    ref: Sequence[int],
    n_vocab: int,
    rng: np.random.Generator,
    frames_per_token: int = 2,
    noise: float = 0.15,
    blank_mass: float = 0.1,
    separator_blank: float = 0.9,
    floor: float = 1e-4,
) -> CtcPosterior:
    """Frame posteriors for ``ref`` from a noisy synthetic encoder.

    Each token gets a block of ``frames_per_token`` identical frames followed
    by one blank-dominant separator frame.  A confuser token is drawn per
    token.  With probability ``noise`` the token is *misrecognised*: the
    confuser's share ``e`` of the non-blank mass is drawn from U(0.55, 0.85);
    otherwise from U(0, 0.45).  Token frames carry
    ``true: (1-e)(1-blank_mass)``, ``confuser: e(1-blank_mass)``,
    ``blank: blank_mass``.  Every entry gets ``floor`` extra mass before
    normalisation so all paths stay admissible.
    """
    if len(ref) == 0:
        raise ValueError("empty reference")
    if not 0 <= noise < 1 or not 0 <= blank_mass < 1 or frames_per_token < 1:
        raise ValueError("invalid channel parameters")
    C = n_vocab + 1
    blank = n_vocab
    rows = []
    for tok in ref:
        confuser = int(rng.integers(0, n_vocab - 1))
        confuser += confuser >= tok
        if rng.random() < noise:
            e = rng.uniform(0.55, 0.85)
        else:
            e = rng.uniform(0.0, 0.45)
        frame = np.zeros(C)
        frame[tok] = (1.0 - e) * (1.0 - blank_mass)
        frame[confuser] += e * (1.0 - blank_mass)
        frame[blank] = blank_mass
        rows.extend([frame] * frames_per_token)
        sep = np.full(C, (1.0 - max(separator_blank, blank_mass)) / n_vocab)
        sep[blank] = max(separator_blank, blank_mass)
        rows.append(sep)
    probs = np.array(rows) + floor
    return CtcPosterior.from_probs(probs, blank)


# -- greedy / alignment --------------------------------------------------------------


def greedy_collapse(p: CtcPosterior) -> AlignedGreedy:
    best = np.argmax(p.log_probs, axis=1)
    tokens, tau = [], []
    prev = None
    for frame, c in enumerate(best):
        c = int(c)
        if c != prev and c != p.blank:
            tokens.append(_tok(c, p.blank))
            tau.append(frame)
        prev = c
    return AlignedGreedy(tuple(tokens), tuple(tau))


def renorm_nonblank(p: CtcPosterior, frame: int) -> np.ndarray:
    if not 0 <= frame < p.T:
        raise IndexError(f"frame {frame} out of range [0, {p.T})")
    row = np.delete(p.log_probs[frame], p.blank)
    return row - logsumexp(row)


# -- exact scoring ------------------------------------------------------------------


def ctc_forward_score(p: CtcPosterior, labels: Sequence[int]) -> float:
    """log P_CTC(labels | x), summed over all alignments (-inf if none)."""
    lp = p.log_probs
    T = p.T
    if len(labels) == 0:
        return float(lp[:, p.blank].sum())
    cols = [_col(int(v), p.blank) for v in labels]
    ext = np.full(2 * len(cols) + 1, p.blank)
    ext[1::2] = cols
    S = ext.size
    # transitions s-2 -> s allowed for labels differing from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    alpha = np.full(S, NEG_INF)
    alpha[0] = lp[0, ext[0]]
    alpha[1] = lp[0, ext[1]]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha
            stay = prev
            step = np.concatenate(([NEG_INF], prev[:-1]))
            jump = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2])), NEG_INF)
            alpha = np.logaddexp(np.logaddexp(stay, step), jump) + lp[t, ext]
    total = np.logaddexp(alpha[-1], alpha[-2])
    return float(total)


def prefix_beam_nbest(p: CtcPosterior, beam: int = 16, n: int = 16) -> NBestList:
    """CTC prefix beam search; survivors are rescored exactly and ranked.

    Ties (equal scores) are broken by token-id lexicographic order.
    """
    if not beam >= n >= 1:
        raise ValueError("need beam >= n >= 1")
    lp = p.log_probs
    blank = p.blank
    tok_cols = _token_columns(lp.shape[1], blank)
    # prefix -> [log P(ends in blank), log P(ends in non-blank)]
    beams: dict[tuple[int, ...], list[float]] = {(): [0.0, NEG_INF]}
    for t in range(p.T):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def add(prefix, which, val):
            cur = nxt.get(prefix)
            if cur is None:
                cur = nxt[prefix] = [NEG_INF, NEG_INF]
            cur[which] = np.logaddexp(cur[which], val)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            add(prefix, 0, total + row[blank])
            last = prefix[-1] if prefix else None
            for c in tok_cols:
                v = _tok(int(c), blank)
                if v == last:
                    add(prefix, 1, pnb + row[c])
                    add(prefix + (v,), 1, pb + row[c])
                else:
                    add(prefix + (v,), 1, total + row[c])
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = dict(ranked[:beam])
    scored = []
    for prefix in beams:
        s = ctc_forward_score(p, prefix)
        if math.isfinite(s):
            scored.append((prefix, s))
    scored.sort(key=lambda e: (-e[1], e[0]))
    return NBestList(tuple(scored[:n]))


def estimate_prior(posteriors: Iterable[CtcPosterior]) -> LabelPrior:
    """Time-averaged label prior (blank dropped, renormalised)."""
    total = None
    frames = 0
    for p in posteriors:
        s = np.exp(p.log_probs).sum(axis=0)
        s = np.delete(s, p.blank)
        total = s if total is None else total + s
        frames += p.T
    if total is None:
        raise ValueError("no posteriors given")
    prior = total / total.sum()
    with np.errstate(divide="ignore"):
        return LabelPrior(np.log(prior))


# -- file formats ----------------------------------------------------------------------


def write_posterior(path: str | Path, p: CtcPosterior) -> None:
    lines = [f"CTC-POST 1 {p.T} {p.log_probs.shape[1]} {p.blank}"]
    lines.extend(" ".join(repr(float(x)) for x in row) for row in p.log_probs)
    Path(path).write_text("\n".join(lines) + "\n")


def read_posterior(path: str | Path) -> CtcPosterior:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if len(head) != 5 or head[:2] != ["CTC-POST", "1"]:
        raise ValueError(f"bad posterior header in {path}")
    T, C, blank = int(head[2]), int(head[3]), int(head[4])
    lp = np.array([line.split() for line in lines[1 : 1 + T]], dtype=float)
    if lp.shape != (T, C):
        raise ValueError(f"posterior {path}: expected {(T, C)}, got {lp.shape}")
    return CtcPosterior(lp, blank)


def format_nbest(utt_id: str, nbest: NBestList, extra: Sequence[Sequence[float]] | None = None) -> str:
    out = []
    for rank, (hyp, score) in enumerate(nbest.entries):
        cols = [utt_id, str(rank), repr(float(score))]
        if extra is not None:
            cols.extend(repr(float(x)) for x in extra[rank])
        cols.extend(str(i) for i in hyp)
        out.append(" ".join(cols))
    return "".join(line + "\n" for line in out)


def write_nbest(path: str | Path, utt_id: str, nbest: NBestList) -> None:
    Path(path).write_text(format_nbest(utt_id, nbest))


def read_nbest(path: str | Path) -> tuple[str, NBestList]:
    utt_id = None
    entries = []
    for line in Path(path).read_text().splitlines():
        fields = line.split()
        if not fields:
            continue
        utt_id = fields[0]
        entries.append((tuple(int(x) for x in fields[3:]), float(fields[2])))
    if utt_id is None:
        raise ValueError(f"empty n-best file {path}")
    return utt_id, NBestList(tuple(entries))
