"""WER, perplexity bounds, synthetic benchmarks and parameter sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .ctc import (
    CtcPosterior,
    LabelPrior,
    NBestList,
    estimate_prior,
    greedy_collapse,
    prefix_beam_nbest,
    read_nbest,
    read_posterior,
    simulate_channel,
    write_nbest,
    write_posterior,
)
from .denoiser import BigramModel, BigramPosteriorDenoiser, bigram_fit, random_bigram
from .joint import JointConfig, joint_decode_batch
from .rescore import EstimatorConfig, RescoreWeights, rescore_nbest
from .schedule import LinearSchedule, NoiseSchedule, usdm_corrupt_array, usdm_posterior_probs
from .vocab import Vocabulary, build_vocab, decode, encode

# -- word error rate ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalPair:
    reference: tuple[int, ...]
    hypothesis: tuple[int, ...]
    utt_id: str

    def __post_init__(self):
        if not self.utt_id:
            raise ValueError("utt_id must be non-empty")


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def wer(pairs: Iterable[EvalPair]) -> float:
    """Corpus-level word error rate in percent."""
    errors = 0
    words = 0
    for pair in pairs:
        errors += edit_distance(pair.reference, pair.hypothesis)
        words += len(pair.reference)
    if words == 0:
        raise ValueError("all references are empty")
    return 100.0 * errors / words


# -- perplexity upper bound ----------------------------------------------------------------


@dataclass(frozen=True)
class PplEstimate:
    ppl: float
    nll_per_token: float
    stderr_per_token: float


def _mdlm_nelbo_samples(seq: np.ndarray, d, K: int, rng: np.random.Generator) -> np.ndarray:
    # Continuous-time masked ELBO, integrated over t analytically: a mask of
    # size k is hit with weight 1/k, so draw k ~ U{1..S} and scale by S/k.
    S = seq.size
    k = rng.integers(1, S + 1, size=K)
    ranks = rng.random((K, S)).argsort(axis=1).argsort(axis=1)
    masks = ranks < k[:, None]
    z = np.where(masks, getattr(d, "mask_id", None) or d.n_vocab + 1, seq)
    lp = d(z, 0.5)
    tgt = np.take_along_axis(lp, np.broadcast_to(seq, (K, S))[..., None], axis=-1)[..., 0]
    return -(S / k) * np.where(masks, tgt, 0.0).sum(axis=1)


def _usdm_nelbo_samples(
    seq: np.ndarray, d, K: int, rng: np.random.Generator, sched: NoiseSchedule, n_steps: int
) -> np.ndarray:
    # Discrete-time ELBO on the grid 0 = t_0 < ... < t_n = 1; the terminal
    # prior term vanishes because q(z_1 | x) is already uniform.
    V = d.n_vocab
    S = seq.size
    step = rng.integers(1, n_steps + 1, size=K)
    out = np.empty(K)
    vocab = np.arange(V)
    for i in np.unique(step):
        rows = np.flatnonzero(step == i)
        s, t = (i - 1) / n_steps, i / n_steps
        z = usdm_corrupt_array(np.broadcast_to(seq, (rows.size, S)), t, rng, V, sched)
        model = np.exp(d(z, t))  # (R, S, V) over clean tokens
        true_q = usdm_posterior_probs(z, seq, s, t, sched, V)  # (R, S, V)
        trans = usdm_posterior_probs(z[..., None], vocab, s, t, sched, V)  # (R, S, V_w, V)
        model_q = np.einsum("rjw,rjwv->rjv", model, trans)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(true_q > 0, true_q * (np.log(true_q) - np.log(model_q)), 0.0)
        out[rows] = n_steps * kl.sum(axis=(1, 2))
    return out


def ppl_upper_bound(
    corpus: Sequence[Sequence[int]],
    d,
    sched: NoiseSchedule = LinearSchedule(),
    kind: str = "mdlm",
    K: int = 64,
    rng: np.random.Generator | None = None,
    n_steps: int = 32,
) -> PplEstimate:
    """Monte-Carlo perplexity bound ``exp(NELBO / tokens)``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus if len(s)]
    if not seqs:
        raise ValueError("empty corpus")
    rng = rng if rng is not None else np.random.default_rng(0)
    total = 0.0
    var = 0.0
    tokens = 0
    for seq in seqs:
        if kind == "mdlm":
            x = _mdlm_nelbo_samples(seq, d, K, rng)
        elif kind == "usdm":
            x = _usdm_nelbo_samples(seq, d, K, rng, sched, n_steps)
        else:
            raise ValueError(f"unknown diffusion kind {kind!r}")
        total += x.mean()
        var += x.var(ddof=1) / K if K > 1 else 0.0
        tokens += seq.size
    nll = total / tokens
    return PplEstimate(math.exp(nll), nll, math.sqrt(var) / tokens)


def bigram_perplexity(model: BigramModel, corpus: Sequence[Sequence[int]]) -> float:
    tokens = sum(len(s) for s in corpus)
    return math.exp(-sum(model.log_prob(s) for s in corpus) / tokens)


# -- benchmark -------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkParams:
    n_utts: int = 500
    n_words: int = 24
    min_len: int = 10
    max_len: int = 30
    lm_sentences: int = 4000
    concentration: float = 0.08
    smoothing: float = 0.01
    noise: float = 0.15
    blank_mass: float = 0.1
    frames_per_token: int = 2
    n_heldout: int = 200
    beam: int = 16
    n: int = 16
    seed: int = 0


@dataclass
class Benchmark:
    vocab: Vocabulary
    model: BigramModel
    utt_ids: list[str]
    refs: dict[str, tuple[int, ...]]
    posteriors: dict[str, CtcPosterior]
    heldout: list[tuple[int, ...]]
    params: BenchmarkParams
    nbest: dict[str, NBestList] = field(default_factory=dict)

    def prior(self) -> LabelPrior:
        return estimate_prior(self.posteriors[u] for u in self.utt_ids)

    def denoiser(self, kind: str) -> BigramPosteriorDenoiser:
        return BigramPosteriorDenoiser(self.model, kind, mask_id=self.vocab.mask_id)


def _sample_lengths(rng, n, lo, hi):
    return rng.integers(lo, hi + 1, size=n)


def generate_benchmark(params: BenchmarkParams = BenchmarkParams()) -> Benchmark:
    """Bigram text -> fitted bigram -> sampled references -> CTC posteriors."""
    root = np.random.default_rng([params.seed, 0])
    words = [f"w{i:02d}" for i in range(params.n_words)]
    source = random_bigram(params.n_words, params.concentration, root)
    lines = []
    for length in _sample_lengths(root, params.lm_sentences, params.min_len, params.max_len):
        lines.append(" ".join(words[i] for i in source.sample(int(length), root)))
    vocab = build_vocab(lines, min_count=1)
    model = bigram_fit((encode(line, vocab) for line in lines), vocab.size, params.smoothing)

    text_rng = np.random.default_rng([params.seed, 1])
    utt_ids = [f"utt{i:04d}" for i in range(params.n_utts)]
    refs, posteriors = {}, {}
    for utt, length in zip(utt_ids, _sample_lengths(text_rng, params.n_utts, params.min_len, params.max_len)):
        ref = model.sample(int(length), text_rng)
        refs[utt] = ref
        posteriors[utt] = simulate_channel(
            ref,
            vocab.size,
            np.random.default_rng([params.seed, 2, zlib.crc32(utt.encode())]),
            frames_per_token=params.frames_per_token,
            noise=params.noise,
            blank_mass=params.blank_mass,
        )
    held_rng = np.random.default_rng([params.seed, 3])
    heldout = [
        model.sample(int(n), held_rng)
        for n in _sample_lengths(held_rng, params.n_heldout, params.min_len, params.max_len)
    ]
    return Benchmark(vocab, model, utt_ids, refs, posteriors, heldout, params)


def vocab_hash(vocab: Vocabulary) -> str:
    return hashlib.sha256("\n".join(vocab.tokens).encode()).hexdigest()[:16]


def save_benchmark(bench: Benchmark, root: str | Path) -> None:
    root = Path(root)
    (root / "posteriors").mkdir(parents=True, exist_ok=True)
    bench.vocab.save(root / "vocab.txt")
    (root / "lm.json").write_text(bench.model.to_json() + "\n")
    (root / "refs.txt").write_text(
        "".join(f"{u} {decode(bench.refs[u], bench.vocab)}\n" for u in bench.utt_ids)
    )
    (root / "heldout.txt").write_text("".join(decode(s, bench.vocab) + "\n" for s in bench.heldout))
    for u in bench.utt_ids:
        write_posterior(root / "posteriors" / f"{u}.post", bench.posteriors[u])
    manifest = {
        "params": asdict(bench.params),
        "vocab_hash": vocab_hash(bench.vocab),
        "utterances": len(bench.utt_ids),
        "heldout_label": "held-out sample from the fitted bigram model",
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if bench.nbest:
        save_nbest(bench, root)


def save_nbest(bench: Benchmark, root: str | Path) -> None:
    nb_dir = Path(root) / "nbest"
    nb_dir.mkdir(parents=True, exist_ok=True)
    for u in bench.utt_ids:
        write_nbest(nb_dir / f"{u}.nbest", u, bench.nbest[u])


def load_benchmark(root: str | Path) -> Benchmark:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    params = BenchmarkParams(**manifest["params"])
    vocab = Vocabulary.load(root / "vocab.txt")
    if vocab_hash(vocab) != manifest["vocab_hash"]:
        raise ValueError("vocabulary hash does not match manifest")
    model = BigramModel.from_json((root / "lm.json").read_text())
    utt_ids, refs, posteriors, nbest = [], {}, {}, {}
    for line in (root / "refs.txt").read_text().splitlines():
        utt, _, text = line.partition(" ")
        utt_ids.append(utt)
        refs[utt] = encode(text, vocab)
        posteriors[utt] = read_posterior(root / "posteriors" / f"{utt}.post")
        nb_path = root / "nbest" / f"{utt}.nbest"
        if nb_path.exists():
            nbest[utt] = read_nbest(nb_path)[1]
    heldout = [encode(line, vocab) for line in (root / "heldout.txt").read_text().splitlines()]
    return Benchmark(vocab, model, utt_ids, refs, posteriors, heldout, params, nbest)


# -- per-utterance pipelines ---------------------------------------------------------


def map_utterances(fn: Callable, items: list, workers: int = 1) -> list:
    """Order-preserving map; results never depend on ``workers``."""
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def ensure_nbest(bench: Benchmark, beam: int | None = None, n: int | None = None, workers: int = 1) -> None:
    if bench.nbest:
        return
    beam = beam or bench.params.beam
    n = n or bench.params.n
    lists = map_utterances(_NBestJob(beam, n), [bench.posteriors[u] for u in bench.utt_ids], workers)
    bench.nbest = dict(zip(bench.utt_ids, lists))


@dataclass(frozen=True)
class _NBestJob:
    beam: int
    n: int

    def __call__(self, post):
        return prefix_beam_nbest(post, self.beam, self.n)


@dataclass(frozen=True)
class RescoreJob:
    cfg: EstimatorConfig
    weights: RescoreWeights
    denoiser: object
    prior: LabelPrior | None
    sched: NoiseSchedule = LinearSchedule()

    def __call__(self, item):
        utt, nbest = item
        return rescore_nbest(nbest, self.cfg, self.weights, self.denoiser, self.prior, self.sched, utt)


JOINT_CHUNK = 64


def utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(utt_id.encode())])


@dataclass(frozen=True)
class JointJob:
    """Decodes a fixed chunk of utterances in one batch."""

    cfg: JointConfig
    denoiser: object
    sched: NoiseSchedule = LinearSchedule()

    def __call__(self, chunk):
        utts = [u for u, _ in chunk]
        rngs = [utterance_rng(self.cfg.seed, u) for u in utts]
        return joint_decode_batch([p for _, p in chunk], self.cfg, self.denoiser, rngs, self.sched)


def greedy_hyps(bench: Benchmark) -> dict[str, tuple[int, ...]]:
    return {u: greedy_collapse(bench.posteriors[u]).tokens for u in bench.utt_ids}


def rescore_hyps(bench: Benchmark, cfg: EstimatorConfig, w: RescoreWeights, workers: int = 1) -> dict:
    ensure_nbest(bench, workers=workers)
    kind = "usdm" if cfg.kind == "usdm" else "mdlm"
    prior = bench.prior() if w.lambda_prior else None
    job = RescoreJob(cfg, w, bench.denoiser(kind), prior)
    ranked = map_utterances(job, [(u, bench.nbest[u]) for u in bench.utt_ids], workers)
    return {u: r[0].hyp for u, r in zip(bench.utt_ids, ranked)}


def joint_hyps(bench: Benchmark, cfg: JointConfig, workers: int = 1) -> dict:
    # chunk boundaries are fixed so batching never depends on ``workers``
    items = [(u, bench.posteriors[u]) for u in bench.utt_ids]
    chunks = [items[i : i + JOINT_CHUNK] for i in range(0, len(items), JOINT_CHUNK)]
    job = JointJob(cfg, bench.denoiser("usdm"))
    hyps = [h for part in map_utterances(job, chunks, workers) for h in part]
    return dict(zip(bench.utt_ids, hyps))


def corpus_wer(bench: Benchmark, hyps: dict) -> float:
    return wer(EvalPair(bench.refs[u], tuple(hyps[u]), u) for u in bench.utt_ids)


# -- sweeps and reports ---------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    """``points`` are dicts of overrides applied on top of ``base``.

    Rescore keys: kind, K, t_fixed, lambda_ctc, lambda_difflm, lambda_prior.
    Joint keys: t_start, L, lambda_ctc, lambda_difflm, final_rule.
    ``mode="greedy"`` evaluates the plain CTC greedy output.
    """

    mode: str
    points: tuple[dict, ...]
    seeds: tuple[int, ...] = (0,)
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("rescore", "joint", "greedy"):
            raise ValueError(f"unknown sweep mode {self.mode!r}")
        if not self.points or not self.seeds:
            raise ValueError("sweep grid and seeds must be non-empty")


@dataclass(frozen=True)
class ResultRow:
    config: str
    wer: float
    stddev: float
    wall_time: float


def fingerprint(mode: str, params: dict) -> str:
    return mode + ":" + ";".join(f"{k}={params[k]}" for k in sorted(params))


def _weights(params: dict) -> RescoreWeights:
    return RescoreWeights(
        float(params.get("lambda_ctc", 1.0)),
        float(params.get("lambda_difflm", 0.3)),
        float(params.get("lambda_prior", 0.0)),
    )


def evaluate_point(bench: Benchmark, mode: str, params: dict, seed: int, workers: int = 1) -> float:
    if mode == "greedy":
        return corpus_wer(bench, greedy_hyps(bench))
    if mode == "rescore":
        cfg = EstimatorConfig(
            params.get("kind", "sample_mask"), int(params.get("K", 16)), float(params.get("t_fixed", 0.5)), seed
        )
        return corpus_wer(bench, rescore_hyps(bench, cfg, _weights(params), workers))
    cfg = JointConfig(
        float(params.get("t_start", 0.3)),
        int(params.get("L", 16)),
        _weights(params),
        seed,
        params.get("final_rule", "argmax"),
    )
    return corpus_wer(bench, joint_hyps(bench, cfg, workers))


def run_sweep(spec: SweepSpec, bench: Benchmark, workers: int = 1) -> list[ResultRow]:
    rows = []
    for point in spec.points:
        params = {**spec.base, **point}
        start = time.perf_counter()
        wers = [evaluate_point(bench, spec.mode, params, seed, workers) for seed in spec.seeds]
        elapsed = time.perf_counter() - start
        std = float(np.std(wers, ddof=1)) if len(wers) > 1 else 0.0
        rows.append(ResultRow(fingerprint(spec.mode, params), float(np.mean(wers)), std, elapsed))
    return rows


def format_report(rows: Sequence[ResultRow], include_timing: bool = False) -> str:
    """CSV text.  Wall time is left blank unless ``include_timing`` so that
    reports from identical configurations are byte-identical."""
    if not rows:
        raise ValueError("no result rows")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config", "wer", "stddev", "wall_time_s"])
    for r in rows:
        writer.writerow([r.config, f"{r.wer:.4f}", f"{r.stddev:.4f}", f"{r.wall_time:.3f}" if include_timing else ""])
    return buf.getvalue()


def emit_report(rows: Sequence[ResultRow], path: str | Path, include_timing: bool = False) -> None:
    text = format_report(rows, include_timing)
    Path(path).write_text(text)
