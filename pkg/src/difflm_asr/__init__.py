"""Diffusion language models for CTC hypothesis rescoring and joint decoding."""

from .ctc import (
    AlignedGreedy,
    CtcPosterior,
    LabelPrior,
    NBestList,
    ctc_forward_score,
    estimate_prior,
    greedy_collapse,
    prefix_beam_nbest,
    renorm_nonblank,
    simulate_channel,
)
from .denoiser import (
    BigramModel,
    BigramPosteriorDenoiser,
    ReplayDenoiser,
    UniformDenoiser,
    bigram_fit,
    exact_posterior_denoise,
    replay_denoise,
)
from .evaluation import (
    BenchmarkParams,
    EvalPair,
    SweepSpec,
    corpus_wer,
    emit_report,
    generate_benchmark,
    joint_hyps,
    load_benchmark,
    ppl_upper_bound,
    rescore_hyps,
    run_sweep,
    wer,
)
from .joint import JointConfig, joint_decode
from .rescore import (
    EstimatorConfig,
    RescoreWeights,
    combine_scores,
    exact_expected_score,
    mdlm_score,
    rescore_nbest,
    usdm_score,
)
from .schedule import LinearSchedule, alpha_at, mdlm_corrupt, mdlm_posterior, usdm_corrupt, usdm_posterior
from .vocab import Vocabulary, build_vocab, decode, encode

__version__ = "0.1.0"
