import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difflm_asr.ctc import (
    CtcPosterior,
    NBestList,
    ctc_forward_score,
    estimate_prior,
    greedy_collapse,
    prefix_beam_nbest,
    read_nbest,
    read_posterior,
    renorm_nonblank,
    simulate_channel,
    write_nbest,
    write_posterior,
)
from difflm_asr.evaluation import edit_distance
from oracles import ctc_label_distribution, ctc_path_sum

A, B, BLANK = 0, 1, 2


def post_from_argmax(argmaxes, C=3, peak=0.8):
    probs = np.full((len(argmaxes), C), (1 - peak) / (C - 1))
    probs[np.arange(len(argmaxes)), argmaxes] = peak
    return CtcPosterior.from_probs(probs)


def random_post(rng, T, C):
    return CtcPosterior.from_probs(rng.dirichlet(np.ones(C), size=T))


class TestCtcPosterior:
    def test_rejects_unnormalised(self):
        with pytest.raises(ValueError):
            CtcPosterior(np.log(np.full((2, 3), 0.4)), 2)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            CtcPosterior(np.zeros((0, 3)), 2)

    def test_file_roundtrip(self, tmp_path, rng):
        p = random_post(rng, 5, 4)
        write_posterior(tmp_path / "x.post", p)
        q = read_posterior(tmp_path / "x.post")
        np.testing.assert_array_equal(q.log_probs, p.log_probs)
        assert q.blank == p.blank and q.T == 5 and q.n_vocab == 3


class TestGreedy:
    def test_repeat_run_and_blank(self):
        g = greedy_collapse(post_from_argmax([A, A, BLANK, A, B]))
        assert g.tokens == (A, A, B) and g.tau == (0, 3, 4)

    def test_all_blank(self):
        g = greedy_collapse(post_from_argmax([BLANK] * 4))
        assert g.tokens == () and g.tau == ()

    def test_blank_separates_repeats(self):
        g = greedy_collapse(post_from_argmax([A, BLANK, A]))
        assert g.tokens == (A, A) and g.tau == (0, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_alignment_invariants(self, seed):
        rng = np.random.default_rng(seed)
        p = random_post(rng, int(rng.integers(1, 30)), int(rng.integers(2, 7)))
        g = greedy_collapse(p)
        assert len(g.tau) == len(g.tokens)
        assert all(a < b for a, b in zip(g.tau, g.tau[1:]))
        assert all(0 <= f < p.T for f in g.tau)
        for tok, f in zip(g.tokens, g.tau):
            assert int(np.argmax(renorm_nonblank(p, f))) == tok


class TestRenormNonblank:
    def test_hand_value(self):
        p = CtcPosterior.from_probs([[0.5, 0.25, 0.25]])
        np.testing.assert_allclose(np.exp(renorm_nonblank(p, 0)), [2 / 3, 1 / 3])

    def test_zero_blank_unchanged(self):
        p = CtcPosterior.from_probs([[0.3, 0.7, 0.0]])
        np.testing.assert_allclose(np.exp(renorm_nonblank(p, 0)), [0.3, 0.7])

    def test_uniform(self):
        p = CtcPosterior.from_probs(np.full((1, 5), 0.2))
        np.testing.assert_allclose(np.exp(renorm_nonblank(p, 0)), 0.25)

    def test_out_of_range(self):
        p = CtcPosterior.from_probs(np.full((2, 3), 1 / 3))
        with pytest.raises(IndexError):
            renorm_nonblank(p, 2)
        with pytest.raises(IndexError):
            renorm_nonblank(p, -1)

    def test_blank_not_last(self):
        p = CtcPosterior.from_probs([[0.25, 0.5, 0.25]], blank=0)
        np.testing.assert_allclose(np.exp(renorm_nonblank(p, 0)), [2 / 3, 1 / 3])


class TestForwardScore:
    def test_single_frame(self):
        p = CtcPosterior.from_probs([[0.6, 0.3, 0.1]])
        assert ctc_forward_score(p, (A,)) == pytest.approx(math.log(0.6))

    def test_two_frames_three_alignments(self):
        probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
        p = CtcPosterior.from_probs(probs)
        want = 0.6 * 0.2 + 0.6 * 0.3 + 0.1 * 0.2
        assert ctc_forward_score(p, (A,)) == pytest.approx(math.log(want), abs=1e-12)

    def test_empty_labels(self):
        probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
        assert ctc_forward_score(CtcPosterior.from_probs(probs), ()) == pytest.approx(math.log(0.03))

    def test_inadmissible_is_neg_inf(self):
        p = CtcPosterior.from_probs(np.full((2, 3), 1 / 3))
        assert ctc_forward_score(p, (A, A)) == -np.inf
        assert ctc_forward_score(p, (A, B, A)) == -np.inf

    def test_matches_path_enumeration(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            T = int(rng.integers(1, 6))
            C = int(rng.integers(2, 5))
            probs = rng.dirichlet(np.ones(C), size=T)
            p = CtcPosterior.from_probs(probs)
            dist = ctc_label_distribution(probs, C - 1)
            for labels, want in dist.items():
                assert math.exp(ctc_forward_score(p, labels)) == pytest.approx(want, abs=1e-9)
            labels = tuple(int(x) for x in rng.integers(0, C - 1, size=int(rng.integers(0, 4))))
            got = ctc_forward_score(p, labels)
            assert (math.exp(got) if got > -np.inf else 0.0) == pytest.approx(ctc_path_sum(probs, labels, C - 1), abs=1e-9)

    def test_total_probability_is_one(self):
        rng = np.random.default_rng(6)
        for T in range(1, 5):
            probs = rng.dirichlet(np.ones(4), size=T)
            p = CtcPosterior.from_probs(probs)
            total = 0.0
            for L in range(T + 1):
                for labels in np.ndindex(*(3,) * L):
                    s = ctc_forward_score(p, labels)
                    total += math.exp(s) if s > -np.inf else 0.0
            assert total == pytest.approx(1.0, abs=1e-8)


def exhaustive_ranking(p, max_len):
    scored = []
    for L in range(max_len + 1):
        for labels in np.ndindex(*(p.n_vocab,) * L):
            s = ctc_forward_score(p, labels)
            if s > -np.inf:
                scored.append((tuple(int(x) for x in labels), s))
    scored.sort(key=lambda e: (-e[1], e[0]))
    return scored


class TestPrefixBeam:
    def test_exhaustive_t2_v2(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            p = random_post(rng, 2, 3)
            want = exhaustive_ranking(p, 2)
            got = prefix_beam_nbest(p, beam=64, n=64)
            assert got.hyps == [h for h, _ in want]
            np.testing.assert_allclose([s for _, s in got.entries], [s for _, s in want], atol=1e-12)

    def test_wide_beam_is_exhaustive(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            p = random_post(rng, 4, 3)
            want = exhaustive_ranking(p, 4)
            got = prefix_beam_nbest(p, beam=len(want) + 50, n=len(want))
            assert got.hyps == [h for h, _ in want]

    def test_tie_break_is_lexicographic(self):
        p = CtcPosterior.from_probs([[0.4, 0.4, 0.2]])
        assert prefix_beam_nbest(p, beam=4, n=3).hyps == [(0,), (1,), ()]

    def test_noiseless_top_is_reference(self, rng):
        ref = (3, 1, 1, 4, 0)
        p = simulate_channel(ref, 5, rng, noise=0.0)
        assert prefix_beam_nbest(p, beam=8, n=1).hyps == [ref]

    def test_beam_one_is_greedy(self):
        rng = np.random.default_rng(10)
        for _ in range(30):
            ref = tuple(int(x) for x in rng.integers(0, 6, size=int(rng.integers(1, 12))))
            p = simulate_channel(ref, 6, rng, noise=0.3)
            assert prefix_beam_nbest(p, beam=1, n=1).hyps[0] == greedy_collapse(p).tokens

    def test_list_invariants(self, rng):
        p = simulate_channel((1, 2, 3, 2, 1, 0), 4, rng, noise=0.5)
        nb = prefix_beam_nbest(p, beam=16, n=16)
        scores = [s for _, s in nb.entries]
        assert len(nb) == 16
        assert scores == sorted(scores, reverse=True)
        assert len(set(nb.hyps)) == len(nb.hyps)
        assert all(np.isfinite(scores))
        for h, s in nb.entries:
            assert s == pytest.approx(ctc_forward_score(p, h), abs=1e-12)

    def test_bad_arguments(self):
        p = CtcPosterior.from_probs(np.full((2, 3), 1 / 3))
        with pytest.raises(ValueError):
            prefix_beam_nbest(p, beam=2, n=3)
        with pytest.raises(ValueError):
            prefix_beam_nbest(p, beam=2, n=0)

    def test_nbest_file_roundtrip(self, tmp_path, rng):
        p = simulate_channel((1, 2, 3), 4, rng)
        nb = prefix_beam_nbest(p, beam=8, n=5)
        write_nbest(tmp_path / "u.nbest", "u1", nb)
        utt, back = read_nbest(tmp_path / "u.nbest")
        assert utt == "u1" and back == nb
        first = (tmp_path / "u.nbest").read_text().splitlines()[0].split()
        assert first[:2] == ["u1", "0"]


class TestPrior:
    def test_uniform(self):
        prior = estimate_prior([CtcPosterior.from_probs(np.full((3, 4), 0.25))])
        np.testing.assert_allclose(np.exp(prior.log_probs), 1 / 3)

    def test_single_frame(self):
        prior = estimate_prior([CtcPosterior.from_probs([[0.5, 0.25, 0.25]])])
        np.testing.assert_allclose(np.exp(prior.log_probs), [2 / 3, 1 / 3])

    def test_symmetric_swap(self):
        p = CtcPosterior.from_probs([[0.6, 0.2, 0.2], [0.2, 0.6, 0.2]])
        np.testing.assert_allclose(np.exp(estimate_prior([p]).log_probs), [0.5, 0.5])

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            estimate_prior([])

    def test_normalised_and_score(self, rng):
        prior = estimate_prior([random_post(rng, 7, 5), random_post(rng, 3, 5)])
        assert np.exp(prior.log_probs).sum() == pytest.approx(1.0, abs=1e-9)
        assert prior.score((1, 1, 3)) == pytest.approx(2 * prior.log_probs[1] + prior.log_probs[3])
        assert prior.score(()) == 0.0


class TestChannel:
    def test_noiseless_recovers_reference(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            ref = tuple(int(x) for x in rng.integers(0, 7, size=int(rng.integers(1, 25))))
            assert greedy_collapse(simulate_channel(ref, 7, rng, noise=0.0)).tokens == ref

    def test_heavy_noise_produces_errors(self):
        rng = np.random.default_rng(13)
        errs = 0
        for _ in range(100):
            ref = tuple(int(x) for x in rng.integers(0, 10, size=20))
            errs += edit_distance(ref, greedy_collapse(simulate_channel(ref, 10, rng, noise=0.9)).tokens) > 0
        assert errs == 100

    def test_dominant_blank_collapses_to_empty(self, rng):
        p = simulate_channel((1, 2, 3), 5, rng, blank_mass=0.99)
        assert greedy_collapse(p).tokens == ()

    def test_shape_and_normalisation(self, rng):
        p = simulate_channel((0, 1, 2), 4, rng, frames_per_token=3)
        assert p.T == 3 * 4 and p.blank == 4
        np.testing.assert_allclose(np.exp(p.log_probs).sum(axis=1), 1.0)

    def test_reproducible(self):
        a = simulate_channel((0, 1, 2), 4, np.random.default_rng(1), noise=0.5)
        b = simulate_channel((0, 1, 2), 4, np.random.default_rng(1), noise=0.5)
        np.testing.assert_array_equal(a.log_probs, b.log_probs)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            simulate_channel((), 4, rng)
        with pytest.raises(ValueError):
            simulate_channel((1,), 4, rng, noise=1.0)
        with pytest.raises(ValueError):
            simulate_channel((1,), 4, rng, frames_per_token=0)


def test_nbest_list_helpers():
    nb = NBestList((((1, 2), -1.0), ((1,), -2.0)))
    assert len(nb) == 2 and nb.hyps == [(1, 2), (1,)]
