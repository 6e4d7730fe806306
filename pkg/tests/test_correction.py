import numpy as np
import pytest

from _helpers import make_context
from salperc.correction import (
    BiasReport,
    BiasScore,
    BiasSnapshot,
    ReferenceContext,
    bias_removed_percent,
    bias_score,
    correct_sentence,
    covariate_space_from_model,
    select_reference_context,
)
from salperc.features import (
    CAPITALIZATION_LEVELS,
    SaliencyMap,
    Sentence,
    Token,
    TokenContext,
    extract,
)


class RecordingStub:
    """Latent model u(s, x) = fn(s, x) that logs every prediction call."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def predict_latent_averaged(self, s, x, extra=None):
        self.calls.append((float(s), x))
        return self.fn(float(s), x)


SPACE = {
    "word_length": (2.0, 9.0),
    "word_frequency": (0.0, 1.0),
    "sentence_length": (5.0, 12.0),
    "display_index": (1.0, 100.0),
    "sentiment_polarity": (-1.0, 1.0),
    "saliency_rank": (0.1, 1.0),
    "word_position": (1.0, 5.0),
    "capitalization": CAPITALIZATION_LEVELS,
    "dependency_relation": ("unknown", "root", "nsubj"),
}


def sentence_of(*surfaces):
    return Sentence("s1", tuple(Token(w) for w in surfaces))


class TestSelectReferenceContext:
    def test_even_n_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            select_reference_context(RecordingStub(lambda s, x: 0.0), SPACE, n=10)

    def test_constant_model_returns_first_candidate(self):
        stub = RecordingStub(lambda s, x: 0.0)
        ref = select_reference_context(stub, SPACE, n=5, seed=3)
        assert len(stub.calls) == 5
        assert ref.context == stub.calls[0][1]
        assert ref.sample_count == 5
        assert ref.seed == 3
        assert ref.probe_saliency == 0.5

    def test_three_candidate_median_oracle(self):
        stub = RecordingStub(lambda s, x: 2.0 * x.word_length)
        ref = select_reference_context(stub, SPACE, n=3, seed=11)
        lengths = sorted(x.word_length for _, x in stub.calls)
        assert ref.context.word_length == lengths[1]

    def test_median_selection_against_enumeration(self):
        # order statistics on the recorded candidate set, computed
        # independently of the selection code
        def fn(s, x):
            return 0.3 * x.word_length - x.sentiment_polarity + (
                0.7 if x.capitalization == "all-capital" else 0.0)
        stub = RecordingStub(fn)
        ref = select_reference_context(stub, SPACE, n=101, seed=17)
        preds = [fn(0.5, x) for _, x in stub.calls]
        v = sorted(preds)[50]
        winner = stub.calls[preds.index(v)][1]
        assert ref.context == winner

    def test_candidates_stay_inside_space(self):
        stub = RecordingStub(lambda s, x: x.display_index)
        select_reference_context(stub, SPACE, n=201, seed=5, probe_s=0.25)
        for s, x in stub.calls:
            assert s == 0.25
            for field in TokenContext.NUMERIC_FIELDS:
                if field == "saliency":
                    continue
                lo, hi = SPACE[field]
                assert lo <= getattr(x, field) <= hi
            assert x.capitalization in SPACE["capitalization"]
            assert x.dependency_relation in SPACE["dependency_relation"]
            assert x.word_position <= x.sentence_length

    def test_non_integral_fields_allowed(self):
        stub = RecordingStub(lambda s, x: x.word_length)
        ref = select_reference_context(stub, SPACE, n=51, seed=2)
        assert ref.context.word_length != int(ref.context.word_length)

    def test_deterministic_given_seed(self):
        runs = [
            select_reference_context(RecordingStub(lambda s, x: x.word_length),
                                     SPACE, n=201, seed=9)
            for _ in range(3)
        ]
        assert runs[0] == runs[1] == runs[2]
        other = select_reference_context(RecordingStub(lambda s, x: x.word_length),
                                         SPACE, n=201, seed=10)
        assert other.context != runs[0].context


class TestBiasScore:
    def test_closed_form_stub(self):
        stub = RecordingStub(lambda s, x: s + 0.1 * x.word_length)
        x_hat = make_context(word_length=5.0)
        x_ref = make_context(word_length=3.0)
        sc = bias_score(stub, 0.4, x_hat, x_ref)
        assert sc.p == pytest.approx(0.9, abs=1e-12)
        assert sc.p_ref == pytest.approx(0.7, abs=1e-12)
        assert sc.b == pytest.approx(0.2, abs=1e-12)
        assert sc.b == sc.p - sc.p_ref

    def test_identical_contexts_zero_bias(self):
        stub = RecordingStub(lambda s, x: 3.0 * s - x.sentence_length)
        x = make_context()
        for s in (0.0, 0.25, 0.8, 1.0):
            assert bias_score(stub, s, x, x).b == 0.0

    def test_accepts_reference_wrapper(self):
        stub = RecordingStub(lambda s, x: 0.1 * x.word_length)
        ref = ReferenceContext(make_context(word_length=2.0), 1, 0, 0.5)
        sc = bias_score(stub, 0.5, make_context(word_length=6.0), ref)
        assert sc.b == pytest.approx(0.4, abs=1e-12)

    def test_inconsistent_triple_rejected(self):
        with pytest.raises(ValueError, match="p - p_ref"):
            BiasScore(p=1.0, p_ref=0.25, b=0.5)


def naive_correct(fn, sentence, smap, ref_ctx, alpha, n_steps, display_index):
    """Straight transcription of the round-robin update loop, recomputing
    every covariate from scratch inside the inner step."""
    scores = list(smap.scores)
    p_ref = [fn(smap.scores[i], ref_ctx) for i in range(len(scores))]
    for k in range(1, n_steps + 1):
        step = alpha * (1.0 - (k - 1) / n_steps) ** 2
        for i in range(len(scores)):
            ctxs = extract(sentence, SaliencyMap(sentence.id, tuple(scores)),
                           display_index)
            b = fn(scores[i], ctxs[i]) - p_ref[i]
            scores[i] = min(1.0, max(0.0, scores[i] - step * float(np.sign(b))))
    return tuple(scores)


class TestCorrectSentence:
    def test_additive_stub_reaches_fixed_point(self):
        stub = RecordingStub(lambda s, x: s + 0.1 * x.word_length)
        sent = sentence_of("ab", "abc", "abcd", "abcdef", "abcdefg")
        smap = SaliencyMap("s1", (0.5,) * 5)
        ref = make_context(word_length=4.5)
        corrected, report = correct_sentence(stub, sent, smap, ref,
                                             alpha=0.05, n_steps=100,
                                             display_index=1)
        target = [0.5 + 0.1 * (4.5 - len(w)) for w in ("ab", "abc", "abcd",
                                                       "abcdef", "abcdefg")]
        assert np.allclose(corrected.scores, target, atol=0.01)
        for sc in report.after.scores:
            assert abs(sc.b) < 0.05

    def test_removes_at_least_ninety_percent(self):
        stub = RecordingStub(lambda s, x: s + 0.1 * x.word_length)
        sent = sentence_of("ab", "abc", "abcd", "abcde", "abcdef", "abcdefg")
        smap = SaliencyMap("s1", (0.5,) * 6)
        _, report = correct_sentence(stub, sent, smap,
                                     make_context(word_length=4.5),
                                     alpha=0.05, n_steps=100, display_index=1)
        assert report.before.abs_total > 0
        assert report.removed_percent >= 90.0
        assert report.after.abs_total < report.before.abs_total

    def test_zero_bias_is_exact_fixpoint(self):
        stub = RecordingStub(lambda s, x: s)
        sent = sentence_of("one", "two", "three")
        smap = SaliencyMap("s1", (0.15, 0.5, 0.93))
        corrected, report = correct_sentence(stub, sent, smap, make_context(),
                                             display_index=1)
        assert corrected.scores == smap.scores
        assert report.removed_percent == 0.0
        assert report.before.abs_total == 0.0

    def test_clamp_boundaries_hold_and_report_residual(self):
        stub = RecordingStub(lambda s, x: s + 0.1 * x.word_length)
        sent = sentence_of("ab", "abcdefghi")
        smap = SaliencyMap("s1", (1.0, 0.0))
        ref = make_context(word_length=8.0)
        corrected, report = correct_sentence(stub, sent, smap, ref,
                                             display_index=1)
        assert corrected.scores == (1.0, 0.0)
        assert report.after.scores[0].b == pytest.approx(-0.6, abs=1e-12)
        assert report.after.scores[1].b == pytest.approx(0.1, abs=1e-12)

    def test_every_intermediate_saliency_in_range(self):
        # offsets large enough to slam both boundaries repeatedly
        stub = RecordingStub(lambda s, x: s + 0.5 * x.word_length)
        sent = sentence_of("a", "abcdefgh", "abc")
        smap = SaliencyMap("s1", (0.1, 0.9, 0.5))
        corrected, _ = correct_sentence(stub, sent, smap,
                                        make_context(word_length=4.0),
                                        alpha=0.3, n_steps=40, display_index=1)
        for s, x in stub.calls:
            assert 0.0 <= s <= 1.0
            assert 0.0 <= x.saliency <= 1.0
        assert all(0.0 <= s <= 1.0 for s in corrected.scores)

    def test_step_sizes_decay_quadratically(self):
        stub = RecordingStub(lambda s, x: s + 0.1 * x.word_length)
        sent = sentence_of("abcdefghij")
        smap = SaliencyMap("s1", (1.0,))
        ref = make_context(word_length=0.0)
        correct_sentence(stub, sent, smap, ref, alpha=0.25, n_steps=5,
                         display_index=1)
        series = [s for s, x in stub.calls if x.word_length == 10.0]
        steps = [-d for d in np.diff(series) if d != 0.0]
        expected = [0.25 * (1.0 - k / 5) ** 2 for k in range(5)]
        assert steps == pytest.approx(expected, abs=1e-12)
        assert all(a >= b for a, b in zip(steps, steps[1:]))

    def test_reference_prediction_computed_once_per_token(self):
        stub = RecordingStub(lambda s, x: s + 0.1 * x.word_length)
        sent = sentence_of("ab", "abcd", "abcdef")
        smap = SaliencyMap("s1", (0.3, 0.5, 0.7))
        ref = make_context(word_length=17.0)
        correct_sentence(stub, sent, smap, ref, alpha=0.05, n_steps=30,
                         display_index=1)
        ref_calls = [(s, x) for s, x in stub.calls if x.word_length == 17.0]
        assert len(ref_calls) == 3
        assert sorted(s for s, _ in ref_calls) == [0.3, 0.5, 0.7]

    def test_matches_naive_transcription(self):
        # rank-sensitive stub: correcting one token moves its neighbours'
        # rank covariate, so the incremental context update must agree
        # with a full re-extraction
        def fn(s, x):
            return s + 0.6 * x.saliency_rank + 0.03 * x.word_length
        sent = sentence_of("alpha", "be", "gamma", "dd")
        smap = SaliencyMap("s1", (0.2, 0.8, 0.5, 0.35))
        ref = make_context(word_length=4.0, saliency_rank=0.5)
        for alpha, n_steps in ((0.05, 7), (0.2, 3), (0.11, 25)):
            got, _ = correct_sentence(RecordingStub(fn), sent, smap, ref,
                                      alpha=alpha, n_steps=n_steps,
                                      display_index=2)
            expected = naive_correct(fn, sent, smap, ref, alpha, n_steps, 2)
            assert got.scores == expected

    def test_invalid_parameters_rejected(self):
        stub = RecordingStub(lambda s, x: s)
        sent = sentence_of("one")
        smap = SaliencyMap("s1", (0.5,))
        with pytest.raises(ValueError):
            correct_sentence(stub, sent, smap, make_context(), alpha=0.0,
                             display_index=1)
        with pytest.raises(ValueError):
            correct_sentence(stub, sent, smap, make_context(), n_steps=0,
                             display_index=1)


@pytest.fixture(scope="module")
def fitted():
    from _helpers import simulated_dataset
    from salperc.design import FactorTerm, ModelSpec, RandomIntercept, SmoothTerm
    from salperc.model import fit

    records, _, plan, sentences = simulated_dataset(
        {"saliency": lambda s: 8.0 * s}, n_participants=5, n_sentences=25,
        seed=31)
    spec = ModelSpec((
        SmoothTerm("saliency", num_basis=6, lam=1.0),
        FactorTerm("capitalization"),
        RandomIntercept("worker_id", lam=4.0),
    ), double_penalty=False)
    return fit(records, spec), sentences


class TestFittedModelIntegration:
    def test_space_reflects_training_data(self, fitted):
        model, _ = fitted
        space = covariate_space_from_model(model)
        assert "saliency" not in space
        lo, hi = space["word_length"]
        assert lo == hi  # unused covariate collapses to a point
        assert set(space["capitalization"]) <= set(CAPITALIZATION_LEVELS)

    def test_select_and_correct_end_to_end(self, fitted):
        model, sentences = fitted
        space = covariate_space_from_model(model)
        ref = select_reference_context(model, space, n=201, seed=1)
        for field in TokenContext.NUMERIC_FIELDS:
            v = getattr(ref.context, field)
            assert np.isfinite(v)
        sent = sentences[0]
        smap = SaliencyMap(sent.id, tuple(
            0.1 + 0.8 * i / max(1, len(sent) - 1) for i in range(len(sent))))
        corrected, report = correct_sentence(model, sent, smap, ref,
                                             n_steps=20, display_index=1)
        assert len(corrected.scores) == len(sent)
        assert all(0.0 <= s <= 1.0 for s in corrected.scores)
        assert report.removed_percent <= 100.0

    def test_batch_and_loop_paths_agree(self, fitted):
        model, _ = fitted
        space = covariate_space_from_model(model)
        a = select_reference_context(model, space, n=151, seed=8)

        class LoopOnly:
            def predict_latent_averaged(self, s, x, extra=None):
                return model.predict_latent_averaged(s, x, extra)

        b = select_reference_context(LoopOnly(), space, n=151, seed=8)
        assert a.context == b.context


class TestBiasRemovedPercent:
    def _snap(self, *bs):
        return BiasSnapshot(tuple(BiasScore(b, 0.0, b) for b in bs))

    def test_unchanged_is_zero(self):
        snap = self._snap(0.5, -0.3)
        assert bias_removed_percent(snap, snap) == 0.0

    def test_full_removal_is_hundred(self):
        assert bias_removed_percent(self._snap(0.5, -0.3), self._snap(0.0, 0.0)) == 100.0

    def test_zero_before_defined_as_zero(self):
        assert bias_removed_percent(self._snap(0.0), self._snap(0.0)) == 0.0

    def test_halving(self):
        assert bias_removed_percent(self._snap(0.4, -0.4), self._snap(0.2, 0.2)) == pytest.approx(50.0)

    def test_mismatched_token_sets_rejected(self):
        with pytest.raises(ValueError, match="token"):
            bias_removed_percent(self._snap(0.1), self._snap(0.1, 0.2))

    def test_report_consistency(self):
        before = self._snap(0.5, -0.5)
        after = self._snap(0.05, 0.05)
        rep = BiasReport(before, after, bias_removed_percent(before, after))
        assert rep.removed_percent == pytest.approx(90.0)
        assert rep.before.abs_total == pytest.approx(1.0)
        assert rep.after.abs_total == pytest.approx(0.1)
