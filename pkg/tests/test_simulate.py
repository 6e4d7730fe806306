import io
from collections import Counter

import numpy as np
import pytest

from _helpers import toy_corpus
from salperc.features import VIS_CONDITIONS
from salperc.simulate import (
    CONDITION_ORDERINGS,
    EN_CUT_POINTS,
    GroundTruthModel,
    StudyPlan,
    drop_trap_records,
    make_study_plan,
    random_saliencies,
    read_plan,
    simulate_ratings,
    write_plan,
)


class TestRandomSaliencies:
    def test_uniform_mean(self):
        rng = np.random.default_rng(0)
        sentences, _ = toy_corpus(rng, 50, min_tokens=10, max_tokens=10)
        draws = []
        for k in range(200):
            for s in sentences:
                draws.extend(random_saliencies(s, seed=k).scores)
        draws = np.array(draws[:100_000])
        assert 0.49 <= draws.mean() <= 0.51

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        sentences, _ = toy_corpus(rng, 1)
        a = random_saliencies(sentences[0], seed=42, worker_id="w7")
        b = random_saliencies(sentences[0], seed=42, worker_id="w7")
        assert a == b
        c = random_saliencies(sentences[0], seed=43, worker_id="w7")
        assert a != c

    def test_ks_statistic_against_uniform(self):
        rng = np.random.default_rng(2)
        sentences, _ = toy_corpus(rng, 100, min_tokens=10, max_tokens=10)
        draws = []
        for k in range(10):
            for s in sentences:
                draws.extend(random_saliencies(s, seed=k).scores)
        x = np.sort(np.array(draws[:10_000]))
        n = len(x)
        # direct empirical-CDF oracle: sup gap against F(t) = t
        upper = np.max(np.arange(1, n + 1) / n - x)
        lower = np.max(x - np.arange(0, n) / n)
        assert max(upper, lower) < 0.02


class TestStudyPlan:
    def _sentences(self, n, seed=3):
        rng = np.random.default_rng(seed)
        sentences, _ = toy_corpus(rng, n)
        return sentences

    def test_within_subject_condition_counts(self):
        plan = make_study_plan(self._sentences(150), 6, mode="within-subject", seed=5)
        for part in plan.participants:
            counts = Counter(it.condition for it in part.items if not it.is_trap)
            assert counts == {c: 50 for c in VIS_CONDITIONS}

    def test_orderings_balanced_over_60(self):
        plan = make_study_plan(self._sentences(30), 60, mode="within-subject", seed=5)
        counts = Counter(p.condition_ordering for p in plan.participants)
        assert len(counts) == 6
        assert set(counts.values()) == {10}
        assert set(counts) == set(CONDITION_ORDERINGS)

    def test_traps_in_last_two_thirds_150(self):
        plan = make_study_plan(self._sentences(150), 4, seed=6)
        for part in plan.participants:
            trap_pos = [i for i, it in enumerate(part.items) if it.is_trap]
            assert len(trap_pos) == 3
            assert all(i >= 51 for i in trap_pos)

    def test_sentence_order_fixed_within_subject(self):
        plan = make_study_plan(self._sentences(30), 5, mode="within-subject", seed=7)
        orders = [
            tuple(it.sentence_id for it in part.items if not it.is_trap)
            for part in plan.participants
        ]
        assert len(set(orders)) == 1

    def test_sentence_order_randomized_single_condition(self):
        plan = make_study_plan(self._sentences(30), 5, mode="single-condition", seed=7)
        orders = {
            tuple(it.sentence_id for it in part.items if not it.is_trap)
            for part in plan.participants
        }
        assert len(orders) > 1

    def test_indivisible_within_subject_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            make_study_plan(self._sentences(50), 2, mode="within-subject")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            make_study_plan(self._sentences(6), 1, mode="mixed")

    def test_random_plans_satisfy_invariants(self):
        rng = np.random.default_rng(8)
        for k in range(200):
            mode = ("single-condition", "within-subject")[k % 2]
            n = int(rng.integers(2, 13)) * 3
            plan = make_study_plan(self._sentences(n, seed=k), int(rng.integers(1, 7)),
                                   mode=mode, seed=int(rng.integers(1 << 16)))
            plan.validate(n_sentences=n)

    def test_plan_serialization_round_trip(self):
        plan = make_study_plan(self._sentences(12), 3, mode="within-subject", seed=9)
        buf = io.StringIO()
        write_plan(plan, buf)
        buf.seek(0)
        back = read_plan(buf)
        assert back == plan


class TestSimulateRatings:
    def _setup(self, n_sentences=40, n_participants=10, seed=11, **gt_kw):
        rng = np.random.default_rng(seed)
        sentences, freq = toy_corpus(rng, n_sentences)
        gt = GroundTruthModel(gt_kw.pop("latent_fns", {}), **gt_kw)
        plan = make_study_plan(sentences, n_participants, seed=seed)
        records = simulate_ratings(gt, plan, {s.id: s for s in sentences},
                                   seed=seed, freq_table=freq)
        return records, gt, plan

    def test_flat_model_matches_closed_form_probs(self):
        records, gt, plan = self._setup(n_sentences=200, n_participants=500)
        kept = drop_trap_records(records, plan)
        assert len(kept) == 100_000
        ratings = np.array([r.rating for r in kept])
        empirical = np.bincount(ratings, minlength=8)[1:] / len(ratings)
        expected = gt.category_probs(0.0)
        assert np.max(np.abs(empirical - expected)) < 0.01

    def test_no_worker_effect_when_sd_zero(self):
        records, _, plan = self._setup(n_sentences=100, n_participants=30)
        kept = drop_trap_records(records, plan)
        ratings = np.array([r.rating for r in kept])
        workers = np.array([r.worker_id for r in kept])
        levels = sorted(set(workers))
        means = np.array([ratings[workers == w].mean() for w in levels])
        observed = means.var()
        rng = np.random.default_rng(0)
        perm_vars = []
        for _ in range(500):
            shuffled = rng.permutation(ratings)
            perm_vars.append(np.array([
                shuffled[workers == w].mean() for w in levels
            ]).var())
        p = np.mean(np.array(perm_vars) >= observed)
        assert p > 0.001

    def test_saturation_at_huge_slope(self):
        records, gt, plan = self._setup(
            n_sentences=20, n_participants=5,
            latent_fns={"saliency": lambda s: 1e6 * (s + 0.1)},
        )
        kept = drop_trap_records(records, plan)
        assert all(r.rating == gt.num_categories for r in kept)

    def test_reproducible(self):
        a, _, _ = self._setup(n_sentences=15, n_participants=3, seed=21)
        b, _, _ = self._setup(n_sentences=15, n_participants=3, seed=21)
        assert a == b

    def test_honest_workers_pass_traps(self):
        records, _, plan = self._setup(n_sentences=15, n_participants=6)
        trap_ids = {t.id for t in plan.trap_sentences}
        expected = {it.sentence_id: it.trap_expected
                    for part in plan.participants for it in part.items if it.is_trap}
        trap_records = [r for r in records if r.sentence_id in trap_ids]
        assert len(trap_records) == 6 * 3
        assert all(r.rating == expected[r.sentence_id] for r in trap_records)

    def test_clicker_persona_fails_traps(self):
        rng = np.random.default_rng(23)
        sentences, _ = toy_corpus(rng, 30)
        gt = GroundTruthModel({})
        plan = make_study_plan(sentences, 4, seed=23)
        clicker = plan.participants[0].worker_id
        records = simulate_ratings(gt, plan, {s.id: s for s in sentences}, seed=23,
                                   clicker_workers=[clicker])
        trap_ids = {t.id for t in plan.trap_sentences}
        expected = {it.sentence_id: it.trap_expected
                    for it in plan.participants[0].items if it.is_trap}
        clicker_traps = [r for r in records
                         if r.worker_id == clicker and r.sentence_id in trap_ids]
        assert any(r.rating != expected[r.sentence_id] for r in clicker_traps)

    def test_completion_time_median_near_six_seconds(self):
        records, _, _ = self._setup(n_sentences=60, n_participants=20)
        times = np.array([r.completion_time_s for r in records])
        assert np.all(times > 0)
        assert 4.5 <= np.median(times) <= 7.5

    def test_cut_point_presets_increasing(self):
        for cuts in (EN_CUT_POINTS,):
            gt = GroundTruthModel({}, cuts=cuts)
            assert gt.cuts[0] == -1.0
        with pytest.raises(ValueError, match="increasing"):
            GroundTruthModel({}, cuts=(-1.0, 1.0, 0.5))

    def test_negative_sd_rejected(self):
        with pytest.raises(ValueError, match="sd"):
            GroundTruthModel({}, worker_intercept_sd=-0.1)
