import math

import numpy as np
import pytest

from helpers import (
    brute_force_posteriors,
    ce_losses_oracle,
    make_annotations,
    q_objective_oracle,
    random_annotation_setup,
)
from crowdrel.baselines import dawid_skene
from crowdrel.data import AnnotationSet, LabelSet, feature_matrix
from crowdrel.model import (
    ModelState,
    TrainConfig,
    ce_losses,
    e_step,
    emission_prob,
    estimator_pair_inputs,
    label_prior,
    load_model,
    posterior_from_priors,
    predict_labels,
    pretrain,
    q_objective,
    reliability_scores,
    save_model,
    train,
)
from crowdrel.neural import backward, forward, init_fnn
from crowdrel.simulate import default_panel, gen_2d, simulate_annotations


class TestEmissionProb:
    def test_reliable_match(self):
        assert emission_prob(2, 2, 1, 3) == 1.0

    def test_reliable_mismatch(self):
        assert emission_prob(0, 2, 1, 3) == 0.0

    def test_unreliable_is_uniform(self):
        for a in range(4):
            for t in range(4):
                assert emission_prob(a, t, 0, 4) == 0.25


def two_annotator_case():
    ann = make_annotations([(0, 0, 0), (0, 1, 1)], 1, 2, 2)
    return posterior_from_priors(np.array([[0.6, 0.4]]), np.array([0.8, 0.5]), ann)


class TestPosteriorFromPriors:
    def test_worked_two_annotator_example(self):
        post = two_annotator_case()
        # exact values from enumerating the 0.165 total mass
        assert post.label_posterior[0, 0] == pytest.approx(9 / 11, abs=1e-10)
        assert post.tables[0, 0, 1] == pytest.approx(8 / 11, abs=1e-10)
        assert post.tables[0, 0, 0] == pytest.approx(1 / 11, abs=1e-10)
        assert post.tables[0, 1, 1] == 0.0
        assert post.tables[0, 1, 0] == pytest.approx(2 / 11, abs=1e-10)
        assert post.reliability_posterior[0] == pytest.approx(8 / 11, abs=1e-10)

    def test_certain_annotator_forces_label(self):
        ann = make_annotations([(0, 0, 1)], 1, 1, 3)
        post = posterior_from_priors(np.array([[0.2, 0.5, 0.3]]), np.array([1.0]), ann)
        assert post.label_posterior[0, 1] == pytest.approx(1.0, abs=1e-9)

    def test_useless_annotator_leaves_prior(self):
        prior = np.array([[0.2, 0.5, 0.3]])
        ann = make_annotations([(0, 0, 0)], 1, 1, 3)
        post = posterior_from_priors(prior, np.array([0.0]), ann)
        np.testing.assert_allclose(post.label_posterior, prior, atol=1e-9)
        assert post.reliability_posterior[0] <= 1e-9

    def test_matches_brute_force_enumeration(self):
        rng = np.random.default_rng(2024)
        for _ in range(30):
            lp, rel, ann = random_annotation_setup(rng)
            post = posterior_from_priors(lp, rel, ann)
            tables, label_post = brute_force_posteriors(lp, rel, ann)
            np.testing.assert_allclose(post.tables, tables, atol=1e-10)
            np.testing.assert_allclose(post.label_posterior, label_post, atol=1e-10)

    def test_invariants_hold(self):
        rng = np.random.default_rng(77)
        for _ in range(20):
            lp, rel, ann = random_annotation_setup(rng)
            post = posterior_from_priors(lp, rel, ann)
            # every table is a distribution
            np.testing.assert_allclose(post.tables.sum(axis=(1, 2)), 1.0, atol=1e-9)
            # reliable mass sits only on the annotated label
            mask = np.ones_like(post.tables[:, :, 1], dtype=bool)
            mask[np.arange(ann.n_pairs), ann.label_idx] = False
            assert np.all(post.tables[:, :, 1][mask] == 0.0)
            # marginalizing any pair of the same instance gives the same label posterior
            label_marginals = post.tables.sum(axis=2)
            for p in range(ann.n_pairs):
                np.testing.assert_allclose(
                    label_marginals[p], post.label_posterior[ann.instance_idx[p]], atol=1e-10)


def small_state(rng, n_labels=3, n_annotators=4, input_dim=2, estimator_input="feature"):
    rep_dim = input_dim if estimator_input == "feature" else 3
    classifier = init_fnn(input_dim, 3, 3, n_labels, "softmax", rng)
    estimator = init_fnn(rep_dim + n_annotators, 3, 3, 1, "sigmoid", rng)
    for net in (classifier, estimator):
        for b in net.biases:
            b[:] = rng.normal(0.0, 0.3, size=b.shape)  # keep ReLU kinks off the data
    return ModelState(classifier=classifier, estimator=estimator, n_labels=n_labels,
                      n_annotators=n_annotators, estimator_input=estimator_input)


def random_model_setup(rng, estimator_input="feature"):
    n, m, k = 8, 4, 3
    state = small_state(rng, n_labels=k, n_annotators=m, estimator_input=estimator_input)
    x = rng.normal(size=(n, 2))
    triples = [(i, j, int(rng.integers(0, k))) for i in range(n) for j in range(m)
               if rng.random() < 0.8 or j == 0]
    ann = make_annotations(triples, n, m, k)
    return state, x, ann


class TestObjectives:
    def test_q_matches_quadruple_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            state, x, ann = random_model_setup(rng)
            post = e_step(state, x, ann)
            expected = q_objective_oracle(
                label_prior(state, x),
                forward(state.estimator, estimator_pair_inputs(x, ann))[0],
                post.tables, ann)
            assert q_objective(state, post, x, ann) == pytest.approx(expected, abs=1e-9)

    def test_ce_losses_match_loop_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            state, x, ann = random_model_setup(rng)
            post = e_step(state, x, ann)
            expected = ce_losses_oracle(
                label_prior(state, x),
                forward(state.estimator, estimator_pair_inputs(x, ann))[0],
                post.tables, ann)
            got = ce_losses(state, post, x, ann)
            assert got[0] == pytest.approx(expected[0], abs=1e-9)
            assert got[1] == pytest.approx(expected[1], abs=1e-9)

    def test_q_first_terms_are_negative_entropies_at_match(self):
        # when priors equal posteriors the first two terms hit the entropy bound
        rng = np.random.default_rng(7)
        state, x, ann = random_model_setup(rng)
        post = e_step(state, x, ann)
        lp = label_prior(state, x)
        rel = forward(state.estimator, estimator_pair_inputs(x, ann))[0]
        matched = posterior_from_priors(lp, rel, ann)
        # construct the three Q terms directly from the matched posteriors
        value = q_objective(state, matched, x, ann)
        ent_t = -(matched.label_posterior * np.log(lp)).sum()
        r = matched.reliability_posterior
        ent_r = -(r * np.log(rel) + (1 - r) * np.log(1 - rel)).sum()
        third = -math.log(ann.n_labels) * (1 - r).sum()
        assert value == pytest.approx(-ent_t - ent_r + third, abs=1e-9)

    def test_third_term_zero_when_fully_reliable(self):
        ann = make_annotations([(0, 0, 1)], 1, 1, 2)
        post = posterior_from_priors(np.array([[0.3, 0.7]]), np.array([1.0]), ann)
        assert post.reliability_posterior[0] == pytest.approx(1.0, abs=1e-9)
        # r=1 mass only: the emission expectation contributes log 1 = 0
        third = -math.log(2) * (1.0 - post.reliability_posterior).sum()
        assert third == pytest.approx(0.0, abs=1e-9)

    def test_uniform_classifier_prior_costs_log_k(self):
        rng = np.random.default_rng(8)
        k, m, n = 6, 2, 5
        state = small_state(rng, n_labels=k, n_annotators=m)
        for w in state.classifier.weights:
            w[:] = 0.0
        for b in state.classifier.biases:
            b[:] = 0.0
        x = rng.normal(size=(n, 2))
        triples = [(i, j, int(rng.integers(0, k))) for i in range(n) for j in range(m)]
        ann = make_annotations(triples, n, m, k)
        post = e_step(state, x, ann)
        loss_t, _ = ce_losses(state, post, x, ann)
        assert loss_t == pytest.approx(math.log(6.0), abs=1e-9)

    def test_gradients_match_finite_differences(self):
        # feature mode: the estimator input does not depend on the classifier,
        # so the analytic per-network gradients are the full derivative
        rng = np.random.default_rng(9)
        state, x, ann = random_model_setup(rng, estimator_input="feature")
        post = e_step(state, x, ann)
        n, p = float(len(x)), float(ann.n_pairs)
        pair_x = estimator_pair_inputs(x, ann)
        grads_t = backward(state.classifier, x, post.label_posterior, n)
        grads_r = backward(state.estimator, pair_x, post.reliability_posterior, p)
        h = 1e-5

        def ce_total():
            return sum(ce_losses(state, post, x, ann))

        def q_value():
            return q_objective(state, post, x, ann)

        for arrays, grads, norm in ((state.classifier.arrays(), grads_t, n),
                                    (state.estimator.arrays(), grads_r, p)):
            for arr, grad in zip(arrays, grads):
                flat, gflat = arr.ravel(), grad.ravel()
                for pos in range(0, flat.size, max(1, flat.size // 3)):
                    keep = flat[pos]
                    flat[pos] = keep + h
                    up_ce, up_q = ce_total(), q_value()
                    flat[pos] = keep - h
                    down_ce, down_q = ce_total(), q_value()
                    flat[pos] = keep
                    numeric_ce = (up_ce - down_ce) / (2 * h)
                    numeric_q = (up_q - down_q) / (2 * h)
                    analytic = gflat[pos]
                    assert abs(numeric_ce - analytic) < 1e-4 * max(1e-4, abs(analytic))
                    # Q is the unnormalized negative of the same cross entropy
                    assert abs(numeric_q + analytic * norm) < 1e-4 * max(1e-4, abs(analytic) * norm)


@pytest.fixture(scope="module")
def moon_setup():
    instances, gold = gen_2d("moon", 400, seed=1)
    ann = simulate_annotations(gold, 2, default_panel(2), seed=1,
                               instance_ids=[inst.id for inst in instances])
    return feature_matrix(instances), ann, gold.to_array(400)


class TestPretrain:
    def test_unanimous_annotators_give_perfect_classifier(self):
        from crowdrel.simulate import AnnotatorProfile
        instances, gold = gen_2d("three-class", 300, noise=0.3, seed=3)
        perfect = [AnnotatorProfile("graded", error_prob=0.0) for _ in range(3)]
        ann = simulate_annotations(gold, 3, perfect, seed=3,
                                   instance_ids=[inst.id for inst in instances])
        x = feature_matrix(instances)
        state = pretrain(x, ann, TrainConfig(pretrain_source="mv", pretrain_epochs=2000, seed=1))
        pred = label_prior(state, x).argmax(axis=1)
        assert np.mean(pred == gold.to_array(300)) == 1.0

    def test_ds_pretrained_classifier_tracks_ds_score(self, moon_setup):
        x, ann, gold = moon_setup
        ds_f1 = float((dawid_skene(ann, 2).hard_labels == gold).mean())
        # converged pretraining lands within two points of its own targets' quality
        state = pretrain(x, ann, TrainConfig(pretrain_source="ds", pretrain_epochs=2000, seed=1))
        clf_f1 = float((label_prior(state, x).argmax(axis=1) == gold).mean())
        assert abs(clf_f1 - ds_f1) <= 0.02

    def test_adversary_agreement_rate_matches_correctness(self, moon_setup):
        x, ann, gold = moon_setup
        ds_labels = dawid_skene(ann, 2).hard_labels
        adversary = ann.annotator_idx == 4
        agreement = float((ann.label_idx == ds_labels[ann.instance_idx])[adversary].mean())
        correctness = float((ann.label_idx == gold[ann.instance_idx])[adversary].mean())
        assert agreement == pytest.approx(correctness, abs=0.03)


class TestTrain:
    def test_zero_outer_returns_pretrained_state(self, moon_setup):
        x, ann, _ = moon_setup
        cfg = TrainConfig(mode="ce-jt", max_outer=0, seed=5)
        result = train(x, ann, cfg)
        assert result.trace == []
        reference = pretrain(x, ann, cfg)
        for a, b in zip(result.state.classifier.arrays(), reference.classifier.arrays()):
            assert np.array_equal(a, b)
        for a, b in zip(result.state.estimator.arrays(), reference.estimator.arrays()):
            assert np.array_equal(a, b)

    def test_trace_records_objective_and_f1(self, moon_setup):
        x, ann, gold = moon_setup
        result = train(x, ann, TrainConfig(mode="ce-jt", max_outer=3, seed=5), gold=gold)
        assert [row.outer for row in result.trace] == [1, 2, 3]
        assert all(row.f1 is not None for row in result.trace)
        assert all(np.isfinite(row.objective_end) for row in result.trace)

    def test_huge_tolerance_stops_after_two_iterations(self, moon_setup):
        x, ann, _ = moon_setup
        result = train(x, ann, TrainConfig(mode="ce-jt", early_stop_tol=1e9, seed=5))
        assert len(result.trace) == 2

    def test_em_mode_improves_q_within_iterations(self, moon_setup):
        x, ann, _ = moon_setup
        result = train(x, ann, TrainConfig(mode="em", max_outer=5, seed=5))
        improved = [row.objective_end >= row.objective_start for row in result.trace]
        assert all(improved)

    def test_modes_resolve_outer_caps(self):
        assert TrainConfig(mode="em").resolved_max_outer() == 500
        assert TrainConfig(mode="ce-jt").resolved_max_outer() == 20
        assert TrainConfig(mode="ce-alt").resolved_max_outer() == 20
        assert TrainConfig(mode="ce-jt", max_outer=7).resolved_max_outer() == 7

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="sgd")
        with pytest.raises(ValueError):
            TrainConfig(inner_iters=0)
        with pytest.raises(ValueError):
            TrainConfig(pretrain_source="glad")


class TestPredict:
    def test_argmax_and_tie_rule(self):
        rng = np.random.default_rng(1)
        state = small_state(rng, n_labels=2, n_annotators=1)
        for net in (state.classifier, state.estimator):
            for w in net.weights:
                w[:] = 0.0
            for b in net.biases:
                b[:] = 0.0
        # instance 1 has no annotation: posterior is the exactly-uniform prior
        ann = AnnotationSet(n_instances=2, n_annotators=1, n_labels=2,
                            instance_idx=np.array([0]), annotator_idx=np.array([0]),
                            label_idx=np.array([0]))
        x = np.zeros((2, 2))
        pred, posterior = predict_labels(state, x, ann)
        assert posterior[1, 0] == posterior[1, 1] == 0.5
        assert pred[1] == 0  # exact tie resolves to the lowest index
        assert posterior[0, 0] > 0.5 and pred[0] == 0

    def test_reliability_scores_shapes_and_range(self, moon_setup):
        x, ann, _ = moon_setup
        result = train(x, ann, TrainConfig(mode="ce-jt", max_outer=2, seed=5))
        scores = reliability_scores(result.state, x, ann)
        assert scores.posterior.shape == (ann.n_pairs,)
        assert scores.prior.shape == (len(x), ann.n_annotators)
        assert np.all((scores.posterior >= 0) & (scores.posterior <= 1))
        assert np.all((scores.prior > 0) & (scores.prior < 1))


class TestAnnotatorPermutation:
    def test_equivariance_under_annotator_relabeling(self):
        rng = np.random.default_rng(13)
        state, x, ann = random_model_setup(rng, estimator_input="feature")
        m = ann.n_annotators
        perm = np.random.default_rng(0).permutation(m)

        permuted_est = state.estimator.copy()
        rep_dim = x.shape[1]
        for j in range(m):
            permuted_est.weights[0][rep_dim + perm[j]] = state.estimator.weights[0][rep_dim + j]
        permuted_state = ModelState(classifier=state.classifier, estimator=permuted_est,
                                    n_labels=state.n_labels, n_annotators=m,
                                    estimator_input="feature")
        permuted_ann = AnnotationSet(
            n_instances=ann.n_instances, n_annotators=m, n_labels=ann.n_labels,
            instance_idx=ann.instance_idx, annotator_idx=perm[ann.annotator_idx],
            label_idx=ann.label_idx)

        base = e_step(state, x, ann)
        moved = e_step(permuted_state, x, permuted_ann)
        np.testing.assert_allclose(moved.label_posterior, base.label_posterior, atol=1e-9)
        np.testing.assert_allclose(moved.reliability_posterior, base.reliability_posterior,
                                   atol=1e-9)
        prior = reliability_scores(state, x, ann).prior
        moved_prior = reliability_scores(permuted_state, x, permuted_ann).prior
        np.testing.assert_allclose(moved_prior[:, perm], prior, atol=1e-9)


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path, moon_setup):
        x, ann, _ = moon_setup
        cfg = TrainConfig(mode="ce-jt", max_outer=2, seed=5)
        result = train(x, ann, cfg)
        path = tmp_path / "model.json"
        save_model(path, result.state, LabelSet(("0", "1")), cfg)
        restored, labels, cfg_back = load_model(path)
        assert labels.labels == ("0", "1")
        assert cfg_back == cfg
        before, _ = predict_labels(result.state, x, ann)
        after, _ = predict_labels(restored, x, ann)
        assert np.array_equal(before, after)
