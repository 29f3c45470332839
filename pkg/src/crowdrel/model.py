"""Joint inference of true labels and per-instance annotator reliability.

A classifier network provides a prior over each instance's label and a
reliability-estimator network provides, per (instance, annotator) pair,
the prior probability that the annotation is correct. A reliable
annotator emits the true label; an unreliable one emits a label drawn
uniformly over all categories. Exact per-pair posteriors over
(label, reliable) follow in closed form, and the networks are refit
against those posteriors either by generalized EM (gradient steps on the
expected complete log likelihood) or by minimizing soft-target cross
entropies, alternating or jointly.

All posterior products run in log space with priors floored at 1e-12, so
large annotator counts cannot underflow.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import dawid_skene, majority_vote
from .data import AnnotationSet, LabelSet
from .neural import (
    PROB_FLOOR,
    AdamState,
    FnnParams,
    adam_step,
    backward,
    fnn_from_dict,
    fnn_to_dict,
    forward,
    init_fnn,
    soft_ce_loss,
)

MODES = ("em", "ce-alt", "ce-jt")
PRETRAIN_SOURCES = ("mv", "ds")
ESTIMATOR_INPUTS = ("hidden", "feature")


@dataclass
class TrainConfig:
    """Training schedule and optimizer settings.

    ``max_outer`` defaults to 500 for EM and 20 for the cross-entropy
    modes when left as None. The inner loop always runs ``inner_iters``
    full-batch optimizer steps per outer iteration.
    """

    mode: str = "ce-jt"
    inner_iters: int = 50
    max_outer: int | None = None
    early_stop_tol: float = 1e-3
    pretrain_source: str = "ds"
    pretrain_epochs: int = 200
    classifier_hidden: int = 5
    estimator_hidden: int = 5
    estimator_input: str = "hidden"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.001
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pretrain_source not in PRETRAIN_SOURCES:
            raise ValueError(f"pretrain_source must be one of {PRETRAIN_SOURCES}")
        if self.estimator_input not in ESTIMATOR_INPUTS:
            raise ValueError(f"estimator_input must be one of {ESTIMATOR_INPUTS}")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.early_stop_tol <= 0:
            raise ValueError("early_stop_tol must be positive")

    def resolved_max_outer(self) -> int:
        if self.max_outer is not None:
            return self.max_outer
        return 500 if self.mode == "em" else 20


@dataclass
class ModelState:
    """Trained (or pre-trained) networks plus the wiring they assume."""

    classifier: FnnParams
    estimator: FnnParams
    n_labels: int
    n_annotators: int
    estimator_input: str
    outer_iteration: int = 0


@dataclass
class JointPosterior:
    """Per-pair posteriors over (label, reliable) plus their marginals.

    ``tables`` has shape (n_pairs, n_labels, 2); entry [p, t, r] is the
    posterior that pair p's instance has label t and the annotation was
    produced reliably (r=1) or not. Mass at r=1 sits only on the
    annotated label. ``label_posterior`` is the (N, K) marginal over
    labels and ``reliability_posterior`` the (n_pairs,) marginal that
    each annotation was reliable.
    """

    tables: np.ndarray
    label_posterior: np.ndarray
    reliability_posterior: np.ndarray


def emission_prob(annotated: int, true: int, reliable: int, n_labels: int) -> float:
    """p(annotation | true label, reliability): uniform when unreliable, delta when reliable."""
    if reliable:
        return 1.0 if annotated == true else 0.0
    return 1.0 / n_labels


def posterior_from_priors(label_prior: np.ndarray, reliability_prior: np.ndarray,
                          annotations: AnnotationSet) -> JointPosterior:
    """Exact posterior given label priors (N, K) and per-pair reliability priors.

    For pair p = (i, j) with annotation a:
        pi_p(t, r) prop. p(t|x_i) p(r|x_i,j) p(a|t,r) prod_{j' != j} gamma_{ij'}(t)
    where gamma collapses each other annotator's reliability. The product
    over annotators is accumulated once per instance in log space and the
    pair's own factor divided back out.
    """
    n, k = label_prior.shape
    ii, ll = annotations.instance_idx, annotations.label_idx
    p = annotations.n_pairs
    log_k = np.log(k)

    log_prior_t = np.log(np.maximum(label_prior, PROB_FLOOR))
    p1 = np.asarray(reliability_prior, dtype=np.float64)
    log_p1 = np.log(np.maximum(p1, PROB_FLOOR))
    log_p0 = np.log(np.maximum(1.0 - p1, PROB_FLOOR))

    # gamma_p(t) = p0/K for t != a_p, p0/K + p1 at t = a_p
    log_gamma = np.repeat((log_p0 - log_k)[:, None], k, axis=1)
    log_gamma[np.arange(p), ll] = np.logaddexp(log_gamma[np.arange(p), ll], log_p1)

    scores = log_prior_t.copy()
    np.add.at(scores, ii, log_gamma)

    shift = scores.max(axis=1, keepdims=True)
    expd = np.exp(scores - shift)
    label_posterior = expd / expd.sum(axis=1, keepdims=True)

    # leave-one-out score, then the pair's own (t, r) factors
    loo = scores[ii] - log_gamma
    log_unnorm_r0 = loo + (log_p0 - log_k)[:, None]
    log_unnorm_r1 = loo[np.arange(p), ll] + log_p1

    pair_shift = np.maximum(log_unnorm_r0.max(axis=1), log_unnorm_r1)
    if not np.all(np.isfinite(pair_shift)):
        raise FloatingPointError("posterior table degenerated to all zeros")
    e0 = np.exp(log_unnorm_r0 - pair_shift[:, None])
    e1 = np.exp(log_unnorm_r1 - pair_shift)
    totals = e0.sum(axis=1) + e1

    tables = np.zeros((p, k, 2), dtype=np.float64)
    tables[:, :, 0] = e0 / totals[:, None]
    tables[np.arange(p), ll, 1] = e1 / totals
    return JointPosterior(
        tables=tables,
        label_posterior=label_posterior,
        reliability_posterior=e1 / totals,
    )


def annotator_onehot(annotator_idx: np.ndarray, n_annotators: int) -> np.ndarray:
    out = np.zeros((len(annotator_idx), n_annotators), dtype=np.float64)
    out[np.arange(len(annotator_idx)), annotator_idx] = 1.0
    return out


def instance_representation(state: ModelState, features: np.ndarray) -> np.ndarray:
    """What the estimator sees per instance: raw features or classifier hidden output."""
    if state.estimator_input == "feature":
        return np.asarray(features, dtype=np.float64)
    _, hidden = forward(state.classifier, features)
    return hidden


def estimator_pair_inputs(representation: np.ndarray, annotations: AnnotationSet) -> np.ndarray:
    onehot = annotator_onehot(annotations.annotator_idx, annotations.n_annotators)
    return np.concatenate([representation[annotations.instance_idx], onehot], axis=1)


def label_prior(state: ModelState, features: np.ndarray) -> np.ndarray:
    probs, _ = forward(state.classifier, features)
    return probs


def reliability_prior(state: ModelState, features: np.ndarray,
                      annotations: AnnotationSet) -> np.ndarray:
    rep = instance_representation(state, features)
    probs, _ = forward(state.estimator, estimator_pair_inputs(rep, annotations))
    return probs


def e_step(state: ModelState, features: np.ndarray,
           annotations: AnnotationSet) -> JointPosterior:
    """Posteriors under the current networks (the fixed-parameter inference step)."""
    return posterior_from_priors(
        label_prior(state, features),
        reliability_prior(state, features, annotations),
        annotations,
    )


def _adam_from_config(config: TrainConfig) -> AdamState:
    return AdamState(
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        weight_decay=config.weight_decay,
        clip_norm=config.clip_norm,
    )


def _fit_full_batch(params: FnnParams, inputs: np.ndarray, targets: np.ndarray,
                    epochs: int, config: TrainConfig) -> None:
    opt = _adam_from_config(config)
    normalizer = float(len(inputs))
    arrays = params.arrays()
    for _ in range(epochs):
        grads = backward(params, inputs, targets, normalizer)
        adam_step(arrays, grads, opt)


def pretrain_labels(annotations: AnnotationSet, n_labels: int, source: str) -> np.ndarray:
    if source == "mv":
        return majority_vote(annotations, n_labels)
    return dawid_skene(annotations, n_labels).hard_labels


def pretrain(features: np.ndarray, annotations: AnnotationSet,
             config: TrainConfig) -> ModelState:
    """Initialize both networks from an aggregation baseline.

    The classifier fits hard cross entropy against majority-vote or
    Dawid-Skene labels; the estimator then fits binary agreement targets
    (1 where the annotation matches the baseline label).
    """
    features = np.asarray(features, dtype=np.float64)
    k, m = annotations.n_labels, annotations.n_annotators
    clf_seed, est_seed = np.random.SeedSequence(config.seed).spawn(2)

    classifier = init_fnn(features.shape[1], config.classifier_hidden,
                          config.classifier_hidden, k, "softmax",
                          np.random.default_rng(clf_seed))
    labels = pretrain_labels(annotations, k, config.pretrain_source)
    onehot_targets = np.zeros((len(features), k), dtype=np.float64)
    onehot_targets[np.arange(len(features)), labels] = 1.0
    _fit_full_batch(classifier, features, onehot_targets, config.pretrain_epochs, config)

    if config.estimator_input == "feature":
        rep = features
    else:
        _, rep = forward(classifier, features)
    estimator = init_fnn(rep.shape[1] + m, config.estimator_hidden,
                         config.estimator_hidden, 1, "sigmoid",
                         np.random.default_rng(est_seed))
    state = ModelState(classifier=classifier, estimator=estimator,
                       n_labels=k, n_annotators=m,
                       estimator_input=config.estimator_input)
    agreement = (annotations.label_idx == labels[annotations.instance_idx]).astype(np.float64)
    _fit_full_batch(estimator, estimator_pair_inputs(rep, annotations),
                    agreement, config.pretrain_epochs, config)
    return state


def q_objective(state: ModelState, posteriors: JointPosterior, features: np.ndarray,
                annotations: AnnotationSet) -> float:
    """Expected complete log likelihood under fixed posteriors.

    The annotation-emission term is constant in the parameters (emissions
    carry none) but is included so monotonicity checks see the full value.
    """
    clf_probs = label_prior(state, features)
    est_probs = reliability_prior(state, features, annotations)
    return _q_value(clf_probs, est_probs, posteriors, annotations.n_labels)


def _q_value(clf_probs: np.ndarray, est_probs: np.ndarray,
             posteriors: JointPosterior, n_labels: int) -> float:
    rel = posteriors.reliability_posterior
    term_t = float((posteriors.label_posterior * np.log(np.maximum(clf_probs, PROB_FLOOR))).sum())
    term_r = float((rel * np.log(np.maximum(est_probs, PROB_FLOOR))
                    + (1.0 - rel) * np.log(np.maximum(1.0 - est_probs, PROB_FLOOR))).sum())
    term_a = float(-np.log(n_labels) * (1.0 - rel).sum())
    return term_t + term_r + term_a


def ce_losses(state: ModelState, posteriors: JointPosterior, features: np.ndarray,
              annotations: AnnotationSet) -> tuple[float, float]:
    """Per-network cross entropies between priors and the fixed posteriors.

    The classifier loss is normalized by the instance count and the
    estimator loss by the number of observed pairs.
    """
    clf_probs = label_prior(state, features)
    est_probs = reliability_prior(state, features, annotations)
    loss_t = soft_ce_loss(clf_probs, posteriors.label_posterior, float(len(features)))
    loss_r = soft_ce_loss(est_probs, posteriors.reliability_posterior,
                          float(annotations.n_pairs))
    return loss_t, loss_r


@dataclass
class TraceRow:
    outer: int
    objective_start: float
    objective_end: float
    f1: float | None = None


@dataclass
class TrainResult:
    state: ModelState
    trace: list[TraceRow] = field(default_factory=list)


def _micro_f1(pred: np.ndarray, gold_arr: np.ndarray) -> float:
    mask = gold_arr >= 0
    return float((pred[mask] == gold_arr[mask]).mean())


def train(features: np.ndarray, annotations: AnnotationSet, config: TrainConfig,
          gold: np.ndarray | None = None) -> TrainResult:
    """Pre-train, then alternate inference and network refitting.

    Each outer iteration computes posteriors under the current
    parameters, freezes them (and, in hidden mode, the estimator's input
    representation) and runs ``inner_iters`` optimizer steps on the
    mode's objective. Training stops at the iteration cap or when the
    objective improves by less than ``early_stop_tol`` between outer
    iterations. ``gold`` (label index per instance, -1 for missing) only
    feeds the diagnostic F1 column of the trace.
    """
    features = np.asarray(features, dtype=np.float64)
    state = pretrain(features, annotations, config)
    max_outer = config.resolved_max_outer()
    result = TrainResult(state=state)
    if max_outer == 0:
        return result

    n = float(len(features))
    n_pairs = float(annotations.n_pairs)
    clf_arrays = state.classifier.arrays()
    est_arrays = state.estimator.arrays()
    if config.mode == "ce-alt":
        opt_t, opt_r = _adam_from_config(config), _adam_from_config(config)
    else:
        opt_joint = _adam_from_config(config)

    def objective(pair_x: np.ndarray, post: JointPosterior) -> float:
        clf_probs, _ = forward(state.classifier, features)
        est_probs, _ = forward(state.estimator, pair_x)
        if config.mode == "em":
            return _q_value(clf_probs, est_probs, post, annotations.n_labels)
        return (soft_ce_loss(clf_probs, post.label_posterior, n)
                + soft_ce_loss(est_probs, post.reliability_posterior, n_pairs))

    previous_end: float | None = None
    for outer in range(1, max_outer + 1):
        post = e_step(state, features, annotations)
        rep = instance_representation(state, features)
        pair_x = estimator_pair_inputs(rep, annotations)
        label_targets = post.label_posterior
        rel_targets = post.reliability_posterior

        start = objective(pair_x, post)
        if config.mode == "em":
            for _ in range(config.inner_iters):
                grads = (backward(state.classifier, features, label_targets, 1.0)
                         + backward(state.estimator, pair_x, rel_targets, 1.0))
                adam_step(clf_arrays + est_arrays, grads, opt_joint)
        elif config.mode == "ce-jt":
            for _ in range(config.inner_iters):
                grads = (backward(state.classifier, features, label_targets, n)
                         + backward(state.estimator, pair_x, rel_targets, n_pairs))
                adam_step(clf_arrays + est_arrays, grads, opt_joint)
        else:
            for _ in range(config.inner_iters):
                adam_step(est_arrays, backward(state.estimator, pair_x, rel_targets, n_pairs), opt_r)
            for _ in range(config.inner_iters):
                adam_step(clf_arrays, backward(state.classifier, features, label_targets, n), opt_t)
        end = objective(pair_x, post)

        f1 = None
        if gold is not None:
            pred, _ = predict_labels(state, features, annotations)
            f1 = _micro_f1(pred, np.asarray(gold))
        result.trace.append(TraceRow(outer=outer, objective_start=start,
                                     objective_end=end, f1=f1))
        state.outer_iteration = outer
        if previous_end is not None:
            improved = (end - previous_end) if config.mode == "em" else (previous_end - end)
            if improved < config.early_stop_tol:
                break
        previous_end = end
    return result


def predict_labels(state: ModelState, features: np.ndarray,
                   annotations: AnnotationSet) -> tuple[np.ndarray, np.ndarray]:
    """Most probable label per instance under the annotation-informed posterior.

    Ties resolve to the lowest label index.
    """
    post = e_step(state, features, annotations)
    return post.label_posterior.argmax(axis=1), post.label_posterior


@dataclass
class ReliabilityScores:
    """Posterior reliability per observed pair, plus the estimator's priors.

    ``posterior`` aligns with the annotation triples. ``prior`` is the
    (N, M) matrix of estimator outputs for every pair, observed or not,
    for prediction-time use.
    """

    posterior: np.ndarray
    prior: np.ndarray


def reliability_scores(state: ModelState, features: np.ndarray,
                       annotations: AnnotationSet) -> ReliabilityScores:
    post = e_step(state, features, annotations)
    rep = instance_representation(state, features)
    n, m = len(features), annotations.n_annotators
    prior = np.empty((n, m), dtype=np.float64)
    block = np.zeros((n, m), dtype=np.float64)
    for j in range(m):
        block[:, j] = 1.0
        probs, _ = forward(state.estimator, np.concatenate([rep, block], axis=1))
        prior[:, j] = probs
        block[:, j] = 0.0
    return ReliabilityScores(posterior=post.reliability_posterior, prior=prior)


def save_model(path: str | Path, state: ModelState, label_set: LabelSet,
               config: TrainConfig) -> None:
    payload = {
        "format_version": 1,
        "labels": list(label_set.labels),
        "config": asdict(config),
        "n_labels": state.n_labels,
        "n_annotators": state.n_annotators,
        "estimator_input": state.estimator_input,
        "outer_iteration": state.outer_iteration,
        "classifier": fnn_to_dict(state.classifier),
        "estimator": fnn_to_dict(state.estimator),
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_model(path: str | Path) -> tuple[ModelState, LabelSet, TrainConfig]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported model checkpoint version {payload.get('format_version')!r}")
    state = ModelState(
        classifier=fnn_from_dict(payload["classifier"]),
        estimator=fnn_from_dict(payload["estimator"]),
        n_labels=payload["n_labels"],
        n_annotators=payload["n_annotators"],
        estimator_input=payload["estimator_input"],
        outer_iteration=payload["outer_iteration"],
    )
    return state, LabelSet(tuple(payload["labels"])), TrainConfig(**payload["config"])
