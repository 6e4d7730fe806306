"""Bias scoring and iterative correction of saliency maps.

A fitted perception model predicts how salient a highlighted word feels
given its visual and linguistic context.  Comparing that prediction with
the prediction for one fixed reference context gives a per-token bias
score; repeatedly nudging each score against the sign of its bias then
compensates the context effects, so that equal displayed saliency reads
as equal perceived saliency.

Everything here talks to the model only through
``predict_latent_averaged`` (plus, optionally, ``predict_latent_many``
as a batch fast path), so closed-form stand-ins work wherever a fitted
model does.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .features import SaliencyMap, Sentence, TokenContext, extract, saliency_rank

DEFAULT_ALPHA = 0.05
DEFAULT_N_STEPS = 100
DEFAULT_SAMPLE_COUNT = 10001
DEFAULT_PROBE_SALIENCY = 0.5

# fill-ins for covariates the model was never trained on; they complete
# the candidate vector but cannot move the model's predictions
_NUMERIC_DEFAULTS = {
    "word_length": 5.0,
    "word_frequency": 0.5,
    "sentence_length": 10.0,
    "display_index": 1.0,
    "sentiment_polarity": 0.0,
    "saliency_rank": 0.5,
    "word_position": 3.0,
}
_CATEGORICAL_DEFAULTS = {
    "capitalization": ("lower",),
    "dependency_relation": ("unknown",),
}


@dataclass(frozen=True)
class ReferenceContext:
    """The yardstick context against which bias is measured.

    Numeric fields are usually non-integral since the context is picked
    from uniformly sampled candidates, not from observed tokens.
    """

    context: TokenContext
    sample_count: int
    seed: int
    probe_saliency: float


@dataclass(frozen=True)
class BiasScore:
    p: float
    p_ref: float
    b: float

    def __post_init__(self):
        if self.b != self.p - self.p_ref:
            raise ValueError(
                f"b={self.b} is not p - p_ref = {self.p - self.p_ref}"
            )


@dataclass(frozen=True)
class BiasSnapshot:
    """Per-token bias scores of one sentence at one point in time."""

    scores: tuple

    def __len__(self):
        return len(self.scores)

    @property
    def abs_total(self) -> float:
        return float(sum(abs(sc.b) for sc in self.scores))


@dataclass(frozen=True)
class BiasReport:
    before: BiasSnapshot
    after: BiasSnapshot
    removed_percent: float

    def to_json(self) -> dict:
        return {
            "before": [{"p": sc.p, "p_ref": sc.p_ref, "b": sc.b}
                       for sc in self.before.scores],
            "after": [{"p": sc.p, "p_ref": sc.p_ref, "b": sc.b}
                      for sc in self.after.scores],
            "abs_total_before": self.before.abs_total,
            "abs_total_after": self.after.abs_total,
            "removed_percent": self.removed_percent,
        }


def covariate_space_from_model(model) -> dict:
    """Sampling space for reference candidates: the model's frozen
    training interval per numeric covariate and its level set per
    factor, with neutral one-point defaults for unused covariates."""
    space = {}
    ranges = model.design.ranges
    for field in TokenContext.NUMERIC_FIELDS:
        if field == "saliency":
            continue
        if field in ranges:
            space[field] = tuple(float(v) for v in ranges[field])
        else:
            d = _NUMERIC_DEFAULTS[field]
            space[field] = (d, d)
    factor_levels = {}
    for block in model.design.blocks:
        if block.kind == "factor":
            payload = block.payload
            factor_levels[payload["covariate"]] = (
                (payload["reference"], *payload["levels"]))
    for field in TokenContext.CATEGORICAL_FIELDS:
        space[field] = factor_levels.get(field, _CATEGORICAL_DEFAULTS[field])
    return space


def select_reference_context(model, space: dict, n: int = DEFAULT_SAMPLE_COUNT,
                             probe_s: float = DEFAULT_PROBE_SALIENCY,
                             seed: int = 0) -> ReferenceContext:
    """Pick the candidate context whose averaged prediction at the probe
    saliency is the median over n uniform draws from the space.

    n must be odd so the median is an attained candidate; ties on the
    median value go to the earliest candidate.
    """
    if n % 2 == 0:
        raise ValueError(f"n={n} is even; need an odd sample count so the "
                         "median prediction belongs to a candidate")
    rng = np.random.default_rng(seed)
    cols = {}
    for field in TokenContext.NUMERIC_FIELDS:
        if field == "saliency":
            continue
        lo, hi = space[field]
        cols[field] = rng.uniform(lo, hi, n)
    for field in TokenContext.CATEGORICAL_FIELDS:
        levels = tuple(space[field])
        draws = rng.integers(0, len(levels), n)
        cols[field] = [levels[j] for j in draws]
    # independent draws can pair a position with a shorter sentence
    cols["word_position"] = np.minimum(cols["word_position"],
                                       cols["sentence_length"])
    candidates = []
    for i in range(n):
        kw = {f: float(cols[f][i]) for f in TokenContext.NUMERIC_FIELDS
              if f != "saliency"}
        kw.update({f: cols[f][i] for f in TokenContext.CATEGORICAL_FIELDS})
        candidates.append(TokenContext(saliency=probe_s, **kw))
    batch = getattr(model, "predict_latent_many", None)
    if batch is not None:
        preds = np.asarray(batch([c.as_dict() for c in candidates],
                                 averaged=True), dtype=float)
    else:
        preds = np.array([model.predict_latent_averaged(probe_s, c)
                          for c in candidates])
    v = np.sort(preds)[n // 2]
    idx = int(np.flatnonzero(preds == v)[0])
    return ReferenceContext(candidates[idx], n, seed, probe_s)


def _unwrap(x_ref) -> TokenContext:
    return x_ref.context if isinstance(x_ref, ReferenceContext) else x_ref


def bias_score(model, s: float, x: TokenContext, x_ref) -> BiasScore:
    """Predicted perception of saliency s in context x minus its
    perception in the reference context, both at the same s."""
    ref = _unwrap(x_ref)
    p = float(model.predict_latent_averaged(s, x))
    p_ref = float(model.predict_latent_averaged(s, ref))
    return BiasScore(p, p_ref, p - p_ref)


def bias_removed_percent(before: BiasSnapshot, after: BiasSnapshot) -> float:
    if len(before) != len(after):
        raise ValueError(f"token sets differ: {len(before)} before "
                         f"vs {len(after)} after")
    total = before.abs_total
    if total == 0.0:
        return 0.0
    return 100.0 * (1.0 - after.abs_total / total)


def correct_sentence(model, sentence: Sentence, s_orig: SaliencyMap, x_ref,
                     alpha: float = DEFAULT_ALPHA,
                     n_steps: int = DEFAULT_N_STEPS, *, display_index,
                     freq_table=None,
                     sentiment_lexicon=None) -> tuple[SaliencyMap, BiasReport]:
    """Round-robin sign descent on the per-token bias scores.

    Each pass k applies a step of alpha * (1 - (k-1)/n_steps)^2 against
    sgn(b) per token, clamping to [0, 1] after every single update.  The
    observed-context prediction tracks the current corrected scores
    (each token's rank covariate moves when any score moves) while the
    reference prediction is pinned to the original scores, so it is
    computed once per token up front.
    """
    if alpha <= 0:
        raise ValueError(f"step size must be positive, got {alpha}")
    if n_steps < 1:
        raise ValueError(f"need at least one step, got {n_steps}")
    ref = _unwrap(x_ref)
    predict = model.predict_latent_averaged
    base = extract(sentence, s_orig, display_index, freq_table,
                   sentiment_lexicon)
    l = len(base)
    orig = [float(s) for s in s_orig.scores]
    p_ref = [float(predict(orig[i], ref)) for i in range(l)]

    def ctx(scores, i):
        return dataclasses.replace(
            base[i], saliency=scores[i],
            saliency_rank=saliency_rank(tuple(scores), i))

    def snapshot(scores):
        out = []
        for i in range(l):
            p = float(predict(scores[i], ctx(scores, i)))
            out.append(BiasScore(p, p_ref[i], p - p_ref[i]))
        return BiasSnapshot(tuple(out))

    before = snapshot(orig)
    s_corr = list(orig)
    for k in range(1, n_steps + 1):
        step = alpha * (1.0 - (k - 1) / n_steps) ** 2
        for i in range(l):
            p = float(predict(s_corr[i], ctx(s_corr, i)))
            b = p - p_ref[i]
            s_corr[i] = min(1.0, max(0.0, s_corr[i] - step * float(np.sign(b))))
    after = snapshot(s_corr)
    report = BiasReport(before, after, bias_removed_percent(before, after))
    return SaliencyMap(sentence.id, tuple(s_corr)), report
