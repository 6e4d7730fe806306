"""Modeling, diagnosing, and correcting how people read saliency maps
over text: an ordinal additive perception model, bias scoring against a
reference context, iterative saliency correction, deterministic
renderers, a study protocol simulator, and a rating-study service.
"""

from .basis import BasisSpec, PenaltyMatrix, TensorSpec
from .correction import (
    BiasReport,
    BiasScore,
    ReferenceContext,
    bias_removed_percent,
    bias_score,
    correct_sentence,
    covariate_space_from_model,
    select_reference_context,
)
from .design import (
    Design,
    FactorTerm,
    ModelSpec,
    RandomIntercept,
    RandomSlope,
    SmoothTerm,
    TensorTerm,
)
from .features import (
    SaliencyMap,
    Sentence,
    Token,
    TokenContext,
    capitalization_class,
    extract,
    ingest_conllu,
    load_frequency_table,
    load_sentiment_lexicon,
    saliency_rank,
    sentence_from_json,
)
from .datasets import toy_frequency_table, toy_sentences, toy_sentiment_lexicon
from .model import FittedPerceptionModel, fit
from .records import RatingRecord
from .reports import partial_effect_report
from .render import (
    RenderSpec,
    RgbColor,
    bias_to_rgb,
    render_bars,
    render_bias_strip,
    render_heatmap,
    saliency_to_rgb,
)
from .simulate import (
    EN_CUT_POINTS,
    GroundTruthModel,
    StudyPlan,
    make_study_plan,
    random_saliencies,
    simulate_ratings,
)

__all__ = [name for name in dir() if not name.startswith("_")]
