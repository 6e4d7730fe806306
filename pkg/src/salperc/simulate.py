"""Synthetic rating studies: protocol plans and generated responses.

A StudyPlan lays out what each participant sees: sentence order, per
participant random saliency maps, one target token per sentence, three
attention traps in the last two thirds, and (in within-subject mode)
a balanced schedule of visualization conditions.  A GroundTruthModel
then turns displayed items into ordinal ratings through the same
cumulative-logit machinery the fitting code assumes, which makes the
pair a closed generative/inferential loop for oracle tests.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .features import SaliencyMap, Sentence, Token, VIS_CONDITIONS, extract
from .records import RatingRecord

EN_CUT_POINTS = (-1.0, 1.31, 3.29, 5.15, 7.1, 9.22)
DE_CUT_POINTS = (-1.0, 0.86, 2.42, 3.75, 5.53, 7.67)
EN_IG_CUT_POINTS = (-1.0, 0.95, 2.37, 3.67, 5.06, 6.83)

CONDITION_ORDERINGS = tuple(itertools.permutations(VIS_CONDITIONS))
TRAP_EXPECTED = (7, 1, 4)


def _stream(*parts) -> np.random.Generator:
    """Independent RNG stream for a tuple of identifiers; stable across
    runs and processes."""
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=16)
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(h.digest(), "big")))


@dataclass(frozen=True)
class GroundTruthModel:
    """Generative perception model: additive latent functions over
    TokenContext covariates plus normal random effects."""

    latent_fns: dict[str, Callable[[float], float]]
    cuts: tuple[float, ...] = EN_CUT_POINTS
    worker_intercept_sd: float = 0.0
    worker_slope_sd: float = 0.0
    sentence_intercept_sd: float = 0.0

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValueError(f"cut points not strictly increasing: {cuts}")
        for name, sd in (("worker-intercept", self.worker_intercept_sd),
                         ("worker-slope", self.worker_slope_sd),
                         ("sentence-intercept", self.sentence_intercept_sd)):
            if sd < 0:
                raise ValueError(f"{name} sd {sd} negative")
        object.__setattr__(self, "cuts", cuts)

    @property
    def num_categories(self) -> int:
        return len(self.cuts) + 1

    def latent(self, values: dict) -> float:
        return float(sum(fn(values[cov]) for cov, fn in self.latent_fns.items()))

    def category_probs(self, eta: float) -> np.ndarray:
        theta = np.concatenate([[-np.inf], self.cuts, [np.inf]])
        return np.diff(expit(theta - eta))


@dataclass(frozen=True)
class PlanItem:
    sentence_id: str
    display_index: int
    condition: str
    target_token: int
    saliency: SaliencyMap
    is_trap: bool = False
    trap_expected: int | None = None


@dataclass(frozen=True)
class ParticipantPlan:
    worker_id: str
    items: tuple[PlanItem, ...]
    condition_ordering: tuple[str, ...] | None = None


@dataclass(frozen=True)
class StudyPlan:
    participants: tuple[ParticipantPlan, ...]
    mode: str
    seed: int
    trap_sentences: tuple[Sentence, ...] = ()

    def validate(self, n_sentences: int | None = None):
        for part in self.participants:
            n_total = len(part.items)
            traps = [i for i, it in enumerate(part.items) if it.is_trap]
            if len(traps) != 3:
                raise ValueError(f"{part.worker_id}: {len(traps)} traps, expected 3")
            first_allowed = n_total - (2 * n_total) // 3
            if any(i < first_allowed for i in traps):
                raise ValueError(f"{part.worker_id}: trap outside last two thirds")
            shown = [it.sentence_id for it in part.items if not it.is_trap]
            if len(set(shown)) != len(shown):
                raise ValueError(f"{part.worker_id}: repeated sentence")
            if n_sentences is not None and len(shown) != n_sentences:
                raise ValueError(f"{part.worker_id}: {len(shown)} sentences shown")
            if [it.display_index for it in part.items] != list(range(1, n_total + 1)):
                raise ValueError(f"{part.worker_id}: display indices not 1..{n_total}")
            if self.mode == "within-subject":
                counts = {}
                for it in part.items:
                    if not it.is_trap:
                        counts[it.condition] = counts.get(it.condition, 0) + 1
                if len(set(counts.values())) != 1:
                    raise ValueError(f"{part.worker_id}: unbalanced conditions {counts}")


def random_saliencies(sentence: Sentence, seed: int, worker_id: str = "") -> SaliencyMap:
    """I.i.d. uniform scores per token; the (seed, worker, sentence)
    triple fully determines the map."""
    rng = _stream(seed, "saliency", worker_id, sentence.id)
    return SaliencyMap(sentence.id, tuple(rng.uniform(0.0, 1.0, len(sentence))))


def trap_sentence(k: int) -> Sentence:
    expected = TRAP_EXPECTED[k % len(TRAP_EXPECTED)]
    words = ["please", "rate", "this", "word", "exactly", str(expected)]
    return Sentence(f"trap-{k + 1}", tuple(Token(w) for w in words))


def make_study_plan(sentences: Sequence[Sentence], n_participants: int,
                    mode: str = "single-condition", seed: int = 0,
                    condition: str = "saliency") -> StudyPlan:
    """Assemble the full display schedule for every participant.

    single-condition: per-participant random sentence order, one fixed
    visualization.  within-subject: fixed sentence order, three equal
    condition blocks whose order follows the six-way balanced rotation.
    """
    if mode not in ("single-condition", "within-subject"):
        raise ValueError(f"unknown mode {mode!r}")
    sentences = list(sentences)
    n = len(sentences)
    if n == 0:
        raise ValueError("no sentences")
    if mode == "within-subject" and n % 3 != 0:
        raise ValueError(f"{n} sentences not divisible by 3 for within-subject mode")
    traps = tuple(trap_sentence(k) for k in range(3))

    participants = []
    for i in range(n_participants):
        worker = f"w{i + 1:03d}"
        rng = _stream(seed, "plan", worker)
        ordering = None
        if mode == "single-condition":
            order = rng.permutation(n)
            conditions = [condition] * n
        else:
            order = np.arange(n)
            ordering = CONDITION_ORDERINGS[i % len(CONDITION_ORDERINGS)]
            block = n // 3
            conditions = [ordering[min(j // block, 2)] for j in range(n)]

        n_total = n + len(traps)
        first_allowed = n_total - (2 * n_total) // 3
        if n_total - first_allowed < len(traps):
            raise ValueError(f"{n} sentences leave no room for {len(traps)} traps")
        trap_pos = sorted(rng.choice(np.arange(first_allowed, n_total), size=len(traps),
                                     replace=False).tolist())

        items = []
        cursor = 0
        trap_iter = iter(zip(trap_pos, traps))
        next_trap = next(trap_iter, None)
        for pos in range(n_total):
            if next_trap is not None and pos == next_trap[0]:
                trap = next_trap[1]
                k = int(trap.id.split("-")[1]) - 1
                cond = items[-1].condition if items else (conditions[0] if conditions else condition)
                items.append(PlanItem(
                    sentence_id=trap.id,
                    display_index=pos + 1,
                    condition=cond,
                    target_token=4,
                    saliency=SaliencyMap(trap.id, (0.5,) * len(trap)),
                    is_trap=True,
                    trap_expected=TRAP_EXPECTED[k % len(TRAP_EXPECTED)],
                ))
                next_trap = next(trap_iter, None)
                continue
            j = int(order[cursor])
            sent = sentences[j]
            smap = random_saliencies(sent, seed, worker)
            target = int(_stream(seed, "target", worker, sent.id).integers(1, len(sent) + 1))
            items.append(PlanItem(
                sentence_id=sent.id,
                display_index=pos + 1,
                condition=conditions[cursor],
                target_token=target,
                saliency=smap,
            ))
            cursor += 1
        participants.append(ParticipantPlan(worker, tuple(items), ordering))
    return StudyPlan(tuple(participants), mode, seed, traps)


def simulate_ratings(gt: GroundTruthModel, plan: StudyPlan,
                     sentences: dict[str, Sentence], seed: int = 0,
                     freq_table: dict | None = None,
                     sentiment_lexicon: dict | None = None,
                     clicker_workers: Iterable[str] = (),
                     time_median_s: float = 6.0,
                     include_traps: bool = True) -> list[RatingRecord]:
    """Generate one RatingRecord per displayed item.

    Honest raters answer traps with the expected rating; workers listed
    in ``clicker_workers`` answer everything uniformly at random.
    """
    clickers = set(clicker_workers)
    by_id = dict(sentences)
    for trap in plan.trap_sentences:
        by_id.setdefault(trap.id, trap)
    R = gt.num_categories

    sentence_intercepts: dict[str, float] = {}

    def v_int(sid: str) -> float:
        if sid not in sentence_intercepts:
            rng = _stream(seed, "sentence-effect", sid)
            sentence_intercepts[sid] = float(rng.normal(0.0, gt.sentence_intercept_sd))
        return sentence_intercepts[sid]

    records = []
    for part in plan.participants:
        rng = _stream(seed, "ratings", part.worker_id)
        w_int = float(rng.normal(0.0, gt.worker_intercept_sd))
        w_slope = float(rng.normal(0.0, gt.worker_slope_sd))
        for item in part.items:
            if item.is_trap and not include_traps:
                continue
            sent = by_id[item.sentence_id]
            ctxs = extract(sent, item.saliency, item.display_index,
                           freq_table, sentiment_lexicon)
            ctx = ctxs[item.target_token - 1]
            if part.worker_id in clickers:
                rating = int(rng.integers(1, R + 1))
            elif item.is_trap:
                rating = int(item.trap_expected)
            else:
                eta = (gt.latent(ctx.as_dict())
                       + w_int + w_slope * ctx.saliency + v_int(sent.id))
                probs = gt.category_probs(eta)
                rating = 1 + int(rng.choice(R, p=probs / probs.sum()))
            t = float(np.exp(rng.normal(math.log(time_median_s), 0.5)))
            records.append(RatingRecord(
                worker_id=part.worker_id,
                sentence_id=item.sentence_id,
                token_index=item.target_token,
                context=ctx,
                rating=rating,
                completion_time_s=t,
                display_index=item.display_index,
                condition=item.condition,
            ))
    return records


def drop_trap_records(records: Sequence[RatingRecord], plan: StudyPlan) -> list[RatingRecord]:
    trap_ids = {t.id for t in plan.trap_sentences}
    return [r for r in records if r.sentence_id not in trap_ids]


# -- serialization ------------------------------------------------------


def _item_json(it: PlanItem) -> dict:
    return {
        "sentence_id": it.sentence_id,
        "display_index": it.display_index,
        "condition": it.condition,
        "target_token": it.target_token,
        "scores": list(it.saliency.scores),
        "is_trap": it.is_trap,
        "trap_expected": it.trap_expected,
    }


def _item_from_json(d: dict) -> PlanItem:
    return PlanItem(
        sentence_id=d["sentence_id"],
        display_index=d["display_index"],
        condition=d["condition"],
        target_token=d["target_token"],
        saliency=SaliencyMap(d["sentence_id"], tuple(d["scores"])),
        is_trap=d["is_trap"],
        trap_expected=d["trap_expected"],
    )


def write_plan(plan: StudyPlan, out):
    header = {
        "mode": plan.mode,
        "seed": plan.seed,
        "trap_sentences": [
            {"id": t.id, "tokens": [{"surface": tk.surface} for tk in t.tokens]}
            for t in plan.trap_sentences
        ],
    }
    out.write(json.dumps(header) + "\n")
    for part in plan.participants:
        out.write(json.dumps({
            "worker_id": part.worker_id,
            "condition_ordering": list(part.condition_ordering) if part.condition_ordering else None,
            "items": [_item_json(it) for it in part.items],
        }) + "\n")


def read_plan(stream) -> StudyPlan:
    lines = [ln for ln in stream if ln.strip()]
    header = json.loads(lines[0])
    traps = tuple(
        Sentence(t["id"], tuple(Token(tk["surface"]) for tk in t["tokens"]))
        for t in header["trap_sentences"]
    )
    participants = []
    for ln in lines[1:]:
        d = json.loads(ln)
        ordering = tuple(d["condition_ordering"]) if d["condition_ordering"] else None
        participants.append(ParticipantPlan(
            d["worker_id"], tuple(_item_from_json(i) for i in d["items"]), ordering
        ))
    return StudyPlan(tuple(participants), header["mode"], header["seed"], traps)
