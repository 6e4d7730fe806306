"""Design-matrix assembly for the additive ordinal rating model.

A ModelSpec lists terms over TokenContext covariates plus the grouping
ids carried by each rating record.  Building a Design against training
records freezes everything data-dependent: knot vectors, constraint
transforms, factor levels, grouping levels, and covariate ranges.  The
frozen design then assembles identical rows for training and prediction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .basis import (
    BasisSpec,
    PenaltyMatrix,
    TensorSpec,
    build_bspline_basis,
    build_knots,
    difference_penalty,
    null_space_penalty,
    row_kron,
    sum_to_zero_transform,
    tensor_interaction_basis,
)
from .records import RatingRecord

GROUPING_COVARIATES = ("worker_id", "sentence_id")


@dataclass(frozen=True)
class SmoothTerm:
    covariate: str
    num_basis: int = 10
    degree: int = 3
    knot_placement: str = "uniform"
    lam: float | str = "select"


@dataclass(frozen=True)
class FactorTerm:
    covariate: str
    reference: str | None = None


@dataclass(frozen=True)
class TensorTerm:
    cov_a: str
    cov_b: str
    num_basis: int = 5
    lam_a: float | str = "select"
    lam_b: float | str = "select"


@dataclass(frozen=True)
class RandomIntercept:
    group: str
    lam: float | str = "select"

    def __post_init__(self):
        if self.group not in GROUPING_COVARIATES:
            raise ValueError(f"unknown grouping covariate {self.group!r}")


@dataclass(frozen=True)
class RandomSlope:
    group: str
    covariate: str = "saliency"
    lam: float | str = "select"

    def __post_init__(self):
        if self.group not in GROUPING_COVARIATES:
            raise ValueError(f"unknown grouping covariate {self.group!r}")


Term = SmoothTerm | FactorTerm | TensorTerm | RandomIntercept | RandomSlope


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[Term, ...]
    num_categories: int = 7
    double_penalty: bool = True

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.num_categories < 2:
            raise ValueError("need at least 2 rating categories")
        seen = set()
        for t in self.terms:
            if isinstance(t, SmoothTerm):
                if t.covariate in seen:
                    raise ValueError(f"covariate {t.covariate!r} in more than one smooth")
                seen.add(t.covariate)


def record_values(rec: RatingRecord) -> dict:
    vals = rec.context.as_dict()
    vals["worker_id"] = rec.worker_id
    vals["sentence_id"] = rec.sentence_id
    vals["condition"] = rec.condition
    return vals


def _column(frames: list[dict], name: str) -> np.ndarray:
    try:
        return np.array([f[name] for f in frames], dtype=float)
    except KeyError:
        raise KeyError(f"covariate {name!r} missing from input values") from None


def _labels(frames: list[dict], name: str) -> list:
    return [f.get(name) for f in frames]


@dataclass
class Block:
    name: str
    kind: str
    start: int
    size: int
    # lam key -> penalty matrix in this block's coordinates
    penalties: dict[str, np.ndarray] = field(default_factory=dict)
    lam_fixed: dict[str, float | None] = field(default_factory=dict)
    payload: dict = field(default_factory=dict)

    @property
    def cols(self) -> slice:
        return slice(self.start, self.start + self.size)


class Design:
    """Frozen mapping from covariate values to model-matrix rows."""

    def __init__(self, spec: ModelSpec, blocks: list[Block], ranges: dict,
                 worker_levels: list[str], sentence_levels: list[str]):
        self.spec = spec
        self.blocks = blocks
        self.ranges = dict(ranges)
        self.worker_levels = list(worker_levels)
        self.sentence_levels = list(sentence_levels)
        self.p = sum(b.size for b in blocks)

    # -- construction ---------------------------------------------------

    @classmethod
    def build(cls, records: Sequence[RatingRecord], spec: ModelSpec) -> "Design":
        frames = [record_values(r) for r in records]
        if not frames:
            raise ValueError("no training records")
        numeric = set()
        for t in spec.terms:
            if isinstance(t, SmoothTerm):
                numeric.add(t.covariate)
            elif isinstance(t, TensorTerm):
                numeric.update((t.cov_a, t.cov_b))
            elif isinstance(t, RandomSlope):
                numeric.add(t.covariate)
        ranges = {}
        for name in sorted(numeric):
            col = _column(frames, name)
            lo, hi = float(col.min()), float(col.max())
            if hi <= lo:
                hi = lo + 1.0
            ranges[name] = (lo, hi)

        blocks = [Block("intercept", "intercept", 0, 1)]
        offset = 1
        for t in spec.terms:
            b = cls._build_block(t, frames, ranges, spec, offset)
            blocks.append(b)
            offset += b.size
        workers = sorted({f["worker_id"] for f in frames})
        sentences = sorted({f["sentence_id"] for f in frames})
        return cls(spec, blocks, ranges, workers, sentences)

    @staticmethod
    def _build_block(term: Term, frames, ranges, spec: ModelSpec, offset: int) -> Block:
        if isinstance(term, SmoothTerm):
            bspec = BasisSpec(
                term.covariate,
                degree=term.degree,
                num_basis=term.num_basis,
                knot_placement=term.knot_placement,
                range=ranges[term.covariate],
            )
            col = _column(frames, term.covariate)
            knots = build_knots(bspec, col)
            B = build_bspline_basis(col, bspec, knots)
            Z = sum_to_zero_transform(B)
            S = difference_penalty(bspec, order=2)
            Sc = Z.T @ S.matrix @ Z
            name = f"s({term.covariate})"
            pens = {f"{name}.wiggle": Sc}
            fixed = {f"{name}.wiggle": None if term.lam == "select" else float(term.lam)}
            if spec.double_penalty:
                pm = PenaltyMatrix(Sc, null_space_dim=_null_dim(Sc))
                pens[f"{name}.null"] = null_space_penalty(pm).matrix
                fixed[f"{name}.null"] = fixed[f"{name}.wiggle"]
            return Block(name, "smooth", offset, Z.shape[1], pens, fixed,
                         {"covariate": term.covariate, "spec": bspec, "knots": knots, "Z": Z})
        if isinstance(term, FactorTerm):
            labels = _labels(frames, term.covariate)
            levels = sorted({str(x) for x in labels})
            ref = term.reference if term.reference is not None else levels[0]
            if ref not in levels:
                raise ValueError(f"reference level {ref!r} absent from {term.covariate!r}")
            coded = [lv for lv in levels if lv != ref]
            name = f"factor({term.covariate})"
            return Block(name, "factor", offset, len(coded), {}, {},
                         {"covariate": term.covariate, "levels": coded, "reference": ref})
        if isinstance(term, TensorTerm):
            spec_a = BasisSpec(term.cov_a, num_basis=term.num_basis, range=ranges[term.cov_a])
            spec_b = BasisSpec(term.cov_b, num_basis=term.num_basis, range=ranges[term.cov_b])
            knots_a = build_knots(spec_a, _column(frames, term.cov_a))
            knots_b = build_knots(spec_b, _column(frames, term.cov_b))
            A = build_bspline_basis(_column(frames, term.cov_a), spec_a, knots_a)
            Bm = build_bspline_basis(_column(frames, term.cov_b), spec_b, knots_b)
            tb = tensor_interaction_basis(A, Bm, TensorSpec(spec_a, spec_b))
            name = f"ti({term.cov_a},{term.cov_b})"
            pens = {f"{name}.a": tb.penalty_a.matrix, f"{name}.b": tb.penalty_b.matrix}
            fixed = {
                f"{name}.a": None if term.lam_a == "select" else float(term.lam_a),
                f"{name}.b": None if term.lam_b == "select" else float(term.lam_b),
            }
            return Block(name, "tensor", offset, tb.block.shape[1], pens, fixed,
                         {"spec_a": spec_a, "spec_b": spec_b, "knots_a": knots_a,
                          "knots_b": knots_b, "Z": tb.transform})
        if isinstance(term, RandomIntercept):
            levels = sorted({str(f[term.group]) for f in frames})
            name = f"ri({term.group})"
            lam = None if term.lam == "select" else float(term.lam)
            return Block(name, "rand_int", offset, len(levels),
                         {f"{name}.ridge": np.eye(len(levels))}, {f"{name}.ridge": lam},
                         {"group": term.group, "levels": levels})
        if isinstance(term, RandomSlope):
            levels = sorted({str(f[term.group]) for f in frames})
            name = f"rs({term.group},{term.covariate})"
            lam = None if term.lam == "select" else float(term.lam)
            return Block(name, "rand_slope", offset, len(levels),
                         {f"{name}.ridge": np.eye(len(levels))}, {f"{name}.ridge": lam},
                         {"group": term.group, "levels": levels, "covariate": term.covariate})
        raise TypeError(f"unknown term {term!r}")

    # -- row assembly ---------------------------------------------------

    def matrix(self, values: Iterable[dict], averaged: bool = False) -> np.ndarray:
        """Model matrix, one row per value dict.

        ``averaged`` replaces every random-effect one-hot with uniform
        weights 1/L, which makes X @ beta the exact mean prediction over
        all grouping-level combinations.
        """
        frames = list(values)
        n = len(frames)
        X = np.zeros((n, self.p))
        for b in self.blocks:
            X[:, b.cols] = self._block_columns(b, frames, averaged)
        return X

    def row(self, values: dict, averaged: bool = False) -> np.ndarray:
        return self.matrix([values], averaged)[0]

    def matrix_from_records(self, records: Sequence[RatingRecord]) -> np.ndarray:
        return self.matrix([record_values(r) for r in records])

    def _block_columns(self, b: Block, frames: list[dict], averaged: bool) -> np.ndarray:
        n = len(frames)
        if b.kind == "intercept":
            return np.ones((n, 1))
        if b.kind == "smooth":
            col = _column(frames, b.payload["covariate"])
            B = build_bspline_basis(col, b.payload["spec"], b.payload["knots"])
            return B @ b.payload["Z"]
        if b.kind == "factor":
            out = np.zeros((n, b.size))
            known = set(b.payload["levels"]) | {b.payload["reference"]}
            idx = {lv: j for j, lv in enumerate(b.payload["levels"])}
            for i, f in enumerate(frames):
                lv = str(f.get(b.payload["covariate"]))
                if lv not in known:
                    warnings.warn(
                        f"unknown {b.payload['covariate']} level {lv!r}, using reference"
                    )
                    continue
                j = idx.get(lv)
                if j is not None:
                    out[i, j] = 1.0
            return out
        if b.kind == "tensor":
            A = build_bspline_basis(
                _column(frames, b.payload["spec_a"].covariate), b.payload["spec_a"], b.payload["knots_a"]
            )
            Bm = build_bspline_basis(
                _column(frames, b.payload["spec_b"].covariate), b.payload["spec_b"], b.payload["knots_b"]
            )
            return row_kron(A, Bm) @ b.payload["Z"]
        if b.kind in ("rand_int", "rand_slope"):
            levels = b.payload["levels"]
            out = np.zeros((n, b.size))
            if averaged:
                out[:] = 1.0 / len(levels)
            else:
                idx = {lv: j for j, lv in enumerate(levels)}
                for i, f in enumerate(frames):
                    g = f.get(b.payload["group"])
                    if g is None:
                        continue
                    j = idx.get(str(g))
                    if j is None:
                        warnings.warn(f"unknown {b.payload['group']} level {g!r}, "
                                      "treating as no random effect")
                        continue
                    out[i, j] = 1.0
            if b.kind == "rand_slope":
                out = out * _column(frames, b.payload["covariate"])[:, None]
            return out
        raise AssertionError(b.kind)

    # -- penalties ------------------------------------------------------

    def lam_keys(self) -> list[str]:
        keys = []
        for b in self.blocks:
            keys.extend(b.penalties)
        return keys

    def fixed_lams(self) -> dict[str, float | None]:
        out = {}
        for b in self.blocks:
            out.update(b.lam_fixed)
        return out

    def penalty_full(self, lams: dict[str, float]) -> np.ndarray:
        """Sum of lam * S embedded into p x p coordinates."""
        P = np.zeros((self.p, self.p))
        for b in self.blocks:
            for key, S in b.penalties.items():
                P[b.cols, b.cols] += lams[key] * S
        return P

    def block_by_name(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(
            f"no term {name!r}; available: {[b.name for b in self.blocks]}"
        )

    # -- serialization --------------------------------------------------

    def to_json(self) -> dict:
        def spec_json(s: BasisSpec):
            return {"covariate": s.covariate, "degree": s.degree, "num_basis": s.num_basis,
                    "knot_placement": s.knot_placement, "range": list(s.range)}

        blocks = []
        for b in self.blocks:
            payload = {}
            for k, v in b.payload.items():
                if isinstance(v, np.ndarray):
                    payload[k] = {"__array__": v.tolist()}
                elif isinstance(v, BasisSpec):
                    payload[k] = {"__basis_spec__": spec_json(v)}
                else:
                    payload[k] = v
            blocks.append({
                "name": b.name, "kind": b.kind, "start": b.start, "size": b.size,
                "penalties": {k: v.tolist() for k, v in b.penalties.items()},
                "lam_fixed": b.lam_fixed,
                "payload": payload,
            })
        return {
            "terms": [_term_json(t) for t in self.spec.terms],
            "num_categories": self.spec.num_categories,
            "double_penalty": self.spec.double_penalty,
            "blocks": blocks,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "worker_levels": self.worker_levels,
            "sentence_levels": self.sentence_levels,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Design":
        spec = ModelSpec(
            tuple(_term_from_json(t) for t in d["terms"]),
            num_categories=d["num_categories"],
            double_penalty=d["double_penalty"],
        )
        blocks = []
        for bd in d["blocks"]:
            payload = {}
            for k, v in bd["payload"].items():
                if isinstance(v, dict) and "__array__" in v:
                    payload[k] = np.array(v["__array__"])
                elif isinstance(v, dict) and "__basis_spec__" in v:
                    s = v["__basis_spec__"]
                    payload[k] = BasisSpec(s["covariate"], s["degree"], s["num_basis"],
                                           s["knot_placement"], tuple(s["range"]))
                else:
                    payload[k] = v
            blocks.append(Block(
                bd["name"], bd["kind"], bd["start"], bd["size"],
                {k: np.array(v) for k, v in bd["penalties"].items()},
                dict(bd["lam_fixed"]), payload,
            ))
        ranges = {k: tuple(v) for k, v in d["ranges"].items()}
        return cls(spec, blocks, ranges, d["worker_levels"], d["sentence_levels"])


def _null_dim(S: np.ndarray) -> int:
    if S.size == 0:
        return 0
    eig = np.linalg.eigvalsh(S)
    scale = max(eig[-1], 1.0)
    return int(np.sum(eig < 1e-9 * scale))


def _term_json(t: Term) -> dict:
    d = {"type": type(t).__name__}
    d.update({k: getattr(t, k) for k in t.__dataclass_fields__})
    return d


def _term_from_json(d: dict) -> Term:
    kinds = {c.__name__: c for c in (SmoothTerm, FactorTerm, TensorTerm, RandomIntercept, RandomSlope)}
    cls = kinds[d["type"]]
    kwargs = {k: v for k, v in d.items() if k != "type"}
    return cls(**kwargs)
