"""Command-line front end.

Subcommands mirror the library: simulate ratings, fit the ordinal
model, dump partial-effect reports, score and correct perceptual bias,
render maps, serve the live study, export collected ratings.

Every failure writes one JSON diagnostic line {"code", "message"} to
stderr and exits nonzero; stdout carries only payload.  A plain
key=value config file can preload any flag, explicit flags win.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from contextlib import contextmanager
from pathlib import Path

from . import datasets
from .correction import (
    BiasReport,
    BiasScore,
    BiasSnapshot,
    ReferenceContext,
    bias_score,
    correct_sentence,
    covariate_space_from_model,
    select_reference_context,
)
from .design import (
    FactorTerm,
    ModelSpec,
    RandomIntercept,
    RandomSlope,
    SmoothTerm,
)
from .features import (
    Sentence,
    Token,
    extract,
    load_frequency_table,
    load_sentiment_lexicon,
    sentence_from_json,
)
from .model import FittedPerceptionModel, fit
from .records import read_csv, write_csv
from .render import (
    MODES,
    render_bars,
    render_bias_strip,
    render_heatmap,
)
from .reports import partial_effect_report
from .simulate import (
    GroundTruthModel,
    make_study_plan,
    random_saliencies,
    simulate_ratings,
    write_plan,
)


class CliError(Exception):
    """User-facing failure with a stable diagnostic code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _diag(code: str, message: str) -> None:
    print(json.dumps({"code": code, "message": message}), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    # argparse would exit with plain text; route it through the same
    # JSON diagnostics channel as every other failure
    def error(self, message):
        self.print_usage(sys.stderr)
        _diag("usage", message)
        raise SystemExit(2)


# -- config file ---------------------------------------------------------


def read_config(path) -> list[str]:
    """key = value lines to argv tokens; value true/false toggles a flag."""
    tokens = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CliError("bad-config", f"{path}:{ln}: expected key=value, got {line!r}")
            key = key.strip().replace("_", "-")
            value = value.strip()
            if not key:
                raise CliError("bad-config", f"{path}:{ln}: empty key")
            if value.lower() == "true":
                tokens.append(f"--{key}")
            elif value.lower() == "false":
                pass
            else:
                tokens += [f"--{key}", value]
    return tokens


def _apply_config(argv: list[str]) -> list[str]:
    """Strip --config FILE and splice its tokens in right after the
    subcommand, so explicit flags (parsed later) win."""
    out = []
    cfg_path = None
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok == "--config":
            if i + 1 >= len(argv):
                raise CliError("bad-config", "--config needs a file path")
            cfg_path = argv[i + 1]
            i += 2
        elif tok.startswith("--config="):
            cfg_path = tok.split("=", 1)[1]
            i += 1
        else:
            out.append(tok)
            i += 1
    if cfg_path is None:
        return out
    if not out:
        raise CliError("bad-config", "--config given but no subcommand")
    try:
        injected = read_config(cfg_path)
    except OSError as e:
        raise CliError("bad-config", f"cannot read config {cfg_path!r}: {e}") from None
    return [out[0]] + injected + out[1:]


# -- small IO helpers ----------------------------------------------------


@contextmanager
def _open_in(path):
    if path == "-":
        yield sys.stdin
    else:
        with open(path) as fh:
            yield fh


@contextmanager
def _open_out(path):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _load_sentences(arg: str) -> list[Sentence]:
    if arg == "toy":
        return datasets.toy_sentences()
    with open(arg) as fh:
        docs = json.load(fh)
    return [
        Sentence(
            d["id"],
            tuple(
                Token(t["surface"], t.get("lemma"), t.get("deprel"), t.get("head"))
                for t in d["tokens"]
            ),
        )
        for d in docs
    ]


def _load_freq(arg):
    if arg is None:
        return None
    if arg == "toy":
        return datasets.toy_frequency_table()
    with open(arg) as fh:
        return load_frequency_table(fh)


def _load_senti(arg):
    if arg is None:
        return None
    if arg == "toy":
        return datasets.toy_sentiment_lexicon()
    with open(arg) as fh:
        return load_sentiment_lexicon(fh)


def _load_model(arg) -> FittedPerceptionModel:
    if arg == "-":
        return FittedPerceptionModel.from_json(json.load(sys.stdin))
    return FittedPerceptionModel.load(arg)


def _read_maps(stream):
    pairs = []
    for line in stream:
        line = line.strip()
        if line:
            pairs.append(sentence_from_json(line))
    return pairs


def _map_doc(sentence: Sentence, scores) -> dict:
    toks = []
    for t in sentence.tokens:
        d: dict = {"surface": t.surface}
        if t.lemma is not None:
            d["lemma"] = t.lemma
        if t.deprel is not None:
            d["deprel"] = t.deprel
        if t.head is not None:
            d["head"] = t.head
        toks.append(d)
    return {"id": sentence.id, "tokens": toks, "scores": [float(s) for s in scores]}


def _safe_name(sid: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in sid)


def _reference_to_json(ref: ReferenceContext) -> dict:
    return {
        "context": dataclasses.asdict(ref.context),
        "sample_count": ref.sample_count,
        "seed": ref.seed,
        "probe_saliency": ref.probe_saliency,
    }


def _reference_from_json(d: dict) -> ReferenceContext:
    from .features import TokenContext

    return ReferenceContext(
        context=TokenContext(**d["context"]),
        sample_count=d["sample_count"],
        seed=d["seed"],
        probe_saliency=d["probe_saliency"],
    )


def _comma_list(arg: str) -> list[str]:
    return [p.strip() for p in arg.split(",") if p.strip()]


# -- subcommand handlers -------------------------------------------------


def _cmd_simulate(args) -> int:
    sentences = _load_sentences(args.sentences)
    plan = make_study_plan(
        sentences, args.workers, mode=args.mode, seed=args.seed, condition=args.condition
    )
    fns = {"saliency": lambda s: args.slope * s}
    if args.length_slope:
        fns["word_length"] = lambda wl: args.length_slope * wl
    gt = GroundTruthModel(
        fns,
        worker_intercept_sd=args.worker_sd,
        sentence_intercept_sd=args.sentence_sd,
    )
    recs = simulate_ratings(
        gt,
        plan,
        {s.id: s for s in sentences},
        seed=args.seed,
        freq_table=_load_freq(args.frequency),
        sentiment_lexicon=_load_senti(args.sentiment),
    )
    with _open_out(args.out) as fh:
        write_csv(recs, fh)
    if args.plan_out:
        with open(args.plan_out, "w") as fh:
            write_plan(plan, fh)
    if args.maps_out:
        with open(args.maps_out, "w") as fh:
            for s in sentences:
                smap = random_saliencies(s, args.seed)
                fh.write(json.dumps(_map_doc(s, smap.scores)) + "\n")
    return 0


def _parse_lam(arg: str):
    if arg == "select":
        return "select"
    try:
        return float(arg)
    except ValueError:
        raise CliError("bad-input", f"--lam must be a number or 'select', got {arg!r}") from None


def _cmd_fit(args) -> int:
    lam = _parse_lam(args.lam)
    terms = []
    for part in _comma_list(args.smooth):
        cov, _, k = part.partition(":")
        terms.append(SmoothTerm(cov, num_basis=int(k) if k else 8))
    for cov in _comma_list(args.factor):
        terms.append(FactorTerm(cov))
    # accept the short spellings people actually type
    groups = {"worker": "worker_id", "sentence": "sentence_id"}
    for group in _comma_list(args.random_intercept):
        terms.append(RandomIntercept(groups.get(group, group)))
    for part in _comma_list(args.random_slope):
        group, _, cov = part.partition(":")
        terms.append(RandomSlope(groups.get(group, group), cov or "saliency"))
    if not terms:
        raise CliError("bad-input", "model needs at least one term")
    spec = ModelSpec(tuple(terms), double_penalty=args.double_penalty)

    with _open_in(args.ratings) as fh:
        recs = read_csv(fh)
    grid = tuple(float(x) for x in _comma_list(args.lam_grid))
    model = fit(recs, spec, lam=lam, grid=grid, folds=args.folds,
                seed=args.seed, max_iter=args.max_iter)
    if args.out == "-":
        json.dump(model.to_json(), sys.stdout)
        sys.stdout.write("\n")
    else:
        model.save(args.out)
    return 0


def _cmd_partial_effects(args) -> int:
    model = _load_model(args.model)
    terms = _comma_list(args.terms) if args.terms else None
    written = partial_effect_report(model, args.out_dir, grid_points=args.grid_points,
                                    terms=terms)
    for p in written:
        print(p)
    return 0


def _cmd_bias(args) -> int:
    model = _load_model(args.model)
    space = covariate_space_from_model(model)
    ref = select_reference_context(
        model, space, n=args.samples, probe_s=args.probe_saliency, seed=args.seed
    )
    with open(args.ref_out, "w") as fh:
        json.dump(_reference_to_json(ref), fh, indent=1)
    if args.maps:
        freq = _load_freq(args.frequency)
        senti = _load_senti(args.sentiment)
        with _open_in(args.maps) as fh:
            pairs = _read_maps(fh)
        with _open_out(args.out) as fh:
            for sent, smap in pairs:
                ctxs = extract(sent, smap, args.display_index, freq, senti)
                scores = [bias_score(model, c.saliency, c, ref) for c in ctxs]
                fh.write(json.dumps({
                    "id": sent.id,
                    "scores": [{"p": sc.p, "p_ref": sc.p_ref, "b": sc.b} for sc in scores],
                }) + "\n")
    return 0


def _cmd_correct(args) -> int:
    model = _load_model(args.model)
    if args.reference:
        with open(args.reference) as fh:
            ref = _reference_from_json(json.load(fh))
    elif args.seed is not None:
        space = covariate_space_from_model(model)
        ref = select_reference_context(
            model, space, n=args.samples, probe_s=args.probe_saliency, seed=args.seed
        )
    else:
        raise CliError("missing-seed", "correct needs --reference or --seed")
    freq = _load_freq(args.frequency)
    senti = _load_senti(args.sentiment)
    with _open_in(args.maps) as fh:
        pairs = _read_maps(fh)
    with _open_out(args.out) as fh:
        for sent, smap in pairs:
            corrected, report = correct_sentence(
                model, sent, smap, ref, alpha=args.alpha, n_steps=args.n_steps,
                display_index=args.display_index, freq_table=freq,
                sentiment_lexicon=senti,
            )
            doc = _map_doc(sent, smap.scores)
            doc["scores_corrected"] = [float(s) for s in corrected.scores]
            doc.update(report.to_json())
            fh.write(json.dumps(doc) + "\n")
    return 0


def _cmd_render(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _open_in(args.maps) as fh:
        docs = [json.loads(line) for line in fh if line.strip()]
    written = []
    for doc in docs:
        if args.mode == "corrected-heatmap":
            if "scores_corrected" not in doc:
                raise CliError("bad-input",
                               f"sentence {doc.get('id')!r} has no scores_corrected; "
                               "run the correct subcommand first")
            doc = {**doc, "scores": doc["scores_corrected"]}
        sent, smap = sentence_from_json(doc)
        base = out_dir / _safe_name(sent.id)
        if args.mode in ("heatmap", "corrected-heatmap"):
            page = render_heatmap(sent, smap)
            (base.with_suffix(".svg")).write_text(page.svg)
            (base.with_suffix(".html")).write_text(page.html)
            written += [base.with_suffix(".svg"), base.with_suffix(".html")]
        elif args.mode == "bars":
            base.with_suffix(".svg").write_text(render_bars(sent, smap))
            written.append(base.with_suffix(".svg"))
        else:  # bias
            if "before" not in doc or "after" not in doc:
                raise CliError("bad-input",
                               f"sentence {doc.get('id')!r} has no bias scores; "
                               "run the correct subcommand first")
            report = BiasReport(
                BiasSnapshot(tuple(BiasScore(**sc) for sc in doc["before"])),
                BiasSnapshot(tuple(BiasScore(**sc) for sc in doc["after"])),
                doc["removed_percent"],
            )
            base.with_suffix(".svg").write_text(
                render_bias_strip(sent, report, which=args.which)
            )
            written.append(base.with_suffix(".svg"))
    for p in written:
        print(p)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(args.state_dir), host=args.host, port=args.port,
                log_level="info")
    return 0


def _cmd_export(args) -> int:
    from .service import export_study

    text = export_study(args.state_dir, args.study, fmt=args.format,
                        paper_filters=args.paper_filters)
    with _open_out(args.out) as fh:
        fh.write(text)
    return 0


# -- parser --------------------------------------------------------------


def build_parser() -> _Parser:
    top = _Parser(prog="salperc",
                  description="Perceived-importance ratings: simulate, model, correct, serve.")
    sub = top.add_subparsers(dest="subcommand", metavar="subcommand")

    def cmd(name, handler, help):
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(handler=handler)
        return p

    p = cmd("simulate", _cmd_simulate, "Generate a study plan and synthetic ratings CSV.")
    p.add_argument("--sentences", default="toy", help="sentence JSON file, or 'toy' for the bundled corpus")
    p.add_argument("--workers", type=int, default=6, help="number of simulated participants")
    p.add_argument("--mode", default="single-condition",
                   choices=("single-condition", "within-subject"))
    p.add_argument("--condition", default="saliency")
    p.add_argument("--slope", type=float, default=2.0, help="latent effect per unit saliency")
    p.add_argument("--length-slope", type=float, default=0.0, help="latent effect per character of word length")
    p.add_argument("--worker-sd", type=float, default=0.0)
    p.add_argument("--sentence-sd", type=float, default=0.0)
    p.add_argument("--frequency", default="toy")
    p.add_argument("--sentiment", default="toy")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="-", help="ratings CSV ('-' = stdout)")
    p.add_argument("--plan-out", help="also write the study plan as JSONL")
    p.add_argument("--maps-out", help="also write the per-sentence saliency maps as JSONL")

    p = cmd("fit", _cmd_fit, "Fit the ordinal rating model from a ratings CSV.")
    p.add_argument("--ratings", default="-", help="ratings CSV ('-' = stdin)")
    p.add_argument("--smooth", default="saliency:8", help="cov[:k] list, e.g. saliency:8,word_length:6")
    p.add_argument("--factor", default="", help="categorical covariates, e.g. capitalization")
    p.add_argument("--random-intercept", default="", help="grouping covariates: worker,sentence")
    p.add_argument("--random-slope", default="", help="group[:cov] list, e.g. worker:saliency")
    p.add_argument("--lam", default="1.0", help="penalty weight, or 'select' for cross-validation")
    p.add_argument("--lam-grid", default="0.01,0.1,1,10,100,1000,10000,100000,1000000")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--no-double-penalty", dest="double_penalty", action="store_false")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="-", help="model JSON ('-' = stdout)")

    p = cmd("partial-effects", _cmd_partial_effects,
            "Write per-smooth curve CSVs, SVG figures, and a model summary.")
    p.add_argument("--model", required=True, help="model JSON ('-' = stdin)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--grid-points", type=int, default=100)
    p.add_argument("--terms", default="", help="comma list, e.g. s(saliency); default all smooths")

    p = cmd("bias", _cmd_bias, "Pick the median reference context and score per-token bias.")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--samples", type=int, default=10001)
    p.add_argument("--probe-saliency", type=float, default=0.5)
    p.add_argument("--ref-out", required=True, help="reference context JSON")
    p.add_argument("--maps", help="saliency maps JSONL to score against the reference")
    p.add_argument("--out", default="-", help="per-sentence bias JSONL ('-' = stdout)")
    p.add_argument("--display-index", type=int, default=1)
    p.add_argument("--frequency")
    p.add_argument("--sentiment")

    p = cmd("correct", _cmd_correct, "Iteratively remove covariate-driven rating bias from maps.")
    p.add_argument("--model", default="-", help="model JSON ('-' = stdin)")
    p.add_argument("--maps", required=True, help="saliency maps JSONL ('-' = stdin)")
    p.add_argument("--reference", help="reference context JSON from the bias subcommand")
    p.add_argument("--seed", type=int, help="derive the reference in place (alternative to --reference)")
    p.add_argument("--samples", type=int, default=10001)
    p.add_argument("--probe-saliency", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n-steps", type=int, default=100)
    p.add_argument("--display-index", type=int, default=1)
    p.add_argument("--frequency")
    p.add_argument("--sentiment")
    p.add_argument("--out", default="-", help="corrected maps JSONL ('-' = stdout)")

    p = cmd("render", _cmd_render, "Render maps to SVG (and HTML for heatmaps).")
    p.add_argument("--maps", required=True, help="maps JSONL ('-' = stdin); corrected modes need correct output")
    p.add_argument("--mode", default="heatmap", choices=MODES)
    p.add_argument("--which", default="after", choices=("before", "after"),
                   help="which bias snapshot the bias mode draws")
    p.add_argument("--out-dir", required=True)

    p = cmd("serve", _cmd_serve, "Run the rating-study HTTP service.")
    p.add_argument("--state-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    p = cmd("export", _cmd_export, "Export a study's ratings from its on-disk log.")
    p.add_argument("--state-dir", required=True)
    p.add_argument("--study", required=True)
    p.add_argument("--format", default="csv", choices=("csv", "jsonl"))
    p.add_argument("--paper-filters", action="store_true",
                   help="drop flagged records: trap failures, outlier times, extreme lengths")
    p.add_argument("--out", default="-")

    return top


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config(argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return int(e.code or 0)
        if getattr(args, "handler", None) is None:
            parser.print_usage(sys.stderr)
            _diag("usage", "missing subcommand")
            return 2
        return args.handler(args)
    except CliError as e:
        _diag(e.code, str(e))
        return 2
    except FileNotFoundError as e:
        _diag("not-found", str(e))
        return 1
    except (ValueError, KeyError) as e:
        # str(KeyError) wraps the message in quotes; unwrap for the diagnostic
        msg = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        _diag("bad-input", str(msg))
        return 1


if __name__ == "__main__":
    sys.exit(main())
