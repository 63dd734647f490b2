"""``xpsearch`` command line: one subcommand per pipeline stage.

    xpsearch synth    --out DIR
    xpsearch ingest   --triples T --purchases P --corpus DIR
    xpsearch train    --corpus DIR --checkpoint OUT [--model drem-hgn ...]
    xpsearch retrieve --corpus DIR --checkpoint CKPT --out RUN
    xpsearch eval     --corpus DIR --run RUN [--compare RUN2]
    xpsearch explain  --corpus DIR --checkpoint DREM [HGN] --mode both --out EXPL
    xpsearch features --corpus DIR --explanations EXPL --manifest M --labels L --out F
    xpsearch predict  --features F --folds 5 --out REPORT

Failures print one JSON object on stderr and exit nonzero (2 for usage and
input problems, 1 for anything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import agreement, explain, gbdt, quality, retrieval
from .corpus import CorpusError, load_corpus, write_corpus
from .model import ModelConfig, TrainingDiverged, fork_rng, read_config_file, train, write_training_log
from .store import CheckpointError, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate_synthetic

log = logging.getLogger("xpsearch")

DEFAULT_K = retrieval.DEFAULT_K
DEFAULT_TOPK_EXPL = explain.MAX_GROUP


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _cutoffs(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad cutoff list {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return vals


def _add_corpus(p, required=True):
    g = p.add_argument_group("corpus")
    g.add_argument("--corpus", type=Path, help="directory holding triples.tsv and purchases.tsv")
    g.add_argument("--triples", type=Path)
    g.add_argument("--purchases", type=Path)
    g.add_argument("--test-fraction", type=float, default=0.3,
                   help="query share held out when purchases carry no split column")
    g.add_argument("--vocab-min-count", type=int, default=1)
    p.set_defaults(_needs_corpus=required)


def _add_model(p):
    g = p.add_argument_group("model")
    g.add_argument("--config", type=Path, help="key=value file; flags override it")
    g.add_argument("--model", choices=("drem", "drem-hgn"))
    g.add_argument("--dim", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--neg", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--clip", type=float)
    g.add_argument("--batch", type=int)
    g.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xpsearch", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def stage(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                       help="single worker, byte-identical outputs (default on)")
        return p

    p = stage("synth", "write the brand-affinity synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    for f in ("users", "items", "brands", "categories", "queries", "purchases_per_user"):
        p.add_argument("--" + f.replace("_", "-"), type=int, default=getattr(SynthSpec(), f))

    p = stage("ingest", "parse, validate, split and re-emit a corpus")
    _add_corpus(p)
    p.add_argument("--out", type=Path, help="output directory (defaults to --corpus when reading files)")

    p = stage("train", "fit DREM or DREM-HGN")
    _add_corpus(p)
    _add_model(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="output checkpoint")
    p.add_argument("--log", type=Path, help="per-epoch CSV log")

    p = stage("retrieve", "rank items for every test (user, query)")
    _add_corpus(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--topk", type=int, default=DEFAULT_K, help="list length")
    p.add_argument("--out", type=Path, required=True, help="six-column run file")

    p = stage("eval", "score a run file")
    _add_corpus(p, required=False)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--qrels", type=Path, help="qrels file; defaults to the corpus test split")
    p.add_argument("--cutoffs", type=_cutoffs, default=retrieval.DEFAULT_CUTOFFS)
    p.add_argument("--compare", type=Path, help="second run for a paired randomization test")
    p.add_argument("--iterations", type=int, default=100_000)
    p.add_argument("--out", type=Path, help="JSON metric report")

    p = stage("explain", "explanation groups for every test (user, query, item)")
    _add_corpus(p)
    p.add_argument("--checkpoint", type=Path, nargs="+", required=True,
                   help="DREM checkpoint for post-hoc, DREM-HGN for pre-hoc, both for --mode both")
    p.add_argument("--mode", choices=("pre", "post", "both"), default="both")
    p.add_argument("--gamma", type=float, default=explain.DEFAULT_GAMMA)
    p.add_argument("--topk", type=int, default=DEFAULT_TOPK_EXPL, help="explanations per group")
    p.add_argument("--max-len", type=int, default=2, choices=(1, 2))
    p.add_argument("--templates", type=Path)
    p.add_argument("--out", type=Path, required=True, help="JSON lines")
    p.add_argument("--manifest", type=Path, help="also write an anonymised A/B case manifest (mode both)")

    p = stage("features", "feature vectors and mirrored preference pairs")
    _add_corpus(p)
    p.add_argument("--explanations", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = stage("predict", "cross-validated preference prediction")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", type=Path, help="CV report CSV")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _check_exists(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"missing input {p}")


def _corpus(args):
    if args.triples is not None or args.purchases is not None:
        if args.triples is None or args.purchases is None:
            raise UsageError("--triples and --purchases go together")
        tpath, ppath = args.triples, args.purchases
    elif args.corpus is not None:
        tpath, ppath = args.corpus / "triples.tsv", args.corpus / "purchases.tsv"
    else:
        raise UsageError("give --corpus DIR or --triples/--purchases")
    _check_exists(tpath, ppath)
    return load_corpus(tpath, ppath, args.vocab_min_count, args.test_fraction, args.seed)


def _model_config(args) -> ModelConfig:
    values: dict = {}
    if args.config is not None:
        _check_exists(args.config)
        values.update(read_config_file(args.config))
    flags = {"model": args.model, "dim": args.dim, "heads": args.heads, "neg": args.neg,
             "epochs": args.epochs, "lr": args.lr, "clip": args.clip, "batch_size": args.batch,
             "workers": args.workers}
    values.update({k: v for k, v in flags.items() if v is not None})
    values["seed"] = args.seed
    values["deterministic"] = args.deterministic
    return ModelConfig.from_mapping(values)


def _effective(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k.startswith("_") or k == "func":
            continue
        out[k] = [str(x) for x in v] if isinstance(v, list) else str(v) if isinstance(v, Path) else v
    return out


def _load_store(path, corpus):
    _check_exists(path)
    return load_checkpoint(path, corpus.sizes())


# ---------------------------------------------------------------------------
# stages


def cmd_synth(args):
    spec = SynthSpec(users=args.users, items=args.items, brands=args.brands, categories=args.categories,
                     queries=args.queries, purchases_per_user=args.purchases_per_user)
    paths = generate_synthetic(spec, args.seed, args.out)
    for p in paths:
        log.info("wrote %s", p)


def cmd_ingest(args):
    corpus = _corpus(args)
    out = args.out or args.corpus
    if out is None:
        raise UsageError("--out is required when reading --triples/--purchases")
    if args.corpus is not None and args.triples is None and Path(out).resolve() == args.corpus.resolve():
        raise UsageError("refusing to overwrite the input corpus; pass --out")
    write_corpus(corpus, out)
    summary = {"sizes": corpus.sizes(), "queries": len(corpus.queries),
               "train_purchases": len(corpus.train_purchases()), "test_purchases": len(corpus.test_purchases()),
               "duplicate_triples": corpus.duplicate_triples}
    (Path(out) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args):
    corpus = _corpus(args)
    config = _model_config(args)
    log.info("model config %s", json.dumps(config.as_dict(), sort_keys=True))
    try:
        result = train(corpus, config)
    except TrainingDiverged as exc:
        save_checkpoint(exc.last_good, args.checkpoint)
        if args.log:
            write_training_log(exc.log, args.log)
        raise
    save_checkpoint(result.store, args.checkpoint)
    if args.log:
        write_training_log(result.log, args.log)
    log.info("wrote %s (%s mode)", args.checkpoint, result.mode)


def cmd_retrieve(args):
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    corpus = _corpus(args)
    store = _load_store(args.checkpoint, corpus)
    run = retrieval.retrieve_test(store, corpus, args.topk)
    retrieval.write_run(run, args.out, corpus.names["item"], tag=store.model_kind)
    log.info("wrote %d ranked lists to %s", len(run), args.out)


def cmd_eval(args):
    _check_exists(args.run, args.qrels, args.compare)
    if args.qrels is not None:
        qrels = retrieval.read_qrels(args.qrels)
    else:
        qrels = retrieval.corpus_qrels(_corpus(args))
    run = retrieval.read_run(args.run)
    report = retrieval.evaluate_run(run.items(), qrels, args.cutoffs)
    out = {"run": str(args.run), **report.as_dict()}
    if args.compare is not None:
        other = retrieval.evaluate_run(retrieval.read_run(args.compare).items(), qrels, args.cutoffs)
        keys = sorted(report.per_query)
        out["compare"] = {"run": str(args.compare), "means": other.means, "p_values": {
            m: retrieval.fisher_randomization_test(
                [report.per_query[k][m] for k in keys], [other.per_query[k][m] for k in keys],
                args.iterations, args.seed)
            for m in next(iter(report.per_query.values()))
        }}
    if args.out:
        args.out.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"query_count": report.query_count, "means": report.means,
                      **({"p_values": out["compare"]["p_values"]} if "compare" in out else {})}, sort_keys=True))


def _mode_stores(args, corpus):
    stores = [_load_store(p, corpus) for p in args.checkpoint]
    kinds = {s.model_kind: s for s in stores}
    if len(kinds) != len(stores):
        raise UsageError("checkpoints must be of different model kinds")
    need = {"pre": ["drem_hgn"], "post": ["drem"], "both": ["drem", "drem_hgn"]}[args.mode]
    missing = [k for k in need if k not in kinds]
    if missing:
        raise UsageError(f"--mode {args.mode} needs a {' and a '.join(missing)} checkpoint")
    return {k: kinds[k] for k in need}


def cmd_explain(args):
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    if args.manifest is not None and args.mode != "both":
        raise UsageError("--manifest needs --mode both")
    _check_exists(args.templates)
    corpus = _corpus(args)
    stores = _mode_stores(args, corpus)
    templates = explain.Templates.from_file(args.templates) if args.templates else explain.Templates()
    pairs = corpus.test_pairs()
    qrels = {k: rel for k, (_, _, rel) in pairs.items()}
    model_mrr = {}
    for kind, store in stores.items():
        run = retrieval.retrieve_test(store, corpus, DEFAULT_K)
        model_mrr[kind] = retrieval.evaluate_run(run, qrels).means["mrr"]
        log.info("%s test MRR %.4f", kind, model_mrr[kind])
    case_rng = fork_rng(args.seed, "manifest")
    manifest_rows = []
    n = 0
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(pairs):
            user, qid, rel = pairs[key]
            words = corpus.query_words(qid)
            scores = {kind: retrieval.item_scores(user, words, s, corpus)[0] for kind, s in stores.items()}
            for item in sorted(rel):
                groups = {}
                if "drem" in stores:
                    g = explain.explain_mae(user, qid, item, stores["drem"], corpus, args.gamma, args.topk,
                                            args.max_len, templates=templates)
                    g.mrr = model_mrr["drem"]
                    g.log_purchase_prob = retrieval.log_purchase_prob(scores["drem"], item, DEFAULT_K)
                    groups["MAE"] = g
                if "drem_hgn" in stores:
                    g, _ = explain.explain_mie(user, qid, stores["drem_hgn"], corpus, templates)
                    g.explanations = g.explanations[:args.topk]
                    g.mrr = model_mrr["drem_hgn"]
                    g.log_purchase_prob = retrieval.log_purchase_prob(scores["drem_hgn"], item, DEFAULT_K)
                    groups["MIE"] = g
                fh.write(explain.explanation_record(corpus, user, qid, item, groups) + "\n")
                n += 1
                if len(groups) == 2:
                    a, b = ("MIE", "MAE") if case_rng.random() < 0.5 else ("MAE", "MIE")
                    manifest_rows.append((f"case{n:05d}", corpus.name("user", user), corpus.queries[qid],
                                          corpus.name("item", item), a, b))
    if args.manifest is not None:
        quality.write_manifest(manifest_rows, args.manifest)
    log.info("wrote %d explanation records to %s", n, args.out)


def cmd_features(args):
    _check_exists(args.explanations, args.manifest, args.labels)
    corpus = _corpus(args)
    manifest = quality.read_manifest(args.manifest)
    labels = quality.read_labels(args.labels)
    records = {}
    with open(args.explanations, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            records[(rec["user"], rec["query"], rec["item"])] = rec
    stats = quality.AssociationStats(corpus)
    cases = []
    for case_id in sorted(manifest):
        row = manifest[case_id]
        rec = records.get((row["user"], row["query"], row["item"]))
        if rec is None:
            raise KeyError(f"case {case_id}: no explanation record for {row['user']}/{row['query']}/{row['item']}")
        if "MIE" not in rec["groups"] or "MAE" not in rec["groups"]:
            raise KeyError(f"case {case_id}: record lacks an MIE or MAE group")
        user = corpus.ref("user", row["user"]).id
        item = corpus.ref("item", row["item"]).id
        vecs = {}
        for kind in ("MIE", "MAE"):
            g = explain.ExplanationGroup.from_dict(rec["groups"][kind])
            ctx = quality.GroupContext(user, item, g.mrr or 0.0, g.log_purchase_prob or 0.0)
            vecs[kind] = quality.build_group_vector(g, ctx, stats)
        case_labels = {}
        for aspect in quality.ASPECTS:
            votes = labels.get((case_id, aspect))
            if votes is None:
                raise KeyError(f"case {case_id}: missing labels for {aspect}")
            case_labels[aspect] = quality.to_mie_first(agreement.majority_vote(votes), row)
        cases.append(quality.Case(case_id, vecs["MIE"], vecs["MAE"], case_labels))
    pairs = quality.build_pair_dataset(cases)
    quality.write_feature_file(pairs, args.out)
    log.info("wrote %d pairs from %d cases to %s", len(pairs), len(cases), args.out)


def cmd_predict(args):
    _check_exists(args.features)
    pairs = quality.read_feature_file(args.features)
    report = gbdt.cross_validate(pairs, args.folds, seed=args.seed)
    if args.out:
        gbdt.write_cv_report(report, args.out)
    for aspect, r in report.items():
        print(json.dumps({"aspect": aspect, **r}))


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "retrieve": cmd_retrieve,
    "eval": cmd_eval, "explain": cmd_explain, "features": cmd_features, "predict": cmd_predict,
}


def _fail(kind: str, message: str, command: str | None, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "command": command}) + "\n")
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), None, 2)
    if args.command is None:
        return _fail("usage", "missing subcommand", None, 2)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("%s seed=%d config %s", args.command, args.seed, json.dumps(_effective(args), sort_keys=True))
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", str(exc), args.command, 2)
    except FileNotFoundError as exc:
        return _fail("missing_input", str(exc), args.command, 2)
    except (CorpusError, CheckpointError, retrieval.RunFileError) as exc:
        return _fail(type(exc).__name__, str(exc), args.command, 2)
    except TrainingDiverged as exc:
        return _fail("TrainingDiverged", str(exc), args.command, 1)
    except (KeyError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc).strip("'\""), args.command, 2)
    except Exception as exc:  # noqa: BLE001
        return _fail(type(exc).__name__, str(exc), args.command, 1)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
