"""Command-line entry point: ``rarrg <command> ...``.

Exit codes: 0 success, 2 validation error, 3 external-service error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import compose, metrics
from .config import load_config
from .decoder import load_checkpoint, save_checkpoint
from .embedding import FileEmbeddingProvider, HashEmbeddingProvider, RemoteEmbeddingProvider
from .errors import ParseError, RarrgError, ValidationError
from .index import build_index, load_index, save_index
from .phrase_graph import extract_file
from .pipeline import report_for_study, retrieve_views
from .trainer import Study, generate_corpus, train, write_history_csv

log = logging.getLogger("rarrg")

DEFAULTS_NOTE = """\
Published settings used as defaults: N=50 queries, L=6 decoder layers,
mu=0.5 (selection-probability weight in the matching cost), lambda=0.1
(in-batch contrastive loss weight), retrieval threshold=0.4, learning rate
2e-4 with cosine decay and 50 warm-up steps, batch size 128, 10 epochs,
weight decay 0.05, gradient clipping at 1.0, AdamW.

Exit codes: 0 ok, 2 validation error, 3 external-service error, 4 numeric failure.
"""


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, ensure_ascii=False)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
    return out


def _read_studies(path) -> list[Study]:
    out = []
    for lineno, obj in enumerate(_read_jsonl(path), 1):
        try:
            out.append(Study.from_json(obj))
        except ValidationError as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return out


def _write_studies(studies, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in studies:
            fh.write(json.dumps(s.to_json()) + "\n")


def _load_study(path) -> Study:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"study file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
    return Study.from_json(obj)


def cmd_extract_phrases(args):
    records = list(extract_file(args.input))
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    log.info("wrote %d documents to %s", len(records), args.out)


def _provider(args):
    if args.provider == "hash":
        return HashEmbeddingProvider(args.dim)
    if args.provider == "file":
        if not args.table:
            raise ValidationError("--table is required for the file provider")
        return FileEmbeddingProvider(args.table)
    if not args.endpoint:
        raise ValidationError("--endpoint is required for the remote provider")
    return RemoteEmbeddingProvider(args.endpoint, timeout=args.timeout)


def cmd_build_index(args):
    phrases = []
    for lineno, rec in enumerate(_read_jsonl(args.phrases), 1):
        items = next((rec[k] for k in ("phrases", "radgraph_phrases", "key_phrases") if k in rec), None)
        if not isinstance(items, list):
            raise ParseError("record has no phrase list", line=lineno)
        phrases.extend(items)
    idx = build_index(phrases, _provider(args), dim=args.dim)
    save_index(idx, args.out)
    log.info("indexed %d unique phrases (%d given) into %s", len(idx), len(phrases), args.out)


def cmd_train(args):
    cfg = load_config(args.config)
    if args.corpus == "synthetic":
        train_set, val_set, test_set, _ = generate_corpus(cfg.corpus)
        if args.dump_corpus:
            out = Path(args.dump_corpus)
            out.mkdir(parents=True, exist_ok=True)
            for name, split in (("train", train_set), ("val", val_set), ("test", test_set)):
                _write_studies(split, out / f"{name}.jsonl")
            with open(out / "phrases.jsonl", "w", encoding="utf-8") as fh:
                for s in train_set:
                    fh.write(json.dumps({"id": s.id, "phrases": s.phrases}) + "\n")
    else:
        corpus = Path(args.corpus)
        if not (corpus / "train.jsonl").is_file():
            raise ValidationError(f"{corpus} must contain train.jsonl (and optionally val.jsonl)")
        train_set = _read_studies(corpus / "train.jsonl")
        val_set = _read_studies(corpus / "val.jsonl") if (corpus / "val.jsonl").is_file() else []
    provider = HashEmbeddingProvider(cfg.decoder.d_embed)
    result = train(train_set, val_set, cfg.decoder, cfg.loss, cfg.train, provider,
                   progress=lambda row: log.info("epoch %(epoch)d train %(train_loss).4f val %(val_loss).4f", row))
    save_checkpoint(args.out, result.params, cfg.decoder, {"best_epoch": result.best_epoch})
    history = args.history or str(Path(args.out).with_suffix(".history.csv"))
    write_history_csv(result.history, history)
    log.info("saved checkpoint %s (best epoch %s) and history %s", args.out, result.best_epoch, history)


def _retrieve(args):
    params, dcfg, _ = load_checkpoint(args.ckpt)
    idx = load_index(args.index)
    study = _load_study(args.study)
    return params, dcfg, idx, study


def cmd_retrieve(args):
    params, dcfg, idx, study = _retrieve(args)
    results = retrieve_views(study, params, dcfg, idx, args.threshold)
    _write_json({"id": study.id, "threshold": args.threshold,
                 "views": {pos: r.to_json() for pos, r in results.items()}}, args.out)


def cmd_generate(args):
    params, dcfg, idx, study = _retrieve(args)
    if args.backend == "remote":
        if not args.endpoint:
            raise ValidationError("--endpoint is required for the remote backend")
        client = compose.RemoteClient(args.endpoint, args.model, timeout=args.timeout)
    else:
        client = compose.MockClient()
    templates = dict(
        single_template=compose.load_template("single_view", args.templates, args.n_examples),
        multi_template=compose.load_template("multi_view", args.templates, args.n_examples),
    )
    report, results = report_for_study(study, params, dcfg, idx, args.threshold, client, **templates)
    out = report.to_json()
    out["id"] = study.id
    out["retrieval"] = {pos: r.phrases for pos, r in results.items()}
    _write_json(out, args.out)


def cmd_evaluate(args):
    records = metrics.read_eval_pairs(args.pairs)
    classes = metrics.CHEXBERT_CLASSES
    subset = None
    if args.classes == "5":
        subset = [classes.index(c) for c in metrics.CHEXBERT_5]
    report = metrics.evaluate_pairs(records, classes, subset)
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    metrics.write_report(report, args.out, csv_path)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="rarrg", description="Set-prediction key-phrase retrieval and report generation.",
                                epilog=DEFAULTS_NOTE, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract-phrases", help="rule-based key phrases from entity/relation annotations", formatter_class=fmt)
    s.add_argument("--input", required=True, help="annotation JSON-lines file")
    s.add_argument("--out", required=True, help="output JSON-lines file of {id, radgraph_phrases}")
    s.set_defaults(func=cmd_extract_phrases)

    s = sub.add_parser("build-index", help="embed and store the distinct key phrases", formatter_class=fmt)
    s.add_argument("--phrases", required=True, help="JSON-lines with a 'phrases' or 'radgraph_phrases' list per line")
    s.add_argument("--provider", choices=("hash", "file", "remote"), default="hash", help="text embedding provider")
    s.add_argument("--dim", type=int, default=768, help="embedding dimension for the hash provider")
    s.add_argument("--table", help="phrase->vector table in index format (file provider)")
    s.add_argument("--endpoint", help="embedding service URL (remote provider)")
    s.add_argument("--timeout", type=float, default=30.0, help="remote provider timeout in seconds")
    s.add_argument("--out", required=True, help="index file to write")
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("train", help="train the decoder", formatter_class=fmt)
    s.add_argument("--config", required=True, help="flat JSON config with dotted keys; 'train.seed' is required")
    s.add_argument("--corpus", default="synthetic", help="'synthetic' or a directory holding train.jsonl/val.jsonl")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--history", help="history CSV path (default: next to the checkpoint)")
    s.add_argument("--dump-corpus", help="write the synthetic splits and phrase list to this directory")
    s.set_defaults(func=cmd_train)

    for name, func, hlp in (("retrieve", cmd_retrieve, "retrieve key phrases for a study"),
                            ("generate", cmd_generate, "retrieve key phrases and write a report")):
        s = sub.add_parser(name, help=hlp, formatter_class=fmt)
        s.add_argument("--ckpt", required=True, help="decoder checkpoint")
        s.add_argument("--index", required=True, help="key-phrase index file")
        s.add_argument("--study", required=True, help="study JSON with one or two views")
        s.add_argument("--threshold", type=float, default=0.4, help="selection probability threshold (inclusive)")
        s.add_argument("--out", default="-", help="output JSON path, '-' for stdout")
        if name == "generate":
            s.add_argument("--backend", choices=("mock", "remote"), default="mock", help="text generation backend")
            s.add_argument("--endpoint", help="chat-completion URL for the remote backend")
            s.add_argument("--model", default="gpt-4o-2024-08-06", help="model name sent to the remote backend")
            s.add_argument("--timeout", type=float, default=60.0, help="remote backend timeout in seconds")
            s.add_argument("--templates", help="directory overriding the shipped prompt templates")
            s.add_argument("--n-examples", type=int, default=1, help="in-context examples per prompt (0-3)")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="BLEU, ROUGE-L and label F1 for candidate/reference pairs", formatter_class=fmt)
    s.add_argument("--pairs", required=True, help="JSON-lines of {id, candidate, reference, pred_labels?, ref_labels?}")
    s.add_argument("--out", required=True, help="metric report JSON")
    s.add_argument("--csv", help="metric CSV (default: next to the JSON)")
    s.add_argument("--classes", choices=("14", "5"), default="14", help="label classes used for F1")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except RarrgError as exc:
        print(f"rarrg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"rarrg {args.command}: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
