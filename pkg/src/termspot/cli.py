"""Command-line interface: corpus generation, training, search, evaluation,
and parameter accounting.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
Every run writes a resolved-config snapshot next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

from .confnet import GraphemeInventory, load_corpus
from .detector import HypothesisIndex, save_hits, search
from .encoder import EncoderConfig, EncoderModel, count_params, load_checkpoint, transformer_param_count
from .errors import DataError, TermspotError
from .metrics import TwvConfig, det_points, evaluate, load_refs
from .synth import SynthConfig, gen_synthetic, load_terms, write_corpus_files
from .trainer import Schedule, TrainConfig, train


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"config {path} is not valid JSON: {e}") from e


def _write_snapshot(obj: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, ensure_ascii=False, indent=1, default=str))


def _apply_overrides(base: dict, args: argparse.Namespace, names: dict[str, str]) -> dict:
    for flag, key in names.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    return base


# ---------------------------------------------------------------------------
# commands


def _cmd_gen(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    _apply_overrides(raw, args, {
        "seed": "seed", "utterances": "utterances", "lexicon_size": "lexicon_size",
        "inventory_size": "inventory_size", "words_per_utterance": "words_per_utterance",
        "substitution_prob": "substitution_prob", "eps_insertion_prob": "eps_insertion_prob",
        "query_terms": "query_terms", "oov_terms": "oov_terms",
        "dev_fraction": "dev_fraction", "test_fraction": "test_fraction",
    })
    if args.languages:
        raw["languages"] = [s for s in args.languages.split(",") if s]
    try:
        cfg = SynthConfig(**raw)
    except TypeError as e:
        raise DataError(f"invalid synth config: {e}") from e
    corpus = gen_synthetic(cfg)
    paths = write_corpus_files(corpus, args.out, cfg)
    print(f"languages: {', '.join(l.name for l in corpus.languages)}")
    print(f"utterances: train {len(corpus.train)}, dev {len(corpus.dev)}, test {len(corpus.test)}")
    print(f"terms: dev {len(corpus.dev_terms)} ({len(corpus.dev_refs)} refs), "
          f"test {len(corpus.test_terms)} ({len(corpus.test_refs)} refs)")
    for name in ("train", "dev", "test", "inventory"):
        print(f"wrote {paths[name]}")
    return 0


def _cmd_train(args) -> int:
    raw = _read_json(args.config)
    try:
        model_cfg = EncoderConfig(**raw.get("model", {}))
        schedule = Schedule(**raw["schedule"]) if "schedule" in raw else Schedule(
            max(1, int(raw.get("steps", 18000)) // 10), int(raw.get("steps", 18000)), 1e-4)
        cfg = TrainConfig(
            seed=int(raw.get("seed", 0)),
            steps=int(raw.get("steps", schedule.total_steps)),
            batch_size=int(raw.get("batch_size", 8)),
            schedule=schedule,
            oov_merge_prob=float(raw.get("oov_merge_prob", 0.3)),
            length_weight=float(raw.get("length_weight", 0.1)),
            corpus_weights=tuple(raw["corpus_weights"]) if raw.get("corpus_weights") else None,
            checkpoint_interval=int(raw.get("checkpoint_interval", 2000)),
            log_interval=int(raw.get("log_interval", 200)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"invalid training config: {e}") from e
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    checkpoint_dir = args.checkpoint_dir or raw.get("checkpoint_dir")
    if not checkpoint_dir:
        raise DataError("no checkpoint_dir given (config key or --checkpoint-dir)")
    if "inventory" not in raw or "corpora" not in raw:
        raise DataError("training config needs 'inventory' and 'corpora' paths")

    inventory = GraphemeInventory.load(raw["inventory"])
    corpora = [load_corpus(path, inventory) for path in raw["corpora"]]
    languages = sorted({cn.lang for corpus in corpora for cn, _ in corpus})
    model_cfg.languages = tuple(languages)
    model = EncoderModel(model_cfg, inventory, seed=cfg.seed)
    print(f"model: {count_params(model):,} trainable parameters "
          f"({'shared' if model_cfg.share_transformer else 'separated'} transformer)")

    result = train(model, corpora, cfg, checkpoint_dir=checkpoint_dir)
    out = Path(checkpoint_dir)
    with open(out / "losses.jsonl", "w") as f:
        for step, value in enumerate(result.losses):
            f.write(json.dumps({"step": step, "loss": value}) + "\n")
    _write_snapshot({"model": asdict(model_cfg), "train": asdict(cfg), "corpora": raw["corpora"],
                     "inventory": raw["inventory"], "checkpoint_dir": str(checkpoint_dir)},
                    out / "train_config.json")
    print(f"checkpoints: {', '.join(result.checkpoints[-2:])}")
    if result.losses:
        print(f"final loss {result.losses[-1]:.4f} over {len(result.losses)} steps")
    return 0


def _cmd_search(args) -> int:
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus, model.inventory)
    queries = load_terms(args.queries, model.inventory)
    index = HypothesisIndex.build(model, corpus, overlap=args.overlap)
    hits = []
    for q in queries:
        hits.extend(search(model, index, q, threshold=args.threshold, length_scale=args.length_scale))
    save_hits(hits, args.out)
    _write_snapshot({
        "checkpoint": args.checkpoint, "corpus": args.corpus, "queries": args.queries,
        "threshold": args.threshold, "overlap": args.overlap, "length_scale": args.length_scale,
    }, str(args.out) + ".config.json")
    print(f"{len(hits)} hits for {len(queries)} queries -> {args.out}")
    return 0


def _speech_seconds(path) -> float:
    total = 0.0
    try:
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            segs = obj.get("segments", [])
            if segs:
                total += float(segs[-1]["start"]) + float(segs[-1]["dur"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"cannot derive speech duration from {path}: {e}") from e
    return total


def _cmd_eval(args) -> int:
    from .detector import load_hits

    hits = load_hits(args.hits)
    refs = load_refs(args.refs)
    if args.speech_seconds is not None:
        total = args.speech_seconds
    elif args.corpus:
        total = _speech_seconds(args.corpus)
    else:
        raise DataError("eval needs --speech-seconds or --corpus to size the trial space")
    cfg = TwvConfig(beta=args.beta, trials_per_second=args.trials_per_second,
                    match_overlap=args.match_overlap, total_speech_seconds=total)
    report = evaluate(hits, refs, cfg, threshold=args.threshold)
    Path(args.out).write_text(json.dumps(report, indent=1))
    _write_snapshot({
        "hits": args.hits, "refs": args.refs, "threshold": args.threshold,
        "beta": cfg.beta, "trials_per_second": cfg.trials_per_second,
        "match_overlap": cfg.match_overlap, "total_speech_seconds": total,
    }, str(args.out) + ".config.json")
    if args.det_csv:
        with open(args.det_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold", "p_miss", "p_fa"])
            writer.writerows(det_points(hits, refs, cfg))
    print(f"ATWV {report['atwv']:.4f} at t={args.threshold}")
    print(f"MTWV {report['mtwv']:.4f} at t={report['mtwv_threshold']:.4f}")
    return 0


def _cmd_params(args) -> int:
    raw = _read_json(args.config).get("model", {}) if args.config else {}
    for flag, key in (("layers", "layers"), ("heads", "heads"), ("d_model", "d_model"), ("d_ff", "d_ff")):
        value = getattr(args, flag)
        if value is not None:
            raw[key] = value
    try:
        base = EncoderConfig(**raw)
    except (TypeError, ValueError) as e:
        raise DataError(f"invalid model config: {e}") from e
    inventory = (GraphemeInventory.load(args.inventory) if args.inventory
                 else GraphemeInventory({lang: [] for lang in base.languages}))

    counts = {}
    for shared in (True, False):
        cfg = EncoderConfig(**{**asdict(base), "share_transformer": shared})
        counts[shared] = count_params(EncoderModel(cfg, inventory, seed=0))
    stack = transformer_param_count(base.layers, base.d_model, base.d_ff)
    print(f"{'configuration':<28}{'parameters':>14}")
    print(f"{'shared transformer':<28}{counts[True]:>14,}")
    print(f"{'separated transformers':<28}{counts[False]:>14,}")
    print(f"{'separated - shared':<28}{counts[False] - counts[True]:>14,}")
    print(f"{'one transformer stack':<28}{stack:>14,}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="termspot",
                                     description="Spoken term detection over grapheme confusion networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic corpus with query terms and references")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--config", help="JSON synth config")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--languages", help="comma-separated language names")
    gen.add_argument("--utterances", type=int)
    gen.add_argument("--lexicon-size", dest="lexicon_size", type=int)
    gen.add_argument("--inventory-size", dest="inventory_size", type=int)
    gen.add_argument("--words-per-utterance", dest="words_per_utterance", type=int)
    gen.add_argument("--substitution-prob", dest="substitution_prob", type=float)
    gen.add_argument("--eps-insertion-prob", dest="eps_insertion_prob", type=float)
    gen.add_argument("--query-terms", dest="query_terms", type=int)
    gen.add_argument("--oov-terms", dest="oov_terms", type=int)
    gen.add_argument("--dev-fraction", dest="dev_fraction", type=float)
    gen.add_argument("--test-fraction", dest="test_fraction", type=float)
    gen.set_defaults(func=_cmd_gen)

    tr = sub.add_parser("train", help="train a model from a JSON config")
    tr.add_argument("--config", required=True, help="JSON training config")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    tr.set_defaults(func=_cmd_train)

    se = sub.add_parser("search", help="search queries over a corpus, write a hit list")
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--corpus", required=True)
    se.add_argument("--queries", required=True)
    se.add_argument("--out", required=True)
    se.add_argument("--threshold", type=float, default=0.5)
    se.add_argument("--overlap", type=int, default=None, help="window overlap in segments (default: quarter window)")
    se.add_argument("--length-scale", dest="length_scale", type=float, default=1.0)
    se.set_defaults(func=_cmd_search)

    ev = sub.add_parser("eval", help="score a hit list against references")
    ev.add_argument("--hits", required=True)
    ev.add_argument("--refs", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--corpus", help="corpus JSONL used to derive total speech seconds")
    ev.add_argument("--speech-seconds", dest="speech_seconds", type=float)
    ev.add_argument("--beta", type=float, default=999.9)
    ev.add_argument("--trials-per-second", dest="trials_per_second", type=float, default=1.0)
    ev.add_argument("--match-overlap", dest="match_overlap", type=float, default=0.5)
    ev.add_argument("--det-csv", dest="det_csv")
    ev.set_defaults(func=_cmd_eval)

    pa = sub.add_parser("params", help="report parameter counts, shared vs separated")
    pa.add_argument("--config", help="JSON config with a 'model' section")
    pa.add_argument("--inventory", help="inventory JSON (affects embedding table sizes)")
    pa.add_argument("--layers", type=int)
    pa.add_argument("--heads", type=int)
    pa.add_argument("--d-model", dest="d_model", type=int)
    pa.add_argument("--d-ff", dest="d_ff", type=int)
    pa.set_defaults(func=_cmd_params)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TermspotError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
