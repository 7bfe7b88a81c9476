"""Command-line pipeline: synth -> build-views -> train -> merge -> index ->
retrieve -> evaluate, plus a grad-check utility.

Every command logs its fully resolved configuration to stderr, never
mutates its inputs, and exits nonzero on any failure. Option precedence is
built-in defaults < ``--config`` key=value file < explicit flags. Reruns
with identical inputs and seeds produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .corpus import (
    CorpusFormatError,
    Vocabulary,
    generate_synthetic,
    load_entities,
    load_mentions,
    write_entities,
    write_mentions,
)
from .encoder import (
    encode_mention,
    entity_sequence,
    fingerprint,
    init_dual,
    load_checkpoint,
    mention_sequence,
    save_checkpoint,
)
from .evaluator import (
    DEFAULT_KS,
    compare_configs,
    length_binned_errors,
    recall_at_k,
    write_report_records,
)
from .matcher import (
    StaleIndexError,
    build_index,
    load_index,
    read_results,
    require_fresh,
    retrieve,
    save_index,
    write_results,
)
from .merger import MergeConfig, heuristic_search
from .trainer import TrainConfig, build_batch, grad_check, mine_hard_negatives, train
from .views import VIEW_POLICIES, build_views, read_views, write_views


def _log(command: str, settings: dict) -> None:
    print(f"[viewret] {command}: " + json.dumps(settings, default=str), file=sys.stderr)


def _read_config_file(path: str | None) -> dict[str, str]:
    """key=value lines; '#' starts a comment; later keys win."""
    if path is None:
        return {}
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _resolve(flag_value, config: dict[str, str], key: str, default, cast):
    if flag_value is not None:
        return flag_value
    if key in config:
        raw = config[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    corpus, mentions = generate_synthetic(
        seed=args.seed,
        n_entities=args.n_entities,
        aspects_per_entity=args.aspects,
        vocab_size=args.vocab_size,
        pool_size=args.pool_size,
        context_words=args.context_words,
    )
    write_entities(args.entities, corpus)
    write_mentions(args.mentions, mentions)
    _log("synth", {
        "seed": args.seed, "n_entities": args.n_entities, "aspects": args.aspects,
        "vocab_size": args.vocab_size, "pool_size": args.pool_size,
        "context_words": args.context_words,
        "entities": args.entities, "mentions": args.mentions,
    })
    print(f"wrote {len(corpus)} entities and {len(mentions)} mentions")
    return 0


def cmd_build_views(args: argparse.Namespace) -> int:
    config = _read_config_file(args.config)
    max_view_tokens = _resolve(args.max_view_tokens, config, "max_view_tokens", 40, int)
    policy = _resolve(args.policy, config, "policy", "sentence", str)
    first_k = _resolve(args.first_k, config, "first_k", 5, int)

    corpus = load_entities(args.entities)
    vocab = Vocabulary()
    viewsets = [
        build_views(e, vocab, max_view_tokens, policy=policy, first_k=first_k)
        for e in corpus
    ]
    write_views(args.out, viewsets, vocab,
                meta={"max_view_tokens": max_view_tokens, "policy": policy})
    _log("build-views", {
        "entities": args.entities, "out": args.out, "policy": policy,
        "max_view_tokens": max_view_tokens, "first_k": first_k,
        "vocab_size": len(vocab),
    })
    total = sum(len(vs.views) for vs in viewsets)
    print(f"built {total} views over {len(viewsets)} entities "
          f"(mean {total / max(len(viewsets), 1):.2f})")
    return 0


def _train_config_from(args: argparse.Namespace, config: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        batch_size=_resolve(args.batch_size, config, "batch_size", 32, int),
        epochs=_resolve(args.epochs, config, "epochs", 5, int),
        learning_rate=_resolve(args.learning_rate, config, "learning_rate", 0.05, float),
        weight_decay=_resolve(args.weight_decay, config, "weight_decay", 0.0, float),
        warmup_ratio=_resolve(args.warmup_ratio, config, "warmup_ratio", 0.1, float),
        seed=_resolve(args.seed, config, "seed", 0, int),
        n_hard_negatives=_resolve(args.n_hard_negatives, config, "n_hard_negatives", 0, int),
        max_view_tokens=_resolve(None, config, "max_view_tokens", 40, int),
        max_ctx_tokens=_resolve(args.max_ctx_tokens, config, "max_ctx_tokens", 128, int),
        dim=_resolve(args.dim, config, "dim", 16, int),
        optimizer=_resolve(args.optimizer, config, "optimizer", "sgd", str),
        normalize=_resolve(args.normalize or None, config, "normalize", False, bool),
    )


def cmd_train(args: argparse.Namespace) -> int:
    config_file = _read_config_file(args.config)
    tc = _train_config_from(args, config_file)

    corpus = load_entities(args.entities)
    viewsets, vocab, _meta = read_views(args.views)
    mentions = load_mentions(args.mentions, corpus)

    hard_negatives = None
    initial_model = None
    if tc.n_hard_negatives > 0:
        # Mine against the freshly initialized parameters so the whole run
        # stays a pure function of the inputs and the seed.
        for m in mentions:
            mention_sequence(m, vocab, tc.max_ctx_tokens)
        initial_model = init_dual(vocab, tc.dim, tc.seed)
        index0 = build_index(corpus, viewsets, initial_model, normalize=tc.normalize)
        hard_negatives = mine_hard_negatives(
            index0, mentions, initial_model, tc.n_hard_negatives, tc.max_ctx_tokens,
            normalize=tc.normalize,
        )

    result = train(tc, vocab, viewsets, mentions,
                   hard_negatives=hard_negatives, initial_model=initial_model)
    result.model.vocab.freeze()
    save_checkpoint(result.model, args.checkpoint)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            for rec in result.history:
                fh.write(json.dumps(
                    {"step": rec.step, "loss": rec.loss, "lr": rec.lr}) + "\n")
    _log("train", {
        "entities": args.entities, "mentions": args.mentions, "views": args.views,
        "checkpoint": args.checkpoint, **tc.__dict__,
    })
    final = result.history[-1].loss if result.history else float("nan")
    print(f"trained {len(result.history)} steps; final loss {final:.6f}; "
          f"checkpoint fingerprint {fingerprint(result.model)[:12]}")
    return 0


def cmd_merge(args: argparse.Namespace) -> int:
    config_file = _read_config_file(args.config)
    mc = MergeConfig(
        top_k_pairs=_resolve(args.top_k_pairs, config_file, "top_k_pairs", 1, int),
        max_iters=_resolve(args.max_iters, config_file, "max_iters", 5, int),
        max_views=_resolve(args.max_views, config_file, "max_views", None, int),
        strategy=_resolve(args.strategy, config_file, "strategy", "distant", str),
    )
    viewsets, vocab, meta = read_views(args.views)
    model = load_checkpoint(args.checkpoint)
    _require_vocab_prefix(vocab, model, args.views, args.checkpoint)

    merged = [heuristic_search(vs, model.entity_side, mc, normalize=args.normalize)
              for vs in viewsets]
    meta = dict(meta)
    meta.update({
        "merged": True, "strategy": mc.strategy, "top_k_pairs": mc.top_k_pairs,
        "max_iters": mc.max_iters,
    })
    write_views(args.out, merged, vocab, meta=meta)
    before = sum(len(vs.views) for vs in viewsets)
    after = sum(len(vs.views) for vs in merged)
    _log("merge", {
        "views": args.views, "checkpoint": args.checkpoint, "out": args.out,
        "strategy": mc.strategy, "top_k_pairs": mc.top_k_pairs,
        "max_iters": mc.max_iters, "max_views": mc.max_views,
    })
    print(f"views {before} -> {after} "
          f"(mean {after / max(len(merged), 1):.2f} per entity)")
    return 0


def _require_vocab_prefix(views_vocab, model, views_path, checkpoint_path) -> None:
    """Views token ids must be valid under the checkpoint vocabulary."""
    view_tokens = views_vocab.regular_tokens()
    model_tokens = model.vocab.regular_tokens()
    if model_tokens[:len(view_tokens)] != view_tokens:
        raise StaleIndexError(
            f"{views_path} was built with a vocabulary that does not prefix "
            f"the checkpoint vocabulary in {checkpoint_path}"
        )


def cmd_index(args: argparse.Namespace) -> int:
    viewsets, vocab, _meta = read_views(args.views)
    model = load_checkpoint(args.checkpoint)
    _require_vocab_prefix(vocab, model, args.views, args.checkpoint)
    corpus = load_entities(args.entities)
    index = build_index(corpus, viewsets, model, normalize=args.normalize)
    save_index(index, args.out)
    n_vectors = sum(len(e.view_ids) for e in index.entities)
    _log("index", {
        "views": args.views, "checkpoint": args.checkpoint,
        "entities": args.entities, "out": args.out,
        "fingerprint": index.fingerprint[:12],
    })
    print(f"indexed {len(index.entities)} entities, {n_vectors} view vectors")
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    config_file = _read_config_file(args.config)
    k = _resolve(args.k, config_file, "k", 64, int)
    max_ctx_tokens = _resolve(args.max_ctx_tokens, config_file, "max_ctx_tokens", 128, int)

    index = load_index(args.index)
    model = load_checkpoint(args.checkpoint)
    require_fresh(index, model)
    corpus = load_entities(args.entities)
    mentions = load_mentions(args.mentions, corpus)

    results = []
    for m in mentions:
        vec = encode_mention(model.mention_side, m, model.vocab, max_ctx_tokens,
                             normalize=args.normalize)
        results.append(retrieve(index, vec, k, mention_id=m.mention_id))
    write_results(results, args.out)
    _log("retrieve", {
        "index": args.index, "checkpoint": args.checkpoint,
        "mentions": args.mentions, "k": k, "out": args.out,
    })
    print(f"retrieved top-{k} for {len(results)} mentions")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config_file = _read_config_file(args.config)
    k_list = _resolve(args.k_list, config_file, "k_list", ",".join(map(str, DEFAULT_KS)), str)
    ks = sorted({int(x) for x in k_list.split(",") if x.strip()})
    bin_size = _resolve(args.bin_size, config_file, "bin_size", 5, int)
    bin_k = _resolve(args.bin_k, config_file, "bin_k", max(ks), int)

    corpus = load_entities(args.entities)
    mentions = load_mentions(args.mentions, corpus)
    viewsets, _vocab, _meta = read_views(args.views)

    labeled = []
    for results_arg in args.results:
        if "=" in results_arg:
            label, path = results_arg.split("=", 1)
        else:
            label, path = Path(results_arg).stem, results_arg
        labeled.append((label, path))

    reports = []
    bins_by_label = {}
    for label, path in labeled:
        results = read_results(path)
        reports.append(recall_at_k(results, mentions, ks, label=label))
        bins_by_label[label] = length_binned_errors(
            results, mentions, corpus, viewsets, k=bin_k, bin_size=bin_size
        )

    table = compare_configs(reports)
    bin_lines = [f"error rate by gold description length (k={bin_k}, bin={bin_size})"]
    for label, rows in bins_by_label.items():
        for row in rows:
            bin_lines.append(
                f"  {label}  [{row.lo:>3},{row.hi:>3})  "
                f"mentions={row.mention_count:<6d} error={row.error_rate:.4f}"
            )
    report_text = table + "\n\n" + "\n".join(bin_lines) + "\n"

    out_prefix = Path(args.out)
    text_path = out_prefix.parent / (out_prefix.name + ".txt")
    records_path = out_prefix.parent / (out_prefix.name + ".jsonl")
    text_path.write_text(report_text, encoding="utf-8")
    write_report_records(records_path, reports, bins_by_label)

    figure_paths = []
    if not args.no_figures:
        from .plots import plot_length_bins, plot_recall_curves

        figure_paths.append(str(plot_recall_curves(
            reports, out_prefix.parent / (out_prefix.name + "_recall.png"))))
        figure_paths.append(str(plot_length_bins(
            bins_by_label, out_prefix.parent / (out_prefix.name + "_bins.png"))))

    _log("evaluate", {
        "results": dict(labeled), "mentions": args.mentions, "ks": ks,
        "bin_size": bin_size, "bin_k": bin_k,
        "report": str(text_path), "records": str(records_path),
        "figures": figure_paths,
    })
    print(report_text, end="")
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    corpus, mentions = generate_synthetic(
        seed=args.seed, n_entities=4, aspects_per_entity=2, vocab_size=48
    )
    vocab = Vocabulary()
    viewsets = [build_views(e, vocab, 40) for e in corpus]
    batch_mentions = mentions[:4]
    mention_seqs = [mention_sequence(m, vocab, 128) for m in batch_mentions]
    model = init_dual(vocab, args.dim, args.seed)
    view_seqs = {
        vs.entity_id: ([entity_sequence(vs.title_tokens, v.tokens) for v in vs.views],
                       [v.view_id for v in vs.views])
        for vs in viewsets
    }
    batch = build_batch(batch_mentions, mention_seqs, view_seqs)
    err = grad_check(model, batch, epsilon=args.epsilon, seed=args.seed)
    _log("grad-check", {
        "seed": args.seed, "dim": args.dim, "epsilon": args.epsilon,
        "tolerance": args.tolerance, "max_relative_error": err,
    })
    print(f"max relative gradient error: {err:.3e} (tolerance {args.tolerance:.1e})")
    return 0 if err <= args.tolerance else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewret",
        description="Multi-view entity retrieval pipeline",
    )
    parser.add_argument("--version", action="version", version=f"viewret {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n-entities", type=int, default=10)
    p.add_argument("--aspects", type=int, default=3)
    p.add_argument("--vocab-size", type=int, default=600)
    p.add_argument("--pool-size", type=int, default=10)
    p.add_argument("--context-words", type=int, default=8)
    p.add_argument("--entities", required=True, help="output entities JSONL")
    p.add_argument("--mentions", required=True, help="output mentions JSONL")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-views", help="segment descriptions into views")
    p.add_argument("--entities", required=True)
    p.add_argument("--out", required=True, help="output views file")
    p.add_argument("--max-view-tokens", type=int)
    p.add_argument("--policy", choices=VIEW_POLICIES)
    p.add_argument("--first-k", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_build_views)

    p = sub.add_parser("train", help="train the dual encoder")
    p.add_argument("--entities", required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--views", required=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--n-hard-negatives", type=int)
    p.add_argument("--max-ctx-tokens", type=int)
    p.add_argument("--normalize", action="store_true", default=False,
                   help="unit-normalize encodings (cosine scoring)")
    p.add_argument("--log", help="optional JSONL training log (step, loss, lr)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="expand view sets by heuristic merging")
    p.add_argument("--views", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--top-k-pairs", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--max-views", type=int)
    p.add_argument("--strategy", choices=("distant", "close"))
    p.add_argument("--normalize", action="store_true", default=False)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("index", help="encode and cache every view vector")
    p.add_argument("--views", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true", default=False)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="exact top-k retrieval for mentions")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--max-ctx-tokens", type=int)
    p.add_argument("--config")
    p.add_argument("--normalize", action="store_true", default=False)
    p.add_argument("--out", required=True, help="output results JSONL")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", help="recall@k report, records, and figures")
    p.add_argument("--results", required=True, nargs="+",
                   help="one or more LABEL=PATH results files")
    p.add_argument("--entities", required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--views", required=True)
    p.add_argument("--k-list")
    p.add_argument("--bin-size", type=int)
    p.add_argument("--bin-k", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True,
                   help="report prefix (writes .txt, .jsonl, *_recall.png, *_bins.png)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, CorpusFormatError, StaleIndexError) as exc:
        print(f"viewret: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
