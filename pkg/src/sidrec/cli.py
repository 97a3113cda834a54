"""Pipeline command-line interface.

Stages communicate only through files under ``--out-dir``; every artifact
carries the structural config hash, and stages refuse inputs produced under
an incompatible configuration. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import artifacts, dedup, quantizer, recommender, synth
from .artifacts import ArtifactError
from .config import PipelineConfig, load_config
from .corpus import CorpusError, InteractionCorpus, Split, k_core_filter, load_interactions
from .dedup import DedupError
from .eval import evaluate, popularity_groups
from .features import FeatureError, FeatureSet, load_features, write_index, write_matrix, write_tags
from .trie import SidTrie, TemperatureConfig, TrieError

log = logging.getLogger("sidrec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad usage instead of argparse's 2
        raise UsageError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="path to the YAML config file")
    sub.add_argument("--out-dir", required=True, help="artifact directory")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="sidrec", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a planted-structure synthetic dataset")
    _add_common(p)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--transition-bias", type=float, default=0.9)
    p.add_argument("--noise-scale", type=float, default=0.25)

    p = subs.add_parser("prepare", help="filter interactions and build splits")
    _add_common(p)

    p = subs.add_parser("train-tokenizer", help="train the semantic-ID tokenizer")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)

    p = subs.add_parser("dedup", help="resolve SID collisions via transport assignment")
    _add_common(p)

    p = subs.add_parser("train-recommender", help="train the sequence generator")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)

    p = subs.add_parser("evaluate", help="rank the catalog for held-out targets")
    _add_common(p)
    p.add_argument("--split", choices=["valid", "test"], default="test")

    p = subs.add_parser("report", help="aggregate diagnostics and metrics")
    _add_common(p)
    p.add_argument("--plots", action="store_true", help="emit bar charts per group")
    return parser


# -- shared stage plumbing ---------------------------------------------------


def _setup(args) -> tuple[PipelineConfig, Path]:
    try:
        cfg = load_config(args.config)
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _record_timing(out: Path, stage: str, seconds: float) -> None:
    path = out / "timings.json"
    data = {}
    if path.exists():
        data = json.loads(path.read_text())
    data[stage] = round(seconds, 3)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _data_paths(cfg: PipelineConfig, out: Path) -> dict[str, str]:
    base = out / "data"
    defaults = {
        "interactions": base / "interactions.tsv",
        "content_matrix": base / "content.mat",
        "content_index": base / "content.idx",
        "collab_matrix": base / "collab.mat",
        "collab_index": base / "collab.idx",
        "tags": base / "tags.tsv",
        "tag_matrix": base / "tag_content.mat",
        "tag_index": base / "tag_content.idx",
    }
    overrides = {
        "interactions": cfg.interactions_path,
        "content_matrix": cfg.content_matrix,
        "content_index": cfg.content_index,
        "collab_matrix": cfg.collab_matrix,
        "collab_index": cfg.collab_index,
        "tags": cfg.tags_path,
        "tag_matrix": cfg.tag_matrix,
        "tag_index": cfg.tag_index,
    }
    return {key: str(overrides[key] or defaults[key]) for key in defaults}


def _load_corpus(out: Path, cfg: PipelineConfig) -> tuple[InteractionCorpus, dict[str, str]]:
    record = artifacts.load_json(out / "corpus.json", "corpus", cfg)
    corpus = InteractionCorpus(
        users=record["users"],
        items=record["items"],
        sequences=record["sequences"],
        times={u: [int(t) for t in ts] for u, ts in record["times"].items()},
        splits={
            u: Split(train=tuple(s[:-2]), valid=s[-2], test=s[-1])
            for u, s in record["sequences"].items()
        },
        n_interactions=record["stats"]["n_interactions"],
    )
    return corpus, record["paths"]


def _load_feature_set(corpus: InteractionCorpus, paths: dict[str, str], cfg: PipelineConfig) -> FeatureSet:
    return load_features(
        corpus,
        paths["content_matrix"], paths["content_index"],
        paths["collab_matrix"], paths["collab_index"],
        paths["tags"], paths["tag_matrix"], paths["tag_index"],
        cfg.n_levels, cfg.d_content, cfg.d_collab,
    )


def _load_tokenizer(out: Path, cfg: PipelineConfig) -> quantizer.QuantizerModel:
    record = artifacts.load_checkpoint(out / "tokenizer.ckpt", "tokenizer", cfg)
    model = quantizer.QuantizerModel(cfg, record["tag_vocab_sizes"])
    model.load_state_dict(record["state_dict"])
    model.eval()
    return model


def _ats(cfg: PipelineConfig, n_items: int) -> TemperatureConfig:
    return TemperatureConfig(
        tau_min=cfg.tau_min, tau_max=cfg.tau_max, alpha=cfg.tau_alpha,
        n_ref=cfg.resolve_n_ref(n_items),
    )


# -- stages ------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg, out = _setup(args)
    started = time.monotonic()
    spec = synth.SynthSpec(
        d_content=cfg.d_content,
        d_collab=cfg.d_collab,
        transition_bias=args.transition_bias,
        noise_scale=args.noise_scale,
        max_len=cfg.max_len,
        k_core=cfg.k_core,
    )
    corpus, features = synth.synth_generate(
        cfg.seed, args.users, args.items, args.categories, args.depth, spec
    )
    base = out / "data"
    base.mkdir(parents=True, exist_ok=True)

    with open(base / "interactions.tsv", "w", encoding="utf-8") as fh:
        for user in corpus.users:
            for item, ts in zip(corpus.sequences[user], corpus.times[user]):
                fh.write(f"{user}\t{item}\t{ts}\n")

    items = corpus.items
    write_matrix(base / "content.mat", np.stack([features.items[i].e_content for i in items]))
    write_index(base / "content.idx", items)
    write_matrix(base / "collab.mat", np.stack([features.items[i].e_collab for i in items]))
    write_index(base / "collab.idx", items)
    write_tags(base / "tags.tsv", {i: list(features.items[i].tags) for i in items})
    tag_names = sorted(features.tag_embeddings)
    write_matrix(base / "tag_content.mat", np.stack([features.tag_embeddings[t] for t in tag_names]))
    write_index(base / "tag_content.idx", tag_names)

    _record_timing(out, "synth", time.monotonic() - started)
    log.info("synth: %d users, %d items -> %s", len(corpus.users), len(items), base)
    return 0


def cmd_prepare(args) -> int:
    cfg, out = _setup(args)
    started = time.monotonic()
    paths = _data_paths(cfg, out)
    source = artifacts.require(paths["interactions"], "interaction log")
    interactions = load_interactions(source)
    corpus = k_core_filter(interactions, cfg.k_core, max_len=cfg.max_len)
    artifacts.save_json(
        out / "corpus.json", "corpus", cfg, cfg.seed,
        {
            "users": corpus.users,
            "items": corpus.items,
            "sequences": corpus.sequences,
            "times": corpus.times,
            "stats": corpus.stats(),
            "paths": paths,
        },
    )
    _record_timing(out, "prepare", time.monotonic() - started)
    log.info("prepare: %s", corpus.stats())
    return 0


def cmd_train_tokenizer(args) -> int:
    cfg, out = _setup(args)
    started = time.monotonic()
    corpus, paths = _load_corpus(out, cfg)
    features = _load_feature_set(corpus, paths, cfg).normalized(cfg.n_levels)
    model, sid_map, history = quantizer.train_quantizer(corpus, features, cfg, epochs=args.epochs)
    artifacts.save_checkpoint(
        out / "tokenizer.ckpt", "tokenizer", cfg, cfg.seed,
        {
            "state_dict": model.state_dict(),
            "tag_vocab_sizes": [len(v) for v in features.tag_vocab],
            "loss_history": history,
        },
    )
    artifacts.write_sid_map(out / "sid_map_raw.tsv", sid_map)
    artifacts.save_meta(out / "sid_map_raw.meta.json", "sid-map-raw", cfg, cfg.seed)
    _record_timing(out, "train-tokenizer", time.monotonic() - started)
    report = dedup.detect_collisions(sid_map)
    log.info("tokenizer trained; pre-dedup collision rate %.4f", report.final_rate)
    return 0


def cmd_dedup(args) -> int:
    cfg, out = _setup(args)
    started = time.monotonic()
    corpus, paths = _load_corpus(out, cfg)
    features = _load_feature_set(corpus, paths, cfg).normalized(cfg.n_levels)
    artifacts.check_meta(out / "sid_map_raw.meta.json", "sid-map-raw", cfg)
    raw_map = artifacts.read_sid_map(out / "sid_map_raw.tsv")
    model = _load_tokenizer(out, cfg)
    items, batch = quantizer.build_item_arrays(corpus, features, cfg.n_levels)
    latents = quantizer.item_latents(model, items, batch)
    codebooks = model.codebooks.codes.numpy()

    pre = dedup.detect_collisions(raw_map)
    assignment = dedup.sinkhorn_dedup(
        raw_map, latents, codebooks,
        eps_scale=cfg.dedup_eps_scale,
        max_iter=cfg.dedup_max_iter,
        candidate_cap=cfg.dedup_candidate_cap,
    )
    post = dedup.detect_collisions(assignment.sid_map)

    artifacts.write_sid_map(out / "sid_map.tsv", assignment.sid_map)
    artifacts.save_meta(out / "sid_map.meta.json", "sid-map", cfg, cfg.seed)
    artifacts.save_json(
        out / "dedup_report.json", "dedup-report", cfg, cfg.seed,
        {
            "pre": {"prefix_rates": pre.prefix_rates, "final_rate": pre.final_rate},
            "post": {"prefix_rates": post.prefix_rates, "final_rate": post.final_rate},
            "n_moves": len(assignment.moves),
            "total_move_cost": sum(m.cost for m in assignment.moves),
            "perplexity_pre": dedup.perplexity_report(raw_map, cfg.n_levels, cfg.codebook_size),
            "perplexity_post": dedup.perplexity_report(
                assignment.sid_map, cfg.n_levels, cfg.codebook_size
            ),
        },
    )
    _record_timing(out, "dedup", time.monotonic() - started)
    log.info("dedup: %d moves, final collision rate %.4f", len(assignment.moves), post.final_rate)
    return 0


def _purified_collab(model: quantizer.QuantizerModel, corpus, features, n_levels):
    items, batch = quantizer.build_item_arrays(corpus, features, n_levels)
    with torch.no_grad():
        g = quantizer.compute_gate(model, batch.e_collab)
        purified = quantizer.purify(g, batch.e_collab).numpy()
    return {item: purified[i] for i, item in enumerate(items)}


def cmd_train_recommender(args) -> int:
    cfg, out = _setup(args)
    started = time.monotonic()
    corpus, paths = _load_corpus(out, cfg)
    features = _load_feature_set(corpus, paths, cfg).normalized(cfg.n_levels)
    artifacts.check_meta(out / "sid_map.meta.json", "sid-map", cfg)
    sid_map = artifacts.read_sid_map(out / "sid_map.tsv")
    tok = _load_tokenizer(out, cfg)
    collab_override = (
        _purified_collab(tok, corpus, features, cfg.n_levels) if cfg.use_purified_collab else None
    )
    trie = SidTrie.build(sid_map)
    model, history = recommender.train_recommender(
        corpus, features, sid_map, trie, cfg,
        epochs=args.epochs,
        collab_override=collab_override,
        codebooks=tok.codebooks.codes.clone(),
    )
    artifacts.save_checkpoint(
        out / "recommender.ckpt", "recommender", cfg, cfg.seed,
        {
            "state_dict": model.state_dict(),
            "tag_vocab_sizes": [len(v) for v in features.tag_vocab],
            "train_history": history,
        },
    )
    _record_timing(out, "train-recommender", time.monotonic() - started)
    log.info("recommender trained; best valid recall@10 %.4f",
             max(h["valid_recall@10"] for h in history) if history else float("nan"))
    return 0


def _load_recommender(out: Path, cfg: PipelineConfig) -> recommender.RecommenderModel:
    record = artifacts.load_checkpoint(out / "recommender.ckpt", "recommender", cfg)
    codebooks = record["state_dict"]["codebooks"]
    model = recommender.RecommenderModel(cfg, codebooks, record["tag_vocab_sizes"])
    model.load_state_dict(record["state_dict"])
    model.eval()
    return model


def cmd_evaluate(args) -> int:
    cfg, out = _setup(args)
    started = time.monotonic()
    corpus, paths = _load_corpus(out, cfg)
    features = _load_feature_set(corpus, paths, cfg).normalized(cfg.n_levels)
    artifacts.check_meta(out / "sid_map.meta.json", "sid-map", cfg)
    sid_map = artifacts.read_sid_map(out / "sid_map.tsv")
    trie = SidTrie.build(sid_map)
    model = _load_recommender(out, cfg)

    report = evaluate(
        model, trie, corpus, features, args.split, cfg,
        ats=_ats(cfg, len(sid_map)),
        with_groups=True,
        export_path=out / "recommendations.tsv",
    )
    artifacts.save_meta(out / "recommendations.meta.json", "recommendations", cfg, cfg.seed)
    artifacts.save_json(
        out / "metrics.json", "metrics", cfg, cfg.seed,
        {"split": args.split, "metrics": report.to_dict()},
    )
    _record_timing(out, "evaluate", time.monotonic() - started)
    log.info("evaluate[%s]: %s", args.split, report.to_dict())
    return 0


def cmd_report(args) -> int:
    cfg, out = _setup(args)
    raw_map = artifacts.read_sid_map(out / "sid_map_raw.tsv")
    dedup_record = artifacts.load_json(out / "dedup_report.json", "dedup-report", cfg)
    metrics_record = artifacts.load_json(out / "metrics.json", "metrics", cfg)
    timings = {}
    timing_path = out / "timings.json"
    if timing_path.exists():
        timings = json.loads(timing_path.read_text())

    payload = {
        "sid_quality": {
            "pre_dedup": {
                "prefix_collision_rates": dedup_record["pre"]["prefix_rates"],
                "final_collision_rate": dedup_record["pre"]["final_rate"],
                "perplexity": dedup_record["perplexity_pre"],
            },
            "post_dedup": {
                "prefix_collision_rates": dedup_record["post"]["prefix_rates"],
                "final_collision_rate": dedup_record["post"]["final_rate"],
                "perplexity": dedup_record["perplexity_post"],
            },
            "n_items": len(raw_map),
            "n_moves": dedup_record["n_moves"],
        },
        "metrics": metrics_record["metrics"],
        "split": metrics_record["split"],
        "timing": timings,
    }
    artifacts.save_json(out / "report.json", "report", cfg, cfg.seed, payload)
    if args.plots:
        _emit_plots(out, metrics_record["metrics"])
    log.info("report written to %s", out / "report.json")
    return 0


def _emit_plots(out: Path, metrics: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = metrics.get("groups") or {}
    names = [n for n in ("popular", "medium", "long_tail") if n in groups]
    if not names:
        return
    values = [
        groups[n]["recall"]["10"] if groups[n]["recall"] else 0.0 for n in names
    ]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(names, values)
    ax.set_ylabel("Recall@10")
    ax.set_title("Recall by popularity group")
    fig.tight_layout()
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    fig.savefig(plots / "groups.png", dpi=120)
    plt.close(fig)


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train-tokenizer": cmd_train_tokenizer,
    "dedup": cmd_dedup,
    "train-recommender": cmd_train_recommender,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, FeatureError, ArtifactError, DedupError, TrieError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (quantizer.NumericError, recommender.NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
