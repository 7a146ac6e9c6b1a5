"""Command line entry point: ingest, generate, train, eval, rank, info.

Every command that writes results uses the same output layout::

    <out>/config.resolved   all settings after defaults, file and flags
    <out>/checkpoints/      model checkpoints (train)
    <out>/metrics/          CSV and text tables
    <out>/logs/             timestamped run log (the only non-reproducible file)

``ingest`` adds ``<out>/graph/`` and ``generate`` adds ``<out>/queries/``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import RunConfig, RunConfigError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("nnkg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--threads", type=int, help="BLAS threads (default 1)")
    common.add_argument("--out", metavar="DIR", help="output directory (default $NNKG_OUT)")
    common.add_argument("--verify", action="store_true", help="re-check outputs against a reference evaluator")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")

    p = _Parser(prog="nnkg", description="Neural logical operators for knowledge graph queries.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("ingest", parents=[common], help="build a graph bundle from triple files")
    s.add_argument("data", nargs="?", help="directory with train.txt, valid.txt, test.txt")

    s = sub.add_parser("generate", parents=[common], help="sample query files for each split")
    s.add_argument("graph", nargs="?", help="graph bundle (or run directory holding graph/)")

    s = sub.add_parser("train", parents=[common], help="train a model on generated queries")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on query files")
    s.add_argument("checkpoint", nargs="?")

    s = sub.add_parser("rank", parents=[common], help="answer one query given in the text grammar")
    s.add_argument("query", help='e.g. "(p 0 (e 1))"')
    s.add_argument("--top-n", type=int, dest="top_n")

    s = sub.add_parser("info", parents=[common], help="statistics of a dataset, bundle or checkpoint")
    s.add_argument("path")
    return p


def _resolve_config(args):
    overrides = {"seed": args.seed, "threads": args.threads}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise RunConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in ("data", "graph", "checkpoint", "top_n"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value) if key != "top_n" else value
    cfg = RunConfig.load(args.config, overrides)
    if cfg["threads"] < 1:
        raise RunConfigError("threads must be >= 1")
    return cfg


def _limit_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _out_dir(args, required=True):
    out = args.out or os.environ.get("NNKG_OUT")
    if not out and required:
        raise UsageError("no output directory: pass --out or set NNKG_OUT")
    return out


def _prepare_out(out, cfg):
    for sub in ("checkpoints", "metrics", "logs"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    _write_text(os.path.join(out, "config.resolved"), cfg.resolved_text())
    handler = logging.FileHandler(os.path.join(out, "logs", "run.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _require(cfg, key, what):
    if not cfg[key]:
        raise UsageError(f"missing {what}: set '{key}' in the config or on the command line")
    return cfg[key]


def _model_config(cfg):
    from .operators import ModelConfig

    try:
        return ModelConfig(**cfg.section("model"))
    except ValueError as e:
        raise UsageError(str(e)) from None


def _train_config(cfg):
    from .trainer import TrainConfig

    section = cfg.section("train")
    section.pop("train_structures")
    try:
        return TrainConfig(seed=cfg["seed"], **section)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _check_model_matches(cfg, model_cfg, source):
    for key in ("family", "embed_dim"):
        if key in cfg.explicit and cfg[key] != getattr(model_cfg, key):
            raise UsageError(f"{source} has {key}={getattr(model_cfg, key)!r} but the config says {cfg[key]!r}")


def _queries_dir(path):
    for candidate in (path, os.path.join(path, "queries")):
        if os.path.isdir(os.path.join(candidate, "train")) or os.path.isdir(os.path.join(candidate, "test")) \
                or os.path.isdir(os.path.join(candidate, "valid")):
            return candidate
    raise FileNotFoundError(f"no query files under {path}")


def _sub_seed(seed, *keys):
    import numpy as np

    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# -- commands ---------------------------------------------------------------------

def cmd_ingest(args, cfg):
    from .bundle import save_bundle, stats_line
    from .kg import load_dataset

    data = _require(cfg, "data", "triple directory")
    out = _out_dir(args)
    _prepare_out(out, cfg)
    _, raw, entities, relations = load_dataset(data)
    save_bundle(os.path.join(out, "graph"), raw, entities, relations)
    line = stats_line(entities, relations, raw)
    _write_text(os.path.join(out, "metrics", "stats.txt"), line + "\n")
    print(line)
    return EXIT_OK


def cmd_generate(args, cfg):
    from .bundle import load_bundle
    from .oracle import verify_sample
    from .query import STRUCTURES
    from .sampler import SPLITS, SamplerConfig, sample_queries, write_manifest, write_samples

    graph = _require(cfg, "graph", "graph bundle")
    out = _out_dir(args)
    splits, *_ = load_bundle(graph)
    _prepare_out(out, cfg)
    counts = cfg["count"]
    entries = {}
    summary = []
    for split in cfg["splits"]:
        if split not in SPLITS:
            raise UsageError(f"unknown split {split!r}")
        os.makedirs(os.path.join(out, "queries", split), exist_ok=True)
        for tag in cfg["structures"]:
            if tag not in STRUCTURES:
                raise UsageError(f"unknown structure {tag!r}")
            n = counts.get(tag, 0) if isinstance(counts, dict) else counts
            try:
                sc = SamplerConfig(
                    tag, n, max_answers=cfg["max_answers"], max_attempts=cfg["max_attempts"],
                    seed=_sub_seed(cfg["seed"], SPLITS.index(split), STRUCTURES.index(tag)),
                    require_hard=cfg["require_hard"] and split != "train",
                )
                result = sample_queries(splits, sc, split)
            except ValueError as e:
                raise DataError(f"{split}/{tag}: {e}") from None
            rel = f"{split}/{tag}.txt"
            path = os.path.join(out, "queries", rel)
            write_samples(path, result.samples)
            if args.verify:
                for line_no, sample in enumerate(result.samples, 1):
                    bad = verify_sample(splits, sample)
                    if bad:
                        raise DataError(f"{path}:{line_no}: answers disagree with the reference evaluator on {bad}")
            entries[rel] = {
                "split": split, "structure": tag, "requested": n, "written": len(result.samples),
                "attempts": result.attempts, "rejected": result.rejected,
            }
            summary.append(f"{rel}\t{len(result.samples)}")
    write_manifest(os.path.join(out, "queries", "manifest.json"), entries, splits)
    _write_text(os.path.join(out, "metrics", "generate.tsv"), "file\tqueries\n" + "".join(s + "\n" for s in summary))
    for s in summary:
        print(s)
    if args.verify:
        print(f"verified {sum(e['written'] for e in entries.values())} queries")
    return EXIT_OK


def _eval_queries(cfg, split):
    from .sampler import load_query_dir

    qdir = _queries_dir(cfg["queries"])
    if not os.path.isdir(os.path.join(qdir, split)):
        return {}
    return load_query_dir(qdir, split, cfg["eval_structures"] or None)


def cmd_train(args, cfg):
    import numpy as np

    from .bundle import load_bundle
    from .evaluator import evaluate
    from .operators import QueryModel
    from .sampler import load_query_dir
    from .trainer import NumericFailure, Trainer, load_checkpoint, save_checkpoint

    _require(cfg, "graph", "graph bundle")
    _require(cfg, "queries", "query directory")
    out = _out_dir(args)
    splits, *_ = load_bundle(cfg["graph"])
    train_q = load_query_dir(_queries_dir(cfg["queries"]), "train", cfg["train_structures"])
    if not train_q:
        raise DataError(f"no training query files for {cfg['train_structures']}")
    tc = _train_config(cfg)
    if cfg["resume"]:
        ck = load_checkpoint(cfg["resume"])
        _check_model_matches(cfg, ck.model.cfg, cfg["resume"])
        model = ck.model
        trainer = ck.restore_trainer(train_q, tc)
    else:
        mc = _model_config(cfg)
        model = QueryModel(mc, splits.entity_count, splits.relation_count, rng=np.random.default_rng([cfg["seed"], 1]))
        trainer = Trainer(model, train_q, tc, rng=np.random.default_rng([cfg["seed"], 2]))
    if (model.entity_count, model.relation_count) != (splits.entity_count, splits.relation_count):
        raise UsageError("checkpoint id spaces do not match the graph bundle")
    _prepare_out(out, cfg)
    valid_q = _eval_queries(cfg, "valid") if tc.eval_every else {}
    model.check_supports(list(valid_q))
    valid_rows = []

    def on_eval(t):
        if not valid_q:
            return {}
        table = evaluate(model, valid_q, "valid", batch_size=cfg["eval_batch_size"])
        for tag in table.present + ["avg"]:
            for m in table.metrics:
                valid_rows.append(f"{t.iteration},{tag},{m},{table[tag][m]:.6f}")
        log.info("iteration %d valid avg MRR %.4f", t.iteration, table.average["MRR"])
        return {"valid_mrr": table.average["MRR"]}

    def on_checkpoint(t):
        path = os.path.join(out, "checkpoints", f"iter-{t.iteration:08d}.ckpt")
        save_checkpoint(path, model, t)
        log.info("wrote %s", path)

    log.info("training %s for %d iterations", model.cfg.family, max(tc.iterations - trainer.iteration, 0))
    try:
        trainer.run(on_eval=on_eval, on_checkpoint=on_checkpoint)
    except NumericFailure:
        path = os.path.join(out, "checkpoints", "diagnostic.ckpt")
        save_checkpoint(path, model, trainer)
        log.error("wrote diagnostic checkpoint %s", path)
        raise
    save_checkpoint(os.path.join(out, "checkpoints", "final.ckpt"), model, trainer)
    lines = ["iteration,loss"] + [f"{h['iteration']},{h['loss']:.6f}" for h in trainer.history]
    _write_text(os.path.join(out, "metrics", "train_log.csv"), "\n".join(lines) + "\n")
    if valid_rows:
        _write_text(os.path.join(out, "metrics", "valid.csv"),
                    "iteration,structure,metric,value\n" + "\n".join(valid_rows) + "\n")
    last = trainer.history[-1]["loss"] if trainer.history else float("nan")
    print(f"iterations={trainer.iteration} final_loss={last:.6f}")
    return EXIT_OK


def _load_model(cfg, path):
    from .trainer import load_checkpoint

    ck = load_checkpoint(path)
    _check_model_matches(cfg, ck.model.cfg, path)
    return ck.model


def cmd_eval(args, cfg):
    from .evaluator import evaluate, random_baseline

    path = _require(cfg, "checkpoint", "checkpoint")
    _require(cfg, "queries", "query directory")
    out = _out_dir(args)
    model = _load_model(cfg, path)
    split = cfg["eval_split"]
    if split not in ("valid", "test"):
        raise UsageError("eval_split must be 'valid' or 'test'")
    samples = _eval_queries(cfg, split)
    if not samples:
        raise DataError(f"no {split} query files under {cfg['queries']}")
    model.check_supports(list(samples))
    if cfg["graph"]:
        from .bundle import load_bundle

        splits, *_ = load_bundle(cfg["graph"])
        if splits.entity_count != model.entity_count:
            raise UsageError("checkpoint entity count does not match the graph bundle")
    _prepare_out(out, cfg)
    table = evaluate(model, samples, split, batch_size=cfg["eval_batch_size"])
    base = random_baseline(samples, model.entity_count, split)
    mdir = os.path.join(out, "metrics")
    _write_text(os.path.join(mdir, f"eval_{split}.csv"), table.to_csv())
    _write_text(os.path.join(mdir, f"eval_{split}.txt"), table.to_text())
    _write_text(os.path.join(mdir, f"random_{split}.csv"), base.to_csv())
    print(table.to_text(title=f"{model.cfg.family} on {split} (%)"), end="")
    return EXIT_OK


def cmd_rank(args, cfg):
    import numpy as np

    from .evaluator import entity_distances
    from .query import parse_node

    path = _require(cfg, "checkpoint", "checkpoint")
    model = _load_model(cfg, path)
    node = parse_node(args.query)
    names = None
    if cfg["graph"]:
        from .bundle import load_bundle

        _, _, entities, _, _ = load_bundle(cfg["graph"])
        if len(entities) != model.entity_count:
            raise UsageError("checkpoint entity count does not match the graph bundle")
        names = entities.names
    _check_ids(node, model)
    dist = entity_distances(model.embed_query(node), model.entity.value)
    order = np.lexsort((np.arange(len(dist)), dist))[: max(cfg["top_n"], 0)]
    lines = [f"{i + 1}\t{names[e] if names else e}\t{dist[e]:.6f}" for i, e in enumerate(order)]
    text = "".join(line + "\n" for line in lines)
    out = _out_dir(args, required=False)
    if out:
        _prepare_out(out, cfg)
        _write_text(os.path.join(out, "metrics", "rank.tsv"), "rank\tentity\tdistance\n" + text)
    print(text, end="")
    return EXIT_OK


def _check_ids(node, model):
    from .query import anchors_of, relations_of

    for e in anchors_of(node):
        if e >= model.entity_count:
            raise DataError(f"entity id {e} out of range (model has {model.entity_count})")
    for r in relations_of(node):
        if r >= model.relation_count:
            raise DataError(f"relation id {r} out of range (model has {model.relation_count})")


def cmd_info(args, cfg):
    from .bundle import find_bundle, load_bundle, stats_line

    path = args.path
    if os.path.isfile(path):
        from .trainer import load_checkpoint

        ck = load_checkpoint(path)
        n_params = sum(p.value.size for p in ck.model.parameters())
        print(
            f"family={ck.model.cfg.family} embed_dim={ck.model.cfg.embed_dim} "
            f"entities={ck.model.entity_count} relations={ck.model.relation_count // 2} "
            f"parameters={n_params} iteration={ck.iteration}"
        )
        return EXIT_OK
    try:
        find_bundle(path)
        _, raw, entities, relations, _ = load_bundle(path)
    except FileNotFoundError:
        from .kg import load_dataset

        _, raw, entities, relations = load_dataset(path)
    print(stats_line(entities, relations, raw))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "rank": cmd_rank,
    "info": cmd_info,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve_config(args)
    except RunConfigError as e:
        print(f"nnkg: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    _limit_threads(cfg["threads"])

    from .kg import KGError
    from .operators import UnsupportedOperatorError
    from .query import QueryError
    from .trainer import CheckpointError, NumericFailure

    root = logging.getLogger()
    before = list(root.handlers)
    try:
        return COMMANDS[args.command](args, cfg)
    except (UsageError, RunConfigError, UnsupportedOperatorError) as e:
        print(f"nnkg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as e:
        print(f"nnkg: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, KGError, QueryError, CheckpointError, OSError, ValueError) as e:
        print(f"nnkg: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    finally:
        for h in root.handlers[:]:
            if h not in before:
                root.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
