"""Command-line entry point: ``simctr <command> [options]``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
Logs go to stderr as ``key=value`` lines.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import AppConfig, load_config_file, require
from .errors import ConfigError, SimError

log = logging.getLogger("simctr.cli")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _setup_logging(level: str) -> None:
    root = logging.getLogger("simctr")
    root.handlers.clear()
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s %(message)s"))
    root.addHandler(h)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    root.propagate = False


def _write_json(path, obj) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return p


def _sidecar(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.name + suffix)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _gen_defaults() -> dict:
    from .datagen import GenConfig

    d = {f.name: f.default for f in dataclasses.fields(GenConfig)}
    d["out"] = None
    return d


def cmd_datagen(cfg: AppConfig) -> int:
    from .datagen import GenConfig, generate, write_dataset

    require(cfg, "out")
    gen = GenConfig.from_dict({k: v for k, v in cfg.values.items() if k != "out"})
    t0 = time.perf_counter()
    ds = generate(gen)
    out = write_dataset(ds, cfg["out"])
    cfg.write(out / "config.json")
    log.info("event=datagen out=%s behaviors=%d train=%d test=%d positive_rate=%.4f seconds=%.2f",
             out, len(ds.behaviors), len(ds.train), len(ds.test), ds.meta["positive_rate"], time.perf_counter() - t0)
    return EXIT_OK


def cmd_ingest(cfg: AppConfig) -> int:
    from .datagen import ingest, write_dataset, write_id_maps

    require(cfg, "input", "out")
    if cfg["format"] != "tsv":
        raise ConfigError(f"unsupported format {cfg['format']!r}; only tsv is implemented")
    res = ingest(cfg["input"], schema=cfg["schema"], short_len=int(cfg["short_len"]),
                 test_fraction=float(cfg["test_fraction"]), seed=int(cfg["seed"]))
    out = write_dataset(res.dataset, cfg["out"])
    write_id_maps(res, out)
    cfg.write(out / "config.json")
    log.info("event=ingest out=%s %s", out, " ".join(f"{k}={v}" for k, v in res.stats.items()))
    return EXIT_OK


def _read_log(path):
    from .datagen import read_behaviors

    p = Path(path)
    return read_behaviors(p / "behaviors.tsv" if p.is_dir() else p)


def cmd_build_index(cfg: AppConfig) -> int:
    from .behavior_store import ubt_save

    require(cfg, "logs", "out")
    t0 = time.perf_counter()
    tree = _read_log(cfg["logs"]).tree()
    ubt_save(tree, cfg["out"])
    cfg.write(_sidecar(cfg["out"], ".config.json"))
    s = tree.stats()
    log.info("event=build_index out=%s users=%d behaviors=%d max_seq_len=%d categories_per_user_p99=%d seconds=%.2f",
             cfg["out"], s.users, s.behaviors, s.max_seq_len, s.categories_per_user_p99, time.perf_counter() - t0)
    return EXIT_OK


TRAIN_MODEL_KEYS = ("dim", "time_dim", "heads", "hidden", "pooling", "use_time", "alpha", "beta", "k",
                    "aux_max_len", "lr0", "decay", "batch_size", "init_scale")


def _train_defaults() -> dict:
    from .model import SimConfig

    fields = {f.name: f.default for f in dataclasses.fields(SimConfig) if f.name in TRAIN_MODEL_KEYS}
    fields["hidden"] = list(fields["hidden"])
    return {"data": None, "out": None, "mode": "hard", "epochs": 3, "seed": 0, **fields}


def cmd_train(cfg: AppConfig) -> int:
    from .datagen import load_dataset
    from .model import SimConfig, init_model, save_checkpoint
    from .trainer import train

    require(cfg, "data", "out")
    ds = load_dataset(cfg["data"])
    kw = {k: cfg[k] for k in TRAIN_MODEL_KEYS}
    kw["hidden"] = tuple(kw["hidden"])
    mcfg = SimConfig(n_items=int(ds.meta["n_items"]), n_categories=int(ds.meta["n_categories"]),
                     search=cfg["mode"], short_len=ds.short_len, **kw)
    epochs = int(cfg["epochs"])
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    tree = ds.tree()
    train_set = ds.train_samples(tree)
    test_set = ds.test_samples(tree)
    seed = int(cfg["seed"])
    model = init_model(mcfg, seed=seed)
    log.info("event=train_start mode=%s train=%d test=%d params=%d", mcfg.search, len(train_set), len(test_set),
             model.n_parameters())
    eval_set = test_set if test_set and len({s.label for s in test_set}) == 2 else None
    model, history = train(train_set, model, epochs, seed=seed, eval_set=eval_set)
    save_checkpoint(model, cfg["out"], extra={"seed": seed, "epochs": epochs})
    _write_json(_sidecar(cfg["out"], ".history.json"), history)
    cfg.write(_sidecar(cfg["out"], ".config.json"))
    log.info("event=train_done out=%s final_loss=%.6f", cfg["out"], history[-1]["loss"])
    return EXIT_OK


def cmd_eval(cfg: AppConfig) -> int:
    from .datagen import load_dataset
    from .esu import esu_trace
    from .metrics import compare_models, evaluate, score_samples
    from .model import load_checkpoint
    from .trainer import select_sbs

    require(cfg, "data", "ckpt", "report")
    ds = load_dataset(cfg["data"])
    samples = ds.test_samples() if len(ds.test) else ds.train_samples()
    model = load_checkpoint(cfg["ckpt"])
    frac = float(cfg["top_fraction"])
    if cfg.get("baseline_ckpt"):
        base = load_checkpoint(cfg["baseline_ckpt"])
        rb, rm, deltas = compare_models(samples, base, model, frac)
        report = {**rm.to_dict(), "baseline": rb.to_dict(), "deltas": {k: round(v, 10) for k, v in deltas.items()}}
    else:
        report = evaluate(samples, score_samples(model, samples), frac).to_dict()
    report["mode"] = model.config.search
    _write_json(cfg["report"], report)
    cfg.write(_sidecar(cfg["report"], ".config.json"))
    if cfg.get("dump_attention"):
        if model.config.pooling != "attention":
            raise ConfigError("--dump-attention needs an attention-pooling model")
        with open(cfg["dump_attention"], "w") as fh:
            for s in samples[: int(cfg["dump_limit"])]:
                tr = esu_trace(select_sbs(s, model), s.candidate, model)
                fh.write(json.dumps({"user_id": s.user_id, "item_id": s.candidate.item_id, **tr.to_dict()},
                                    sort_keys=True) + "\n")
    log.info("event=eval report=%s auc=%s p_d_gt_neg1=%s", cfg["report"], report["auc"], report["p_d_gt_neg1"])
    return EXIT_OK


def _load_service(cfg: AppConfig):
    from .behavior_store import ubt_load
    from .model import load_checkpoint
    from .serving import ScoringService

    return ScoringService(ubt_load(cfg["index"]), load_checkpoint(cfg["ckpt"]))


def cmd_serve(cfg: AppConfig) -> int:
    from .serving import ScoringServer, serve_batch

    require(cfg, "ckpt", "index")
    service = _load_service(cfg)
    if cfg.get("batch"):
        require(cfg, "out")
        with open(cfg["batch"], encoding="utf-8") as src, open(cfg["out"], "w") as dst:
            n = 0
            for line in serve_batch(service, src, with_latency=not cfg["omit_latency"]):
                dst.write(line + "\n")
                n += 1
        log.info("event=serve_batch requests=%d out=%s", n, cfg["out"])
        return EXIT_OK
    server = ScoringServer(service, cfg["host"], int(cfg["port"]))
    log.info("event=serve host=%s port=%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_bench(cfg: AppConfig) -> int:
    from .behavior_store import ubt_load
    from .model import load_checkpoint
    from .serving import BenchProfile, ScoringService, bench, bench_workload, decoupling_ratio

    require(cfg, "ckpt")
    model = load_checkpoint(cfg["ckpt"])
    prof = load_config_file(cfg["profile"]) if cfg.get("profile") else {}
    prof.setdefault("seed", int(cfg["seed"]))
    profile = BenchProfile.from_dict(prof)
    base = ubt_load(cfg["index"]) if cfg.get("index") else None
    tree, groups, now = bench_workload(profile, model, base)
    results = bench(ScoringService(tree, model), profile, groups, now)
    report = {"profile": dataclasses.asdict(profile), "results": [r.to_dict() for r in results]}
    lens = sorted(profile.seq_lengths)
    if len(lens) >= 2:
        ratio = decoupling_ratio(results, lens[0], lens[-1])
        report["p99_ratio"] = round(ratio, 6)
        report["decoupled"] = bool(ratio <= 2.0)
        log.info("event=bench_ratio short=%d long=%d p99_ratio=%.3f", lens[0], lens[-1], ratio)
    if cfg.get("report"):
        _write_json(cfg["report"], report)
        cfg.write(_sidecar(cfg["report"], ".config.json"))
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _gsu_bench_alsh(cfg: AppConfig) -> dict:
    from .alsh import AlshConfig, alsh_build, alsh_query, exact_mips

    corpus = str(cfg["corpus"])
    rng = np.random.default_rng(int(cfg["seed"]))
    if corpus.startswith("random:"):
        try:
            n, d = (int(x) for x in corpus.split(":")[1].split("x"))
        except ValueError:
            raise ConfigError("random corpus spec is random:<N>x<d>") from None
        vectors = rng.standard_normal((n, d))
    else:
        try:
            vectors = np.load(corpus)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load corpus {corpus}: {exc}") from None
    k = int(cfg["k"])
    index = alsh_build(vectors, AlshConfig(seed=int(cfg["seed"])))
    queries = rng.standard_normal((int(cfg["queries"]), vectors.shape[1]))
    alsh_query(index, queries[0], k)  # compile kernels outside the timed loop
    hits, lat, exact_lat = [], [], []
    for q in queries:
        t0 = time.perf_counter()
        got = {i for i, _ in alsh_query(index, q, k)}
        lat.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        truth = set(exact_mips(vectors, q, k).tolist())
        exact_lat.append(time.perf_counter() - t0)
        hits.append(len(got & truth) / len(truth))
    return {"recall_at_k": float(np.mean(hits)), "mean_query_ms": 1e3 * float(np.mean(lat)),
            "mean_exact_ms": 1e3 * float(np.mean(exact_lat)), "n": len(vectors), "dim": int(vectors.shape[1])}


def _gsu_bench_sequences(cfg: AppConfig) -> dict:
    from .datagen import load_dataset
    from .gsu import coverage_stat, hard_search, soft_search_exact
    from .model import load_checkpoint

    ds = load_dataset(cfg["corpus"])
    tree = ds.tree()
    samples = (ds.test_samples(tree) if len(ds.test) else ds.train_samples(tree))[: int(cfg["queries"])]
    k = int(cfg["k"])
    if cfg["mode"] == "hard":
        exact, lat = [], []
        for s in samples:
            t0 = time.perf_counter()
            got = hard_search(tree, s.user_id, s.candidate, k, before=s.candidate.request_time,
                              exclude_recent=ds.short_len)
            lat.append(time.perf_counter() - t0)
            cat = s.candidate.category_id
            want = s.long_seq.take(np.flatnonzero(s.long_seq.categories == cat)[-k:])
            exact.append(got == want)
        return {"recall_at_k": float(np.mean(exact)) if exact else None,
                "mean_query_ms": 1e3 * float(np.mean(lat)) if lat else None}
    require(cfg, "ckpt")
    model = load_checkpoint(cfg["ckpt"])
    if model.config.search != "soft":
        raise ConfigError("soft gsu-bench needs a checkpoint trained with --mode soft")
    hard_sets, soft_sets, lat = [], [], []
    for s in samples:
        t0 = time.perf_counter()
        soft = soft_search_exact(s.long_seq, s.candidate, model, k)
        lat.append(time.perf_counter() - t0)
        hard = hard_search(tree, s.user_id, s.candidate, k, before=s.candidate.request_time,
                           exclude_recent=ds.short_len)
        hard_sets.append(set(zip(hard.items.tolist(), hard.timestamps.tolist())))
        soft_sets.append(set(zip(soft.items.tolist(), soft.timestamps.tolist())))
    return {"coverage": coverage_stat(hard_sets, soft_sets), "mean_query_ms": 1e3 * float(np.mean(lat))}


def cmd_gsu_bench(cfg: AppConfig) -> int:
    require(cfg, "corpus")
    mode = cfg["mode"]
    if mode not in ("hard", "soft", "alsh"):
        raise ConfigError(f"mode must be hard, soft or alsh, got {mode!r}")
    stats = _gsu_bench_alsh(cfg) if mode == "alsh" else _gsu_bench_sequences(cfg)
    stats = {"mode": mode, "k": int(cfg["k"]), **stats}
    if cfg["omit_latency"]:
        stats = {k: v for k, v in stats.items() if not k.endswith("_ms")}
    log.info("event=gsu_bench %s", " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                             for k, v in stats.items()))
    if cfg.get("report"):
        _write_json(cfg["report"], stats)
        cfg.write(_sidecar(cfg["report"], ".config.json"))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

COMMANDS = {
    "datagen": (cmd_datagen, "generate a synthetic planted-signal dataset"),
    "ingest": (cmd_ingest, "ingest an external TSV interaction log"),
    "build-index": (cmd_build_index, "build the user behavior tree from a behavior log"),
    "train": (cmd_train, "train a model and write a checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint (AUC and d_category report)"),
    "serve": (cmd_serve, "serve scores over a socket or for a batch file"),
    "bench": (cmd_bench, "latency vs throughput benchmark of the scoring service"),
    "gsu-bench": (cmd_gsu_bench, "recall and latency of the first-stage searches"),
}


def _defaults(command: str) -> dict:
    if command == "datagen":
        return _gen_defaults()
    if command == "train":
        return _train_defaults()
    common = {"seed": 0}
    return {
        "ingest": {"input": None, "out": None, "format": "tsv", "schema": "clicks", "short_len": 10,
                   "test_fraction": 0.2, **common},
        "build-index": {"logs": None, "out": None, **common},
        "eval": {"data": None, "ckpt": None, "report": None, "baseline_ckpt": None, "dump_attention": None,
                 "dump_limit": 10, "top_fraction": 0.1, **common},
        "serve": {"ckpt": None, "index": None, "host": "127.0.0.1", "port": 8765, "batch": None, "out": None,
                  "omit_latency": False, **common},
        "bench": {"ckpt": None, "index": None, "profile": None, "report": None, **common},
        "gsu-bench": {"mode": "hard", "corpus": None, "k": 200, "ckpt": None, "queries": 200, "report": None,
                      "omit_latency": False, **common},
    }[command]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simctr", description="Two-stage lifelong-sequence CTR modeling toolkit.")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name):
        sp = sub.add_parser(name, help=COMMANDS[name][1], description=COMMANDS[name][1])
        sp.add_argument("--config", help="JSON or YAML file; command-line flags override it")
        sp.add_argument("--seed", type=int)
        return sp

    sp = add("datagen")
    sp.add_argument("--out")
    for name, typ in (("users", int), ("items", int), ("categories", int), ("seq-len-median", float),
                      ("max-seq-len", int), ("samples-per-user", int), ("label-noise", float),
                      ("short-len", int), ("test-fraction", float)):
        sp.add_argument(f"--{name}", type=typ)

    sp = add("ingest")
    sp.add_argument("--format", choices=["tsv"])
    sp.add_argument("--in", dest="input")
    sp.add_argument("--out")
    sp.add_argument("--schema", choices=["clicks", "reviews"])
    sp.add_argument("--short-len", type=int)
    sp.add_argument("--test-fraction", type=float)

    sp = add("build-index")
    sp.add_argument("--logs", help="behaviors.tsv or a dataset directory")
    sp.add_argument("--out")

    sp = add("train")
    sp.add_argument("--data")
    sp.add_argument("--out", help="checkpoint path")
    sp.add_argument("--mode", choices=["hard", "soft", "none"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--pooling", choices=["attention", "avg"])
    sp.add_argument("--use-time", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--k", type=int)
    sp.add_argument("--lr", dest="lr0", type=float)
    sp.add_argument("--decay", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)

    sp = add("eval")
    sp.add_argument("--data")
    sp.add_argument("--ckpt")
    sp.add_argument("--report")
    sp.add_argument("--baseline-ckpt")
    sp.add_argument("--dump-attention", metavar="PATH")
    sp.add_argument("--dump-limit", type=int)
    sp.add_argument("--top-fraction", type=float)

    sp = add("serve")
    sp.add_argument("--ckpt")
    sp.add_argument("--index")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--batch", metavar="PATH", help="score a file of JSON request lines instead of listening")
    sp.add_argument("--out", help="response file for --batch")
    sp.add_argument("--omit-latency", action="store_true", default=None)

    sp = add("bench")
    sp.add_argument("--ckpt")
    sp.add_argument("--index")
    sp.add_argument("--profile", help="JSON or YAML bench profile")
    sp.add_argument("--report")

    sp = add("gsu-bench")
    sp.add_argument("--mode", choices=["hard", "soft", "alsh"])
    sp.add_argument("--corpus", help="dataset directory (hard/soft), .npy matrix or random:<N>x<d> (alsh)")
    sp.add_argument("--k", type=int)
    sp.add_argument("--ckpt")
    sp.add_argument("--queries", type=int)
    sp.add_argument("--report")
    sp.add_argument("--omit-latency", action="store_true", default=None, help="drop timing fields from the report")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or usage error (2)
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    cli = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level")}
    try:
        file_values = load_config_file(args.config) if args.config else None
        cfg = AppConfig.resolve(args.command, _defaults(args.command), file_values, cli)
        return COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        log.error("event=config_error error=%r", str(exc))
        return EXIT_USAGE
    except (SimError, OSError, ValueError) as exc:
        log.error("event=runtime_error type=%s error=%r", type(exc).__name__, str(exc))
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
