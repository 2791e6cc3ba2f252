"""Pipeline orchestration and command-line interface.

Commands: pipeline, coarsen, embed, refine, eval, bench, synth. Each stage
is runnable standalone from the previous stage's serialized artifacts and
composes bit-exactly with the one-shot pipeline command under equal seeds.
Config precedence: flags > config file > defaults.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import coarsen as _coarsen
from . import evaluate as _evaluate
from . import hetgraph, refine, synth
from .embed_base import WalkConfig, get_base_embedder
from .errors import ConfigError, DataError, HetmileError
from .rng import derive_seed

log = logging.getLogger("hetmile")

_STAGE_COARSEN = 0x5C01
_STAGE_EMBED = 0x5C02
_STAGE_REFINE = 0x5C03
_STAGE_EVAL = 0x5C04


@dataclass
class PipelineConfig:
    edges: str = None
    schema: str = None
    labels: str = None
    meta_paths: str = None          # comma-separated type-name paths
    embedder: str = "metapath2vec"
    d: int = 128
    strategy: str = "jacc_max"
    levels: int = 1
    lsh_k: int = 128
    lsh_bands: int = 0
    lsh_mode: str = "banded"
    max_group: int = 2
    walks_per_node: int = 10
    walk_length: int = 80
    window: int = 5
    negatives: int = 5
    sgns_epochs: int = 5
    initial_lr: float = 0.025
    type_aware_negatives: int = 1
    refine_layers: int = 4
    refine_epochs: int = 200
    refine_lr: float = 0.01
    train_pair: str = "embed"
    link_prediction: int = 0
    holdout: float = 0.10
    runs: int = 5  # metric repetitions with seeds seed+0..runs-1
    folds: int = 10
    seed: int = 0
    threads: int = 0
    out_dir: str = "out"

    def validate(self, need_data=True):
        if self.d < 2:
            raise ConfigError("d must be >= 2")
        if need_data:
            if not self.edges or not self.schema:
                raise ConfigError("edges and schema paths are required")
            for p in (self.edges, self.schema, self.labels):
                if p and not os.path.exists(p):
                    raise ConfigError(f"file not found: {p}")
        if self.levels < 0:
            raise ConfigError("levels must be >= 0")
        return self

    def meta_path_list(self):
        if not self.meta_paths:
            raise ConfigError("meta_paths is required (e.g. 'a-p-a,a-p-v-p-a')")
        return [s.strip() for s in str(self.meta_paths).split(",") if s.strip()]

    def coarsen_config(self, seed=None):
        return _coarsen.CoarsenConfig(
            strategy=self.strategy, levels=max(self.levels, 1),
            lsh_k=self.lsh_k, lsh_bands=self.lsh_bands,
            lsh_mode=self.lsh_mode, max_group=self.max_group,
            seed=derive_seed(self.seed if seed is None else seed,
                             _STAGE_COARSEN))

    def walk_config(self, seed=None):
        return WalkConfig(
            walks_per_node=self.walks_per_node, walk_length=self.walk_length,
            window=self.window, negatives=self.negatives,
            epochs=self.sgns_epochs, initial_lr=self.initial_lr,
            type_aware_negatives=bool(self.type_aware_negatives),
            seed=derive_seed(self.seed if seed is None else seed,
                             _STAGE_EMBED))

    def refine_config(self, seed=None):
        return refine.RefineConfig(
            layers=self.refine_layers, epochs=self.refine_epochs,
            learning_rate=self.refine_lr, train_pair=self.train_pair,
            seed=derive_seed(self.seed if seed is None else seed,
                             _STAGE_REFINE))


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return raw


def merge_config(file_values, flag_values):
    cfg = PipelineConfig()
    for k, v in (file_values or {}).items():
        setattr(cfg, k, v)
    for k, v in (flag_values or {}).items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, cfg, inputs, outputs):
    manifest = {
        "command": command,
        "config": asdict(cfg) if cfg is not None else None,
        "inputs": {p: _sha256(p) for p in inputs if p and os.path.exists(p)},
        "outputs": {p: _sha256(p) for p in outputs if p and os.path.exists(p)},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


# -- pipeline orchestration ----------------------------------------------------

@dataclass
class PipelineResult:
    e0: np.ndarray            # float32, rows = G_0 nodes
    chain: object = None
    em: np.ndarray = None
    params: object = None
    curve: list = None
    timings: dict = None


def execute_pipeline(g, cfg, seed=None):
    """Coarsen -> base embed -> train refiner -> refine, with stage timings.

    levels == 0 bypasses coarsening and refinement entirely (the plain base
    embedding baseline). Refiner training time is booked under refine.
    """
    seed = cfg.seed if seed is None else seed
    walk_cfg = cfg.walk_config(seed)
    embedder = get_base_embedder(cfg.embedder, cfg.meta_path_list(), walk_cfg)
    timings = {}
    if cfg.levels == 0:
        t0 = time.perf_counter()
        e0 = embedder.embed(g, cfg.d)
        timings["embed_seconds"] = time.perf_counter() - t0
        timings["coarsen_seconds"] = 0.0
        timings["refine_seconds"] = 0.0
        timings["total_seconds"] = timings["embed_seconds"]
        return PipelineResult(e0=e0, em=e0, timings=timings)

    coarsen_cfg = cfg.coarsen_config(seed)
    t0 = time.perf_counter()
    chain = _coarsen.coarsen_chain(g, coarsen_cfg)
    timings["coarsen_seconds"] = time.perf_counter() - t0
    for w in chain.warnings:
        log.warning(w)

    t0 = time.perf_counter()
    em = embedder.embed(chain.coarsest, cfg.d)
    timings["embed_seconds"] = time.perf_counter() - t0

    refine_cfg = cfg.refine_config(seed)
    base_fn = None
    if refine_cfg.train_pair == "embed":
        base_fn = lambda graph: embedder.embed(graph, cfg.d)  # noqa: E731
    t0 = time.perf_counter()
    params, curve = refine.train_refiner(chain.coarsest,
                                         em.astype(np.float64),
                                         refine_cfg, coarsen_cfg, base_fn)
    e0 = refine.refine_chain(chain, em.astype(np.float64), params)
    timings["refine_seconds"] = time.perf_counter() - t0
    timings["total_seconds"] = (timings["coarsen_seconds"] +
                                timings["embed_seconds"] +
                                timings["refine_seconds"])
    return PipelineResult(e0=e0.astype(np.float32), chain=chain, em=em,
                          params=params, curve=curve, timings=timings)


def _metrics_for(g, cfg, emb, labels):
    f1 = None
    if labels is not None:
        mean, std = _evaluate.node_classification(
            emb, labels, folds=cfg.folds, seed=derive_seed(cfg.seed, _STAGE_EVAL))
        f1 = {"mean": mean, "std": std}
    au = None
    if cfg.link_prediction:
        def lp_embed(residual, run_seed):
            return execute_pipeline(residual, cfg, seed=run_seed).e0

        mean, std = _evaluate.link_prediction(
            g, lp_embed, holdout=cfg.holdout,
            seed=derive_seed(cfg.seed, _STAGE_EVAL, 1), runs=cfg.runs)
        au = {"mean": mean, "std": std}
    return f1, au


# -- commands -------------------------------------------------------------------

def cmd_synth(args):
    paths = synth.write_dataset(args.out, args.n_per_type, args.types,
                                args.communities, args.p_in, args.p_out,
                                args.seed)
    write_manifest(args.out, "synth", None, [], list(paths.values()))
    print(json.dumps({"written": paths}, indent=2, sort_keys=True))
    return 0


def cmd_pipeline(args):
    cfg = merge_config(load_config(args.config) if args.config else {},
                       _flag_values(args)).validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    g = hetgraph.load_graph(cfg.edges, cfg.schema)
    labels = _evaluate.load_labels(cfg.labels, g) if cfg.labels else None

    res = execute_pipeline(g, cfg)
    emb_path = os.path.join(cfg.out_dir, "e0.hmeb")
    hetgraph.save_embeddings(res.e0, emb_path, "binary")
    outputs = [emb_path]
    if res.params is not None:
        params_path = os.path.join(cfg.out_dir, "refiner.hmrp")
        res.params.save(params_path)
        curve_path = os.path.join(cfg.out_dir, "refine_curve.csv")
        refine.save_curve(res.curve, curve_path)
        outputs += [params_path, curve_path]

    f1, au = _metrics_for(g, cfg, res.e0, labels)
    report = _evaluate.EvalReport(
        dataset=os.path.basename(cfg.edges), strategy=cfg.strategy,
        level=cfg.levels, micro_f1=f1, auroc=au, timings=res.timings,
        config=asdict(cfg))
    report_path = os.path.join(cfg.out_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    outputs.append(report_path)
    write_manifest(cfg.out_dir, "pipeline", cfg,
                   [cfg.edges, cfg.schema, cfg.labels], outputs)
    print(json.dumps(report.to_dict()["timings"], indent=2, sort_keys=True))
    return 0


def cmd_coarsen(args):
    cfg = merge_config(load_config(args.config) if args.config else {},
                       _flag_values(args)).validate()
    if cfg.levels < 1:
        raise ConfigError("coarsen needs levels >= 1")
    os.makedirs(cfg.out_dir, exist_ok=True)
    g = hetgraph.load_graph(cfg.edges, cfg.schema)
    chain = _coarsen.coarsen_chain(g, cfg.coarsen_config())
    for w in chain.warnings:
        log.warning(w)
    _coarsen.save_chain(chain, cfg.out_dir)
    write_manifest(cfg.out_dir, "coarsen", cfg, [cfg.edges, cfg.schema],
                   [os.path.join(cfg.out_dir, "chain.json")])
    sizes = [gr.num_nodes for gr in chain.graphs]
    print(json.dumps({"levels": chain.levels, "node_counts": sizes,
                      "timings_seconds": chain.timings}, indent=2))
    return 0


def cmd_embed(args):
    cfg = merge_config(load_config(args.config) if args.config else {},
                       _flag_values(args)).validate(need_data=False)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if args.chain:
        chain = _coarsen.load_chain(args.chain)
        g = chain.coarsest
        inputs = [os.path.join(args.chain, "chain.json")]
    else:
        if not cfg.edges or not cfg.schema:
            raise ConfigError("embed needs --chain or --edges/--schema")
        g = hetgraph.load_graph(cfg.edges, cfg.schema)
        inputs = [cfg.edges, cfg.schema]
    embedder = get_base_embedder(cfg.embedder, cfg.meta_path_list(),
                                 cfg.walk_config())
    t0 = time.perf_counter()
    em = embedder.embed(g, cfg.d)
    dt = time.perf_counter() - t0
    emb_path = os.path.join(cfg.out_dir, "em.hmeb")
    hetgraph.save_embeddings(em, emb_path, "binary")
    meta = {"nodes": g.num_nodes, "d": cfg.d, "embed_seconds": dt,
            "embedder": cfg.embedder}
    with open(os.path.join(cfg.out_dir, "embed_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    write_manifest(cfg.out_dir, "embed", cfg, inputs, [emb_path])
    print(json.dumps(meta, indent=2, sort_keys=True))
    return 0


def cmd_refine(args):
    cfg = merge_config(load_config(args.config) if args.config else {},
                       _flag_values(args)).validate(need_data=False)
    if not args.chain or not args.embedding:
        raise ConfigError("refine needs --chain and --embedding")
    os.makedirs(cfg.out_dir, exist_ok=True)
    chain = _coarsen.load_chain(args.chain)
    em, _ = hetgraph.load_embeddings(args.embedding, "binary")
    if em.shape[0] != chain.coarsest.num_nodes:
        raise DataError("embedding rows do not match the chain's coarsest graph")
    embedder = None
    base_fn = None
    refine_cfg = cfg.refine_config()
    if refine_cfg.train_pair == "embed":
        embedder = get_base_embedder(cfg.embedder, cfg.meta_path_list(),
                                     cfg.walk_config())
        base_fn = lambda graph: embedder.embed(graph, cfg.d)  # noqa: E731
    t0 = time.perf_counter()
    params, curve = refine.train_refiner(
        chain.coarsest, em.astype(np.float64), refine_cfg,
        cfg.coarsen_config(), base_fn)
    e0 = refine.refine_chain(chain, em.astype(np.float64), params)
    dt = time.perf_counter() - t0
    emb_path = os.path.join(cfg.out_dir, "e0.hmeb")
    hetgraph.save_embeddings(e0.astype(np.float32), emb_path, "binary")
    params_path = os.path.join(cfg.out_dir, "refiner.hmrp")
    params.save(params_path)
    curve_path = os.path.join(cfg.out_dir, "refine_curve.csv")
    refine.save_curve(curve, curve_path)
    write_manifest(cfg.out_dir, "refine", cfg,
                   [args.embedding, os.path.join(args.chain, "chain.json")],
                   [emb_path, params_path, curve_path])
    print(json.dumps({"refine_seconds": dt, "final_loss": curve[-1][1]},
                     indent=2))
    return 0


def cmd_eval(args):
    cfg = merge_config(load_config(args.config) if args.config else {},
                       _flag_values(args)).validate()
    if not args.embedding:
        raise ConfigError("eval needs --embedding")
    os.makedirs(cfg.out_dir, exist_ok=True)
    g = hetgraph.load_graph(cfg.edges, cfg.schema)
    emb, _ = hetgraph.load_embeddings(args.embedding, "binary")
    if emb.shape[0] != g.num_nodes:
        raise DataError("embedding rows do not match graph")
    labels = _evaluate.load_labels(cfg.labels, g) if cfg.labels else None
    f1, au = _metrics_for(g, cfg, emb, labels)
    report = _evaluate.EvalReport(
        dataset=os.path.basename(cfg.edges), strategy=cfg.strategy,
        level=cfg.levels, micro_f1=f1, auroc=au, timings={},
        config=asdict(cfg))
    path = os.path.join(cfg.out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    write_manifest(cfg.out_dir, "eval", cfg,
                   [cfg.edges, cfg.schema, cfg.labels, args.embedding], [path])
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_bench(args):
    cfg = merge_config(load_config(args.config) if args.config else {},
                       _flag_values(args)).validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    g = hetgraph.load_graph(cfg.edges, cfg.schema)
    labels = _evaluate.load_labels(cfg.labels, g) if cfg.labels else None
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    levels = [int(x) for x in args.levels_grid.split(",") if x.strip()]

    def run_pipeline(graph, strategy, level, run_seed):
        import copy

        sub = copy.copy(cfg)
        sub.strategy = strategy
        sub.levels = level
        res = execute_pipeline(graph, sub, seed=run_seed)
        return res.e0, res.timings

    reports = _evaluate.benchmark(
        g, labels, strategies, levels, run_pipeline,
        dataset=os.path.basename(cfg.edges), runs=cfg.runs, seed=cfg.seed,
        lp_holdout=cfg.holdout, do_lp=bool(cfg.link_prediction),
        folds=cfg.folds)
    json_path = os.path.join(cfg.out_dir, "bench.json")
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
    csv_path = os.path.join(cfg.out_dir, "bench.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_evaluate.CSV_COLUMNS)
        for r in reports:
            writer.writerow(_evaluate.report_csv_row(r))
    write_manifest(cfg.out_dir, "bench", cfg,
                   [cfg.edges, cfg.schema, cfg.labels], [json_path, csv_path])
    print(f"wrote {len(reports)} rows to {csv_path}")
    return 0


# -- argparse wiring -------------------------------------------------------------

_CONFIG_FLAGS = [
    ("--edges", str), ("--schema", str), ("--labels", str),
    ("--meta-paths", str), ("--embedder", str), ("--d", int),
    ("--strategy", str), ("--levels", int), ("--lsh-k", int),
    ("--lsh-bands", int), ("--lsh-mode", str), ("--max-group", int),
    ("--walks-per-node", int), ("--walk-length", int), ("--window", int),
    ("--negatives", int), ("--sgns-epochs", int), ("--initial-lr", float),
    ("--type-aware-negatives", int), ("--refine-layers", int),
    ("--refine-epochs", int), ("--refine-lr", float), ("--train-pair", str),
    ("--link-prediction", int), ("--holdout", float), ("--runs", int),
    ("--folds", int), ("--seed", int), ("--threads", int), ("--out-dir", str),
]


def _add_config_flags(p):
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file; flags override its keys")
    for flag, typ in _CONFIG_FLAGS:
        p.add_argument(flag, type=typ, default=None)


def _flag_values(args):
    out = {}
    for flag, _ in _CONFIG_FLAGS:
        key = flag.lstrip("-").replace("-", "_")
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    env_threads = os.environ.get("HETMILE_THREADS")
    if env_threads:
        out["threads"] = int(env_threads)  # env overrides the flag
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hetmile",
        description="Multi-level heterogeneous graph embedding pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="run the full multi-level pipeline")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("coarsen", help="build and store a coarsening chain")
    _add_config_flags(p)
    p.set_defaults(func=cmd_coarsen)

    p = sub.add_parser("embed", help="base-embed a graph or a chain's coarsest")
    _add_config_flags(p)
    p.add_argument("--chain", type=str, default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("refine", help="train refiner and refine up a chain")
    _add_config_flags(p)
    p.add_argument("--chain", type=str, required=True)
    p.add_argument("--embedding", type=str, required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="evaluate saved embeddings")
    _add_config_flags(p)
    p.add_argument("--embedding", type=str, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a strategy x level benchmark grid")
    _add_config_flags(p)
    p.add_argument("--strategies", type=str, default="jacc_max,lsh")
    p.add_argument("--levels-grid", type=str, default="1,2,3")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate a synthetic SBM dataset")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--n-per-type", type=int, required=True)
    p.add_argument("--types", type=int, default=3)
    p.add_argument("--communities", type=int, default=4)
    p.add_argument("--p-in", type=float, default=0.01)
    p.add_argument("--p-out", type=float, default=0.0005)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HetmileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
