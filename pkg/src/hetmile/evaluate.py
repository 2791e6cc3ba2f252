"""Evaluation protocol: node classification under 10-fold cross-validation
with micro-F1, and link prediction AUROC with edge holdout and balanced
type-matched negatives.

The classifier is an in-repo one-vs-rest logistic regression so the metric
is deterministic and dependency-light; AUROC uses the rank statistic with
ties credited 0.5.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import hetgraph
from .errors import DataError
from .rng import derive_seed

log = logging.getLogger("hetmile.evaluate")


@dataclass
class LabelSet:
    """Single-label classes for a subset of nodes (internal ids)."""

    ids: np.ndarray     # internal node ids, int64
    y: np.ndarray       # dense class indexes, int64
    classes: list       # class index -> original label string

    @property
    def num_classes(self):
        return len(self.classes)


def load_labels(path, g):
    """Read `node_id <TAB> label` rows; ids are original ids of g."""
    ids, raw = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{ln}: expected `node_id<TAB>label`")
            ids.append(g.internal_id(int(parts[0])))
            raw.append(parts[1])
    classes = sorted(set(raw))
    lut = {c: i for i, c in enumerate(classes)}
    return LabelSet(np.asarray(ids, dtype=np.int64),
                    np.asarray([lut[r] for r in raw], dtype=np.int64),
                    classes)


def micro_f1(y_true, y_pred, num_classes=None):
    """Micro-averaged F1 = TP / (TP + (FP + FN) / 2) aggregated over classes."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if num_classes is None:
        num_classes = int(max(y_true.max(), y_pred.max())) + 1
    tp = fp = fn = 0
    for c in range(num_classes):
        tp += int(np.sum((y_true == c) & (y_pred == c)))
        fp += int(np.sum((y_true != c) & (y_pred == c)))
        fn += int(np.sum((y_true == c) & (y_pred != c)))
    denom = tp + 0.5 * (fp + fn)
    return tp / denom if denom > 0 else 0.0


def _stratified_folds(y, folds, rng):
    """Per-class shuffled round-robin fold assignment."""
    assign = np.empty(len(y), dtype=np.int64)
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        rng.shuffle(members)
        assign[members] = np.arange(len(members)) % folds
    return assign


def _train_logreg(x, y, num_classes, l2=1e-4, iters=300, lr=0.1):
    n, d = x.shape
    w = np.zeros((num_classes, d))
    b = np.zeros(num_classes)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(iters):
        z = x @ w.T + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        err = p - onehot
        w -= lr * (err.T @ x / n + l2 * w)
        b -= lr * err.mean(axis=0)
    return w, b


def node_classification(emb, labels, folds=10, seed=0):
    """Stratified k-fold one-vs-rest logistic regression on embedding rows.

    Returns (mean, std) of held-out micro-F1 over folds.
    """
    if labels.num_classes < 2:
        raise DataError("node classification needs at least two classes")
    if len(labels.ids) < folds:
        raise DataError(f"need at least {folds} labeled nodes")
    x = np.asarray(emb, dtype=np.float64)[labels.ids]
    y = labels.y
    rng = np.random.default_rng(derive_seed(seed, 0xC1A5))
    assign = _stratified_folds(y, folds, rng)
    scores = []
    for f in range(folds):
        test = assign == f
        if not np.any(test):
            continue
        w, b = _train_logreg(x[~test], y[~test], labels.num_classes)
        pred = np.argmax(x[test] @ w.T + b, axis=1)
        scores.append(micro_f1(y[test], pred, labels.num_classes))
    scores = np.asarray(scores)
    return float(scores.mean()), float(scores.std())


# -- link prediction -----------------------------------------------------------

def _ranks_average_ties(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # 1-based average rank
        i = j + 1
    return ranks


def auroc(pos_scores, neg_scores):
    """Mann-Whitney AUROC; tied scores get 0.5 credit."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("auroc needs both positive and negative scores")
    ranks = _ranks_average_ties(np.concatenate([pos, neg]))
    r_pos = ranks[:len(pos)].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def _all_edges(g):
    """(etype, u, v) with u < v for every undirected edge."""
    out = []
    for etype, rel in g.relations.items():
        src = np.repeat(np.arange(g.num_nodes, dtype=np.int64),
                        np.diff(rel.indptr))
        keep = src < rel.indices
        us, vs = src[keep], rel.indices[keep]
        ws = rel.weights[keep]
        out.append((etype, us, vs, ws))
    return out


def holdout_split(g, holdout, rng):
    """Remove a uniform fraction of edges; returns (residual graph, held-out
    list of (etype, u, v), skipped relation ids emptied by the holdout)."""
    per_rel = _all_edges(g)
    flat = []
    for etype, us, vs, ws in per_rel:
        for i in range(len(us)):
            flat.append((etype, int(us[i]), int(vs[i]), float(ws[i])))
    if len(flat) < 10:
        raise DataError("link prediction needs at least 10 edges")
    k = max(1, int(round(holdout * len(flat))))
    chosen = rng.choice(len(flat), size=k, replace=False)
    mask = np.zeros(len(flat), dtype=bool)
    mask[chosen] = True
    held = [flat[i][:3] for i in np.flatnonzero(mask)]
    edges = {etype: ([], [], []) for etype in g.relations}
    for keep_i in np.flatnonzero(~mask):
        etype, u, v, w = flat[keep_i]
        edges[etype][0].append(u)
        edges[etype][1].append(v)
        edges[etype][2].append(w)
    skipped = []
    for etype in g.relations:
        if g.relations[etype].num_edges > 0 and not edges[etype][0]:
            skipped.append(etype)
            log.warning("holdout removed every %s edge; relation skipped "
                        "in scoring", g.relations[etype].name)
    arrays = {e: (np.asarray(us, np.int64), np.asarray(vs, np.int64),
                  np.asarray(ws, np.float64))
              for e, (us, vs, ws) in edges.items()}
    residual = hetgraph.build_graph(g.registry, g.node_type, arrays,
                                    g.self_weights, g.orig_ids)
    return residual, held, skipped


def sample_negative_edges(g, etype, count, rng, forbid=None):
    """Uniform non-edges of one relation's (src type, dst type) pair,
    verified against the original graph's adjacency."""
    rel = g.relations[etype]
    lo_s, hi_s = g.type_offsets[rel.src_type], g.type_offsets[rel.src_type + 1]
    lo_d, hi_d = g.type_offsets[rel.dst_type], g.type_offsets[rel.dst_type + 1]
    existing = set()
    src = np.repeat(np.arange(g.num_nodes, dtype=np.int64),
                    np.diff(rel.indptr))
    for u, v in zip(src, rel.indices):
        existing.add((min(int(u), int(v)), max(int(u), int(v))))
    if forbid:
        existing |= forbid
    out = []
    attempts = 0
    limit = max(10000, 200 * count)
    while len(out) < count and attempts < limit:
        attempts += 1
        u = int(rng.integers(lo_s, hi_s))
        v = int(rng.integers(lo_d, hi_d))
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        if key in existing:
            continue
        existing.add(key)
        out.append(key)
    if len(out) < count:
        raise DataError(f"could not sample {count} negatives for relation "
                        f"{rel.name!r}")
    return out


def link_prediction(g, embed_fn, holdout=0.10, seed=0, runs=1):
    """AUROC for held-out edges vs an equal number of sampled non-edges.

    embed_fn(residual_graph, run_seed) runs the full embedding pipeline on
    the graph with the holdout removed; pairs are scored by the sigmoid of
    the embedding dot product.
    """
    aucs = []
    for r in range(runs):
        run_seed = seed + r
        rng = np.random.default_rng(derive_seed(run_seed, 0x11E6))
        residual, held, skipped = holdout_split(g, holdout, rng)
        held = [(e, u, v) for (e, u, v) in held if e not in skipped]
        if not held:
            raise DataError("holdout removed all scoreable edges")
        emb = np.asarray(embed_fn(residual, run_seed), dtype=np.float64)
        pos_scores, neg_scores = [], []
        by_rel = {}
        for e, u, v in held:
            by_rel.setdefault(e, []).append((u, v))
        for e, pairs in sorted(by_rel.items()):
            negs = sample_negative_edges(g, e, len(pairs), rng)
            for u, v in pairs:
                pos_scores.append(float(emb[u] @ emb[v]))
            for u, v in negs:
                neg_scores.append(float(emb[u] @ emb[v]))
        pos = 1.0 / (1.0 + np.exp(-np.clip(pos_scores, -500, 500)))
        neg = 1.0 / (1.0 + np.exp(-np.clip(neg_scores, -500, 500)))
        aucs.append(auroc(pos, neg))
    aucs = np.asarray(aucs)
    return float(aucs.mean()), float(aucs.std())


# -- benchmark grid ------------------------------------------------------------

@dataclass
class EvalReport:
    dataset: str
    strategy: str
    level: int
    micro_f1: dict = None   # {"mean": .., "std": ..} or None
    auroc: dict = None
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "strategy": self.strategy,
            "level": self.level,
            "micro_f1": self.micro_f1,
            "auroc": self.auroc,
            "timings": self.timings,
            "config": self.config,
        }


CSV_COLUMNS = ["dataset", "strategy", "level", "micro_f1_mean", "micro_f1_std",
               "auroc_mean", "auroc_std", "coarsen_seconds", "embed_seconds",
               "refine_seconds", "total_seconds"]


def report_csv_row(rep):
    t = rep.timings
    f1 = rep.micro_f1 or {}
    au = rep.auroc or {}
    return [rep.dataset, rep.strategy, rep.level,
            f1.get("mean"), f1.get("std"), au.get("mean"), au.get("std"),
            t.get("coarsen_seconds"), t.get("embed_seconds"),
            t.get("refine_seconds"), t.get("total_seconds")]


def benchmark(g, labels, strategies, levels, run_pipeline, dataset="dataset",
              runs=1, seed=0, lp_holdout=0.10, do_lp=False, folds=10):
    """Run the pipeline over a (strategy x level) grid and collect metrics.

    run_pipeline(graph, strategy, level, run_seed) must return
    (embedding matrix, stage timing dict). Cells run sequentially so stage
    timings do not contend.
    """
    reports = []
    for strategy in strategies:
        for level in levels:
            f1s, aucs = [], []
            timings = {}
            for r in range(runs):
                emb, t = run_pipeline(g, strategy, level, seed + r)
                if r == 0:
                    timings = t
                if labels is not None:
                    mean, _ = node_classification(emb, labels, folds=folds,
                                                  seed=seed + r)
                    f1s.append(mean)
            if do_lp:
                def lp_embed(residual, run_seed,
                             _s=strategy, _lv=level):
                    return run_pipeline(residual, _s, _lv, run_seed)[0]
                mean, std = link_prediction(g, lp_embed, holdout=lp_holdout,
                                            seed=seed, runs=runs)
                aucs = [mean]
                auc_entry = {"mean": mean, "std": std}
            else:
                auc_entry = None
            rep = EvalReport(
                dataset=dataset, strategy=strategy, level=level,
                micro_f1=({"mean": float(np.mean(f1s)),
                           "std": float(np.std(f1s))} if f1s else None),
                auroc=auc_entry,
                timings=timings,
                config={"runs": runs, "seed": seed},
            )
            reports.append(rep)
    return reports
