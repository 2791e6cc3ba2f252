"""Base embedding on the coarsest graph: meta-path random walks feeding a
skip-gram model with negative sampling.

Walks are driven by stateless per-walk random streams keyed on
(seed, start node, walk index), so the corpus is bit-identical no matter
how walk generation is scheduled. Training runs single-threaded and is
bit-reproducible for a fixed seed.
"""

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConfigError, DataError
from .rng import splitmix64, mix2, u01, derive_seed

_GAMMA = np.uint64(0x9E3779B97F4A7C15)


class MetaPath:
    """Cyclic node-type sequence guiding walks (first type == last type)."""

    def __init__(self, type_ids, names=None):
        self.types = list(type_ids)
        self.names = names
        if len(self.types) < 3:
            raise ConfigError("meta-path must have length >= 3")
        if self.types[0] != self.types[-1]:
            raise ConfigError("meta-path must be cyclic (first type == last)")

    @classmethod
    def from_names(cls, registry, text):
        names = text.split("-")
        return cls([registry.node_type_id(n) for n in names], names)

    def validate(self, g):
        present = set(np.unique(g.node_type).tolist())
        for t in self.types:
            if t not in present or g.type_count(t) == 0:
                raise DataError(
                    f"meta-path type {g.registry.node_types[t]!r} has no "
                    f"nodes in this graph")
        pairs = set()
        for _, st, dt in g.registry.edge_types:
            pairs.add((st, dt))
            pairs.add((dt, st))
        for a, b in zip(self.types, self.types[1:]):
            if (a, b) not in pairs:
                raise ConfigError(
                    f"meta-path step {g.registry.node_types[a]}-"
                    f"{g.registry.node_types[b]} matches no declared relation")

    def __repr__(self):
        if self.names:
            return "-".join(self.names)
        return "-".join(str(t) for t in self.types)


@dataclass
class WalkConfig:
    walks_per_node: int = 10
    walk_length: int = 80
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    initial_lr: float = 0.025
    type_aware_negatives: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("walks_per_node", "walk_length", "window", "negatives",
                     "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")


# -- typed adjacency for walking ----------------------------------------------

def _typed_adjacency(g):
    """Per target type: CSR of (neighbor, row-local cumulative weight).

    Neighbors reachable through several relations have their weights summed,
    matching HeteroGraph.neighbors(). Self-loop weights are excluded: walks
    never traverse self-loops.
    """
    n = g.num_nodes
    num_types = g.registry.num_node_types
    srcs, dsts, ws = [], [], []
    for rel in g.relations.values():
        if len(rel.indices):
            srcs.append(np.repeat(np.arange(n, dtype=np.int64),
                                  np.diff(rel.indptr)))
            dsts.append(rel.indices)
            ws.append(rel.weights)
    indptr2d = np.zeros((num_types, n + 1), dtype=np.int64)
    if not srcs:
        return (indptr2d, np.zeros(num_types + 1, dtype=np.int64),
                np.empty(0, np.int64), np.empty(0, np.float64))
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    w = np.concatenate(ws)
    key = src * np.int64(n) + dst
    uniq, inv = np.unique(key, return_inverse=True)
    wacc = np.zeros(len(uniq), dtype=np.float64)
    np.add.at(wacc, inv, w)
    src = (uniq // n).astype(np.int64)
    dst = (uniq % n).astype(np.int64)

    seg_off = np.zeros(num_types + 1, dtype=np.int64)
    idx_parts, cum_parts = [], []
    pos = 0
    for t in range(num_types):
        mask = g.node_type[dst] == t
        s_t, d_t, w_t = src[mask], dst[mask], wacc[mask]
        counts = np.bincount(s_t, minlength=n)
        indptr2d[t, 1:] = np.cumsum(counts)
        idx_parts.append(d_t)
        cw = np.cumsum(w_t)
        if len(cw):
            # make the cumulative weights restart at each row
            starts = indptr2d[t, :-1]
            prior = np.where(starts > 0, cw[starts - 1], 0.0)
            cw = cw - np.repeat(prior, counts)
        cum_parts.append(cw)
        pos += len(d_t)
        seg_off[t + 1] = pos
    idx_flat = np.concatenate(idx_parts) if idx_parts else np.empty(0, np.int64)
    cum_flat = np.concatenate(cum_parts) if cum_parts else np.empty(0, np.float64)
    return indptr2d, seg_off, idx_flat, cum_flat


@numba.njit(cache=True)
def _walk_kernel(starts, walks_per_node, walk_length, next_type, indptr2d,
                 seg_off, idx_flat, cum_flat, seed):
    period = len(next_type)
    num_walks = len(starts) * walks_per_node
    walks = np.full((num_walks, walk_length), -1, np.int32)
    lengths = np.empty(num_walks, np.int64)
    for wi in range(num_walks):
        si = wi // walks_per_node
        widx = wi % walks_per_node
        u = starts[si]
        key = mix2(mix2(seed, np.uint64(u)), np.uint64(widx))
        walks[wi, 0] = u
        ln = 1
        for step in range(1, walk_length):
            t = next_type[(step - 1) % period]
            base = indptr2d[t, u]
            end = indptr2d[t, u + 1]
            if end == base:
                break
            lo = seg_off[t] + base
            hi = seg_off[t] + end
            total = cum_flat[hi - 1]
            if total <= 0.0:
                break
            r = u01(splitmix64(key + np.uint64(step) * _GAMMA)) * total
            a, b = lo, hi - 1
            while a < b:
                mid = (a + b) // 2
                if cum_flat[mid] > r:
                    b = mid
                else:
                    a = mid + 1
            u = idx_flat[a]
            walks[wi, step] = u
            ln += 1
        lengths[wi] = ln
    return walks, lengths


def generate_walks(g, mp, cfg):
    """Meta-path-guided random walks from every node of the path's head type.

    Each step picks a neighbor of the next type in the (cycling) meta-path
    with probability proportional to edge weight; a walk truncates early when
    no such neighbor exists. Per-walk streams keyed on (seed, node, walk
    index) make the output independent of scheduling.
    """
    mp.validate(g)
    if cfg.walk_length < len(mp.types):
        raise ConfigError("walk_length must be >= meta-path length")
    starts = g.nodes_of_type(mp.types[0])
    next_type = np.array(mp.types[1:], dtype=np.int64)  # cycles with period L-1
    indptr2d, seg_off, idx_flat, cum_flat = _typed_adjacency(g)
    walks, lengths = _walk_kernel(
        starts, cfg.walks_per_node, cfg.walk_length, next_type, indptr2d,
        seg_off, idx_flat, cum_flat,
        np.uint64(cfg.seed & 0xFFFFFFFFFFFFFFFF))
    return [walks[i, :lengths[i]] for i in range(len(lengths))]


def save_walks(walks, path):
    """Spill a walk corpus to disk, one space-separated walk per line."""
    with open(path, "w") as fh:
        for w in walks:
            fh.write(" ".join(str(int(x)) for x in w))
            fh.write("\n")


# -- skip-gram with negative sampling -----------------------------------------

def sgns_pair_loss(u, v_pos, v_negs):
    """Loss of one (center, context) pair: -log sig(u.v) - sum log sig(-u.vn)."""
    def logsig(x):
        return -math.log1p(math.exp(-x)) if x > 0 else x - math.log1p(math.exp(x))

    loss = -logsig(float(np.dot(u, v_pos)))
    for vn in v_negs:
        loss -= logsig(-float(np.dot(u, vn)))
    return loss


def sgns_pair_grads(u, v_pos, v_negs):
    """Analytic gradients of sgns_pair_loss w.r.t. u, v_pos and each negative."""
    def sig(x):
        return 1.0 / (1.0 + math.exp(-x)) if x > 0 else \
            math.exp(x) / (1.0 + math.exp(x))

    gu = (sig(np.dot(u, v_pos)) - 1.0) * v_pos
    gv = (sig(np.dot(u, v_pos)) - 1.0) * u
    gn = []
    for vn in v_negs:
        s = sig(np.dot(u, vn))
        gu = gu + s * vn
        gn.append(s * u)
    return gu, gv, gn


@numba.njit(cache=True)
def _count_pairs(lengths, window):
    total = np.int64(0)
    prefix = np.zeros(len(lengths) + 1, np.int64)
    for w in range(len(lengths)):
        L = lengths[w]
        cnt = np.int64(0)
        for i in range(L):
            lo = i - window if i - window > 0 else 0
            hi = i + window if i + window < L - 1 else L - 1
            cnt += hi - lo
        total += cnt
        prefix[w + 1] = total
    return prefix, total


@numba.njit(cache=True, fastmath=True)
def _sgns_train(flat, offsets, in_emb, out_emb, window, negatives, node_seg,
                seg_off, noise_prob, noise_alias, lr0, lr_floor, epochs, seed,
                pair_prefix, total_pairs):
    nw = len(offsets) - 1
    d = in_emb.shape[1]
    neu = np.empty(d, np.float32)
    grand_total = float(epochs) * float(total_pairs)
    for ep in range(epochs):
        for w in range(nw):
            s, e = offsets[w], offsets[w + 1]
            L = e - s
            key = mix2(mix2(seed, np.uint64(ep)), np.uint64(w))
            ctr = np.uint64(0)
            done = np.int64(ep) * total_pairs + pair_prefix[w]
            for i in range(L):
                center = flat[s + i]
                in_row = in_emb[center]
                lo = i - window if i - window > 0 else 0
                hi = i + window if i + window < L - 1 else L - 1
                for jj in range(lo, hi + 1):
                    if jj == i:
                        continue
                    ctx = flat[s + jj]
                    lr = lr0 * (1.0 - done / grand_total)
                    if lr < lr_floor:
                        lr = lr_floor
                    done += 1
                    for c in range(d):
                        neu[c] = np.float32(0.0)
                    for neg in range(negatives + 1):
                        if neg == 0:
                            target = np.int64(ctx)
                            label = 1.0
                        else:
                            ctr += np.uint64(1)
                            x = splitmix64(key + ctr * _GAMMA)
                            sg = node_seg[ctx]
                            a = seg_off[sg]
                            size = seg_off[sg + 1] - a
                            idx = a + np.int64(u01(x) * size)
                            if idx >= a + size:
                                idx = a + size - 1
                            ctr += np.uint64(1)
                            coin = u01(splitmix64(key + ctr * _GAMMA))
                            if coin < noise_prob[idx]:
                                target = idx
                            else:
                                target = noise_alias[idx]
                            if target == ctx:
                                continue
                            label = 0.0
                        out_row = out_emb[target]
                        f32 = np.float32(0.0)
                        for c in range(d):
                            f32 += in_row[c] * out_row[c]
                        f = min(max(float(f32), -30.0), 30.0)
                        if f > 0.0:
                            sg_f = 1.0 / (1.0 + math.exp(-f))
                        else:
                            ex = math.exp(f)
                            sg_f = ex / (1.0 + ex)
                        gcoef = np.float32((label - sg_f) * lr)
                        for c in range(d):
                            neu[c] += gcoef * out_row[c]
                        for c in range(d):
                            out_row[c] += gcoef * in_row[c]
                    for c in range(d):
                        in_row[c] += neu[c]


def _build_alias(weights):
    """Vose alias table for O(1) weighted sampling; returns (prob, alias)."""
    n = len(weights)
    prob = np.zeros(n, dtype=np.float64)
    alias = np.arange(n, dtype=np.int64)
    total = weights.sum()
    if total <= 0 or n == 0:
        return prob, alias
    scaled = weights * (n / total)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        l = large.pop()
        prob[s] = scaled[s]
        alias[s] = l
        scaled[l] = (scaled[l] + scaled[s]) - 1.0
        if scaled[l] < 1.0:
            small.append(l)
        else:
            large.append(l)
    for i in large:
        prob[i] = 1.0
    for i in small:
        prob[i] = 1.0
    return prob, alias


def _noise_tables(counts, node_type, type_offsets, type_aware):
    """Per-segment alias tables over the unigram^0.75 distribution, one
    segment per node type (or one global segment when type-aware sampling
    is off)."""
    n = len(counts)
    weights = counts.astype(np.float64) ** 0.75
    if type_aware:
        node_seg = node_type.astype(np.int64)
        seg_off = type_offsets.astype(np.int64)
    else:
        node_seg = np.zeros(n, dtype=np.int64)
        seg_off = np.array([0, n], dtype=np.int64)
    prob = np.zeros(n, dtype=np.float64)
    alias = np.zeros(n, dtype=np.int64)
    for si in range(len(seg_off) - 1):
        a, b = seg_off[si], seg_off[si + 1]
        p, al = _build_alias(weights[a:b])
        prob[a:b] = p
        alias[a:b] = al + a
    return node_seg, seg_off, prob, alias


def init_embedding(n, d, seed):
    """Deterministic seeded initializer, word2vec-style uniform in +-0.5/d."""
    rng = np.random.default_rng(derive_seed(seed, 0xE11B))
    return ((rng.random((n, d)) - 0.5) / d).astype(np.float32)


def train_skipgram(walks, g, d, cfg):
    """Skip-gram with negative sampling over a walk corpus.

    Negatives are drawn from a unigram^0.75 distribution over walk
    occurrences, restricted to the context node's type when
    cfg.type_aware_negatives. The learning rate decays linearly to
    initial_lr * 1e-4. Returns (input-side vectors float32, occurrence
    counts). Single-threaded and bit-reproducible per seed.
    """
    if d < 1:
        raise ConfigError("embedding dimension must be >= 1")
    if not walks:
        raise DataError("empty walk set")
    flat = np.concatenate([np.asarray(w, dtype=np.int32) for w in walks])
    lengths = np.array([len(w) for w in walks], dtype=np.int64)
    offsets = np.zeros(len(walks) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])

    counts = np.bincount(flat, minlength=g.num_nodes)
    if cfg.type_aware_negatives:
        # a context type with occurrences always has table mass; assert anyway
        occupied = np.unique(g.node_type[flat])
        for t in occupied.tolist():
            a, b = g.type_offsets[t], g.type_offsets[t + 1]
            if counts[a:b].sum() == 0:
                raise DataError("empty negative table for a visited type")
    node_seg, seg_off, noise_prob, noise_alias = _noise_tables(
        counts, g.node_type, g.type_offsets, cfg.type_aware_negatives)

    pair_prefix, total_pairs = _count_pairs(lengths, cfg.window)
    if total_pairs == 0:
        raise DataError("walk corpus yields no training pairs")
    in_emb = init_embedding(g.num_nodes, d, cfg.seed)
    out_emb = np.zeros((g.num_nodes, d), dtype=np.float32)
    _sgns_train(flat, offsets, in_emb, out_emb, cfg.window, cfg.negatives,
                node_seg, seg_off, noise_prob, noise_alias,
                float(cfg.initial_lr), float(cfg.initial_lr) * 1e-4,
                cfg.epochs, np.uint64(derive_seed(cfg.seed, 0x5665)),
                pair_prefix, total_pairs)
    if not np.all(np.isfinite(in_emb)):
        raise DataError("non-finite values in trained embedding")
    return in_emb, counts


@dataclass
class BaseEmbedResult:
    embedding: np.ndarray  # float32, rows = g.num_nodes
    unvisited: np.ndarray  # node ids never touched by any walk
    n_walks: int = 0
    n_tokens: int = 0


def base_embed(g, meta_paths, d, cfg):
    """Walk every meta-path, pool the corpora, train one skip-gram model.

    Rows of nodes never visited keep their seeded initialization and are
    reported in the result's `unvisited` field.
    """
    if not meta_paths:
        raise ConfigError("at least one meta-path is required")
    corpus = []
    for k, mp in enumerate(meta_paths):
        sub_cfg = WalkConfig(**{**cfg.__dict__,
                                "seed": derive_seed(cfg.seed, 0x3A1C, k)})
        corpus.extend(generate_walks(g, mp, sub_cfg))
    emb, counts = train_skipgram(corpus, g, d, cfg)
    unvisited = np.flatnonzero(counts == 0).astype(np.int64)
    return BaseEmbedResult(emb, unvisited, len(corpus),
                           int(sum(len(w) for w in corpus)))


class BaseEmbedder:
    """Pluggable base-embedding interface: embed(g, d) -> float32 matrix."""

    name = "abstract"

    def embed(self, g, d):
        raise NotImplementedError


class MetapathSkipgramEmbedder(BaseEmbedder):
    name = "metapath2vec"

    def __init__(self, meta_path_specs, walk_cfg):
        self.meta_path_specs = list(meta_path_specs)
        self.walk_cfg = walk_cfg

    def embed(self, g, d):
        paths = [MetaPath.from_names(g.registry, s)
                 for s in self.meta_path_specs]
        return base_embed(g, paths, d, self.walk_cfg).embedding


BASE_EMBEDDERS = {"metapath2vec": MetapathSkipgramEmbedder}


def get_base_embedder(name, meta_path_specs, walk_cfg):
    try:
        cls = BASE_EMBEDDERS[name]
    except KeyError:
        raise ConfigError(f"unknown base embedder {name!r}; "
                          f"available: {sorted(BASE_EMBEDDERS)}") from None
    return cls(meta_path_specs, walk_cfg)
