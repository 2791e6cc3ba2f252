"""Graph coarsening: matching strategies and supernode graph construction.

Three matchers are provided. The exact ones score candidate pairs with
Jaccard similarity over combined 1-hop/2-hop neighborhoods (greedy max,
or weighted random sampling proportional to similarity); the approximate
one buckets minhash signatures with LSH banding and pairs bucket members.
All matchers visit nodes in descending total degree (ties by ascending id)
and only merge nodes of the same type.
"""

import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numba
import numpy as np
from scipy import sparse

from .errors import ConfigError, DataError
from .hetgraph import HeteroGraph, Relation
from .rng import splitmix64, u01, derive_seed

MATCH_MAGIC = b"HMMM"
MATCH_VERSION = 1

# 61-bit Mersenne prime for the minhash universal hash family
MINHASH_PRIME = (1 << 61) - 1
_P = np.uint64(MINHASH_PRIME)
_MASK29 = np.uint64((1 << 29) - 1)
_MASK32 = np.uint64(0xFFFFFFFF)
SENTINEL = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)


@dataclass
class MatchingMatrix:
    """Fine node -> supernode assignment (a sparse 0/1 matrix in disguise)."""

    fine_count: int
    coarse_count: int
    assignment: np.ndarray  # int64, len == fine_count

    def groups(self):
        """Supernode id -> list of fine member ids."""
        out = [[] for _ in range(self.coarse_count)]
        for u, s in enumerate(self.assignment):
            out[s].append(u)
        return out

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(MATCH_MAGIC)
            fh.write(struct.pack("<IQQ", MATCH_VERSION, self.fine_count,
                                 self.coarse_count))
            fh.write(self.assignment.astype("<u4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            head = fh.read(4 + 4 + 16)
            if len(head) < 24 or head[:4] != MATCH_MAGIC:
                raise DataError(f"{path}: not a matching blob")
            version, fine, coarse = struct.unpack("<IQQ", head[4:])
            if version != MATCH_VERSION:
                raise DataError(f"{path}: unsupported matching version {version}")
            data = np.frombuffer(fh.read(), dtype="<u4")
            if data.size != fine:
                raise DataError(f"{path}: truncated matching blob")
            return cls(int(fine), int(coarse), data.astype(np.int64))


@dataclass
class CoarsenConfig:
    strategy: str = "jacc_max"  # jacc_max | jacc_wrs | lsh
    levels: int = 1
    lsh_k: int = 128
    lsh_bands: int = 0  # 0 -> default banding for k
    lsh_mode: str = "banded"  # banded | full_signature
    max_group: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("jacc_max", "jacc_wrs", "lsh"):
            raise ConfigError(f"unknown coarsening strategy {self.strategy!r}")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.max_group < 2:
            raise ConfigError("max_group must be >= 2")
        if self.lsh_k < 1:
            raise ConfigError("lsh_k must be >= 1")
        if self.lsh_mode not in ("banded", "full_signature"):
            raise ConfigError(f"unknown lsh_mode {self.lsh_mode!r}")
        if self.lsh_mode == "banded":
            if self.lsh_bands == 0:
                self.lsh_bands = 32 if self.lsh_k % 32 == 0 else 1
            if self.lsh_k % self.lsh_bands != 0:
                raise ConfigError("lsh_bands must divide lsh_k")


@dataclass
class CoarsenChain:
    graphs: list
    matchings: list
    timings: list = field(default_factory=list)  # seconds per level
    warnings: list = field(default_factory=list)
    config: CoarsenConfig = None

    @property
    def levels(self):
        return len(self.matchings)

    @property
    def coarsest(self):
        return self.graphs[-1]


# -- combined 1/2-hop neighborhoods ------------------------------------------

def _merged_adjacency(g):
    """Union CSR over all relations, ids only, deduplicated and sorted."""
    n = g.num_nodes
    srcs, dsts = [], []
    for rel in g.relations.values():
        if len(rel.indices):
            srcs.append(np.repeat(np.arange(n, dtype=np.int64),
                                  np.diff(rel.indptr)))
            dsts.append(rel.indices)
    indptr = np.zeros(n + 1, dtype=np.int64)
    if not srcs:
        return indptr, np.empty(0, dtype=np.int64)
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    key = np.unique(src * np.int64(n) + dst)
    src = key // n
    dst = key % n
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst


@numba.njit(cache=True)
def _two_hop_all(indptr, indices):
    n = len(indptr) - 1
    sizes = np.zeros(n, np.int64)
    cap = 0
    maxsz = 0
    for u in range(n):
        sz = indptr[u + 1] - indptr[u]
        for j in range(indptr[u], indptr[u + 1]):
            v = indices[j]
            sz += indptr[v + 1] - indptr[v]
        sizes[u] = sz
        cap += sz
        if sz > maxsz:
            maxsz = sz
    out_indptr = np.zeros(n + 1, np.int64)
    out = np.empty(cap, np.int64)
    scratch = np.empty(max(maxsz, 1), np.int64)
    pos = 0
    for u in range(n):
        c = 0
        for j in range(indptr[u], indptr[u + 1]):
            v = indices[j]
            scratch[c] = v
            c += 1
            for jj in range(indptr[v], indptr[v + 1]):
                scratch[c] = indices[jj]
                c += 1
        if c:
            sub = np.sort(scratch[:c])
            prev = np.int64(-1)
            for t in range(c):
                x = sub[t]
                if x != u and x != prev:
                    out[pos] = x
                    pos += 1
                    prev = x
        out_indptr[u + 1] = pos
    return out_indptr, out[:pos].copy()


def two_hop_csr(g):
    """CSR of N_(u) = 1-hop union 2-hop neighbors (u excluded), cached on g."""
    cached = getattr(g, "_n2_cache", None)
    if cached is None:
        indptr, indices = _merged_adjacency(g)
        cached = _two_hop_all(indptr, indices)
        g._n2_cache = cached
    return cached


def jaccard(g, u, v):
    """Exact Jaccard similarity of N_(u) and N_(v); 0 when both are empty."""
    nu = g.two_hop_neighborhood(u)
    nv = g.two_hop_neighborhood(v)
    union = len(nu | nv)
    if union == 0:
        return 0.0
    return len(nu & nv) / union


def visitation_order(g):
    """Descending total degree, ties broken by ascending node id."""
    return np.lexsort((np.arange(g.num_nodes), -g.degree))


# -- exact matchers ----------------------------------------------------------

@numba.njit(numba.int64(numba.int64[:], numba.int64, numba.int64,
                        numba.int64, numba.int64), cache=True)
def _isect_size(idx, sa, ea, sb, eb):
    i, j, c = sa, sb, 0
    while i < ea and j < eb:
        x, y = idx[i], idx[j]
        if x == y:
            c += 1
            i += 1
            j += 1
        elif x < y:
            i += 1
        else:
            j += 1
    return c


@numba.njit(cache=True)
def _match_jacc_max(n2_indptr, n2_idx, node_type, order):
    n = len(order)
    matched = np.zeros(n, np.bool_)
    partner = np.full(n, -1, np.int64)
    for oi in range(n):
        u = order[oi]
        if matched[u]:
            continue
        su, eu = n2_indptr[u], n2_indptr[u + 1]
        lu = eu - su
        best = np.int64(-1)
        best_j = -1.0
        for j in range(su, eu):
            v = n2_idx[j]
            if matched[v] or node_type[v] != node_type[u]:
                continue
            sv, ev = n2_indptr[v], n2_indptr[v + 1]
            isect = _isect_size(n2_idx, su, eu, sv, ev)
            denom = lu + (ev - sv) - isect
            jac = isect / denom if denom > 0 else 0.0
            if jac > best_j:
                best_j = jac
                best = v
        if best >= 0:
            matched[u] = True
            matched[best] = True
            partner[u] = best
            partner[best] = u
    return partner


@numba.njit(cache=True)
def _match_jacc_wrs(n2_indptr, n2_idx, node_type, order, seed):
    n = len(order)
    matched = np.zeros(n, np.bool_)
    partner = np.full(n, -1, np.int64)
    cand = np.empty(n, np.int64)
    jacc = np.empty(n, np.float64)
    ctr = np.uint64(0)
    for oi in range(n):
        u = order[oi]
        if matched[u]:
            continue
        su, eu = n2_indptr[u], n2_indptr[u + 1]
        lu = eu - su
        nc = 0
        total = 0.0
        for j in range(su, eu):
            v = n2_idx[j]
            if matched[v] or node_type[v] != node_type[u]:
                continue
            sv, ev = n2_indptr[v], n2_indptr[v + 1]
            isect = _isect_size(n2_idx, su, eu, sv, ev)
            denom = lu + (ev - sv) - isect
            jac = isect / denom if denom > 0 else 0.0
            if jac > 0.0:
                cand[nc] = v
                jacc[nc] = jac
                nc += 1
                total += jac
        if nc == 0 or total <= 0.0:
            continue
        ctr += np.uint64(1)
        r = u01(splitmix64(seed + ctr * _GAMMA)) * total
        acc = 0.0
        pick = cand[nc - 1]
        for c in range(nc):
            acc += jacc[c]
            if r < acc:
                pick = cand[c]
                break
        matched[u] = True
        matched[pick] = True
        partner[u] = pick
        partner[pick] = u
    return partner


def _partner_to_matching(g, partner):
    n = g.num_nodes
    ids = np.arange(n, dtype=np.int64)
    leader = np.where(partner >= 0, np.minimum(ids, partner), ids)
    return _leader_to_matching(g, leader)


def _leader_to_matching(g, leader):
    """Assign supernode ids grouped by type, ordered by smallest member id."""
    n = g.num_nodes
    leaders, inv = np.unique(leader, return_inverse=True)
    c = len(leaders)
    min_id = np.full(c, n, dtype=np.int64)
    np.minimum.at(min_id, inv, np.arange(n, dtype=np.int64))
    gtype = g.node_type[leaders]
    order = np.lexsort((min_id, gtype))
    rank = np.empty(c, dtype=np.int64)
    rank[order] = np.arange(c, dtype=np.int64)
    return MatchingMatrix(n, c, rank[inv])


def match_jaccard_max(g, seed=0):
    """Greedy maximum-Jaccard matching; deterministic, seed kept for symmetry."""
    n2_indptr, n2_idx = two_hop_csr(g)
    order = visitation_order(g)
    partner = _match_jacc_max(n2_indptr, n2_idx, g.node_type, order)
    return _partner_to_matching(g, partner)


def match_jaccard_wrs(g, seed=0):
    """Matching by weighted random sampling, partner chosen with probability
    J(u,v) / sum of J over eligible candidates; zero-similarity candidates are
    excluded and a node with only those stays a singleton."""
    n2_indptr, n2_idx = two_hop_csr(g)
    order = visitation_order(g)
    partner = _match_jacc_wrs(n2_indptr, n2_idx, g.node_type, order,
                              np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return _partner_to_matching(g, partner)


# -- minhash / LSH -----------------------------------------------------------

@numba.njit(numba.uint64(numba.uint64, numba.uint64, numba.uint64),
            cache=True, inline="always")
def _hash_mod_p(a, b, x):
    # (a*x + b) mod (2^61 - 1) for x < 2^32; products kept inside uint64
    a_hi = a >> np.uint64(32)
    a_lo = a & _MASK32
    lo = a_lo * x
    lo = (lo >> np.uint64(61)) + (lo & _P)
    if lo >= _P:
        lo -= _P
    hi = a_hi * x  # < 2^61; hi * 2^32 mod p via 2^61 == 1 (mod p)
    t = (hi >> np.uint64(29)) + ((hi & _MASK29) << np.uint64(32))
    t = (t >> np.uint64(61)) + (t & _P)
    if t >= _P:
        t -= _P
    v = lo + t + b
    v = (v >> np.uint64(61)) + (v & _P)
    if v >= _P:
        v -= _P
    return v


@numba.njit(cache=True)
def _signatures_all(n2_indptr, n2_idx, a_params, b_params):
    n = len(n2_indptr) - 1
    k = len(a_params)
    sig = np.empty((n, k), np.uint64)
    for u in range(n):
        s, e = n2_indptr[u], n2_indptr[u + 1]
        if e == s:
            for i in range(k):
                sig[u, i] = SENTINEL
            continue
        for i in range(k):
            a = a_params[i]
            b = b_params[i]
            best = _P
            for j in range(s, e):
                h = _hash_mod_p(a, b, np.uint64(n2_idx[j]))
                if h < best:
                    best = h
            sig[u, i] = best
    return sig


def _hash_params(k, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(1, MINHASH_PRIME, size=k, dtype=np.uint64)
    b = rng.integers(0, MINHASH_PRIME, size=k, dtype=np.uint64)
    return a, b


def minhash_signature(neighborhood, k, seed=0):
    """k minhash values of a set of node ids under seeded universal hashes.

    An empty set maps to the all-sentinel signature, which can never equal
    the signature of a non-empty set.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    ids = np.fromiter(neighborhood, dtype=np.int64,
                      count=len(neighborhood)) if neighborhood else \
        np.empty(0, dtype=np.int64)
    a, b = _hash_params(k, seed)
    indptr = np.array([0, len(ids)], dtype=np.int64)
    return _signatures_all(indptr, ids, a, b)[0]


@numba.njit(cache=True)
def _pair_in_runs(sorted_nodes, run_starts, matched, leader, max_group):
    for ri in range(len(run_starts) - 1):
        s, e = run_starts[ri], run_starts[ri + 1]
        if e - s < 2:
            continue
        i = s
        while i < e:
            u = sorted_nodes[i]
            if matched[u]:
                i += 1
                continue
            cnt = 1
            j = i + 1
            while j < e and cnt < max_group:
                v = sorted_nodes[j]
                if not matched[v]:
                    if cnt == 1:
                        matched[u] = True
                        leader[u] = u
                    matched[v] = True
                    leader[v] = u
                    cnt += 1
                j += 1
            i += 1


def match_lsh(g, cfg, seed=None):
    """LSH matching: bucket nodes by (type, band of the minhash signature),
    then greedily group bucket members in visitation order, one pass over
    all bands. Bucket membership requires exact band equality."""
    if seed is None:
        seed = cfg.seed
    n = g.num_nodes
    n2_indptr, n2_idx = two_hop_csr(g)
    a, b = _hash_params(cfg.lsh_k, seed)
    sig = _signatures_all(n2_indptr, n2_idx, a, b)

    if cfg.lsh_mode == "full_signature":
        bands = [(0, cfg.lsh_k)]
    else:
        r = cfg.lsh_k // cfg.lsh_bands
        bands = [(i * r, (i + 1) * r) for i in range(cfg.lsh_bands)]

    order = visitation_order(g)
    visit_rank = np.empty(n, dtype=np.int64)
    visit_rank[order] = np.arange(n, dtype=np.int64)

    matched = np.zeros(n, dtype=np.bool_)
    leader = np.full(n, -1, dtype=np.int64)
    typecol = g.node_type.astype(np.uint64).reshape(-1, 1)
    for lo, hi in bands:
        block = np.ascontiguousarray(
            np.hstack([typecol, sig[:, lo:hi]]))
        keys = block.view([("", np.uint64)] * block.shape[1]).ravel()
        _, bucket = np.unique(keys, return_inverse=True)
        ordered = np.lexsort((visit_rank, bucket))
        bseq = bucket[ordered]
        starts = np.flatnonzero(np.r_[True, bseq[1:] != bseq[:-1]])
        run_starts = np.append(starts, n).astype(np.int64)
        _pair_in_runs(ordered.astype(np.int64), run_starts, matched, leader,
                      cfg.max_group)
    ids = np.arange(n, dtype=np.int64)
    leader = np.where(leader < 0, ids, leader)
    return _leader_to_matching(g, leader)


# -- coarse graph construction ----------------------------------------------

def build_coarse_graph(g, m):
    """Collapse matched groups into supernodes, summing edge weights.

    Weights between two merged endpoints accumulate into the supernode's
    self weight, so total weight (edges + self) is conserved exactly.
    """
    if m.fine_count != g.num_nodes:
        raise DataError("matching does not cover this graph")
    a = m.assignment
    c = m.coarse_count
    node_type = np.zeros(c, dtype=np.int32)
    node_type[a] = g.node_type
    self_w = np.bincount(a, weights=g.self_weights, minlength=c)

    relations = {}
    for etype, rel in g.relations.items():
        if len(rel.indices) == 0:
            indptr = np.zeros(c + 1, dtype=np.int64)
            relations[etype] = Relation(etype, rel.name, rel.src_type,
                                        rel.dst_type, indptr,
                                        np.empty(0, np.int64),
                                        np.empty(0, np.float64), 0)
            continue
        src = np.repeat(np.arange(g.num_nodes, dtype=np.int64),
                        np.diff(rel.indptr))
        mat = sparse.coo_matrix((rel.weights, (a[src], a[rel.indices])),
                                shape=(c, c)).tocsr()
        diag = mat.diagonal()
        if np.any(diag):
            self_w += diag / 2.0  # symmetric storage counts each edge twice
            mat = (mat - sparse.diags(diag)).tocsr()  # exact cancellation
            mat.eliminate_zeros()
        mat.sort_indices()
        relations[etype] = Relation(
            etype, rel.name, rel.src_type, rel.dst_type,
            mat.indptr.astype(np.int64), mat.indices.astype(np.int64),
            mat.data.astype(np.float64), int(mat.nnz) // 2)
    return HeteroGraph(node_type, g.registry, relations, self_w)


_MATCHERS = {
    "jacc_max": lambda g, seed, cfg: match_jaccard_max(g, seed),
    "jacc_wrs": lambda g, seed, cfg: match_jaccard_wrs(g, seed),
    "lsh": lambda g, seed, cfg: match_lsh(g, cfg, seed),
}


def coarsen_chain(g0, cfg):
    """Iterate the configured matcher cfg.levels times (or until a level
    shrinks the graph by less than 1%, which stops early with a warning)."""
    graphs = [g0]
    matchings = []
    timings = []
    warnings = []
    for level in range(cfg.levels):
        g = graphs[-1]
        t0 = time.perf_counter()
        m = _MATCHERS[cfg.strategy](g, derive_seed(cfg.seed, 0xC0A5, level), cfg)
        g_next = build_coarse_graph(g, m)
        timings.append(time.perf_counter() - t0)
        graphs.append(g_next)
        matchings.append(m)
        reduction = 1.0 - m.coarse_count / m.fine_count
        if reduction < 0.01:
            warnings.append(
                f"level {level + 1}: node reduction {reduction:.2%} below 1%, "
                f"stopping early at {len(matchings)} of {cfg.levels} levels")
            break
    return CoarsenChain(graphs, matchings, timings, warnings, cfg)


# -- chain serialization -----------------------------------------------------

def save_chain(chain, dirpath):
    import os

    from .hetgraph import save_graph_dir

    os.makedirs(dirpath, exist_ok=True)
    for i, g in enumerate(chain.graphs):
        save_graph_dir(g, os.path.join(dirpath, f"level_{i}"))
    for i, m in enumerate(chain.matchings):
        m.save(os.path.join(dirpath, f"matching_{i}.hmmm"))
    meta = {
        "levels": chain.levels,
        "timings_seconds": chain.timings,
        "warnings": chain.warnings,
        "config": asdict(chain.config) if chain.config else None,
    }
    with open(os.path.join(dirpath, "chain.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_chain(dirpath):
    import os

    from .hetgraph import load_graph_dir

    with open(os.path.join(dirpath, "chain.json")) as fh:
        meta = json.load(fh)
    levels = meta["levels"]
    graphs = [load_graph_dir(os.path.join(dirpath, f"level_{i}"))
              for i in range(levels + 1)]
    matchings = [MatchingMatrix.load(os.path.join(dirpath, f"matching_{i}.hmmm"))
                 for i in range(levels)]
    cfg = CoarsenConfig(**meta["config"]) if meta.get("config") else None
    return CoarsenChain(graphs, matchings, meta.get("timings_seconds", []),
                        meta.get("warnings", []), cfg)
