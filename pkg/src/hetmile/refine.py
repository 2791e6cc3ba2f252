"""Embedding refinement: project coarse embeddings up the chain and correct
them with a relation-typed graph convolution.

Per layer and node type the model combines a self branch (H W_self) with one
branch per declared relation touching the type (row-normalized adjacency
block times H W_rel), weighted by per-node softmax attention over branches.
Weights are trained once on the coarsest pair and shared across all levels.
Forward, backward and Adam are implemented directly in numpy (float64) so
gradients stay checkable against finite differences.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .coarsen import _MATCHERS, build_coarse_graph
from .errors import ConfigError, DataError, NumericError
from .rng import derive_seed

PARAMS_MAGIC = b"HMRP"
PARAMS_VERSION = 1
_LRELU_SLOPE = 0.2


@dataclass
class RefineConfig:
    layers: int = 4
    activation: str = "elu"
    epochs: int = 200
    learning_rate: float = 0.01
    train_pair: str = "embed"  # embed | pool
    seed: int = 0

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if self.activation != "elu":
            raise ConfigError("only the elu activation is supported")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.train_pair not in ("embed", "pool"):
            raise ConfigError(f"unknown train_pair mode {self.train_pair!r}")


def _branch_table(registry):
    """Stable branch list per target type: self first, then declared
    relations touching the type (sorted by edge type id)."""
    branches = []
    for t in range(registry.num_node_types):
        branches.append((t, "self", -1, t))
        for etype, (_, st, dt) in enumerate(registry.edge_types):
            if dt == t:
                branches.append((t, "rel", etype, st))
            elif st == t and dt != t:
                branches.append((t, "rel", etype, dt))
    return branches


class RefinerParams:
    """Per-layer, per-branch weight matrices W (d x d) and attention vectors
    q (d), in the order given by _branch_table."""

    def __init__(self, d, layers, branches, W, q, registry=None):
        self.d = d
        self.layers = layers
        self.branches = branches
        self.W = W  # [layer][branch] -> (d, d) float64
        self.q = q  # [layer][branch] -> (d,) float64
        self.registry = registry

    @classmethod
    def init(cls, registry, d, layers, seed):
        rng = np.random.default_rng(derive_seed(seed, 0x4EF1))
        branches = _branch_table(registry)
        lim = np.sqrt(6.0 / (2 * d))
        W = [[rng.uniform(-lim, lim, size=(d, d)) for _ in branches]
             for _ in range(layers)]
        q = [[rng.normal(0.0, 0.1, size=d) for _ in branches]
             for _ in range(layers)]
        return cls(d, layers, branches, W, q, registry)

    def arrays(self):
        """Flat list of (label, array) pairs in a stable order."""
        out = []
        for l in range(self.layers):
            for bi in range(len(self.branches)):
                out.append((f"W[{l}][{bi}]", self.W[l][bi]))
                out.append((f"q[{l}][{bi}]", self.q[l][bi]))
        return out

    def check_finite(self):
        for name, arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite refiner parameter {name}")

    def save(self, path):
        reg = self.registry
        table = []
        for (t, kind, etype, other) in self.branches:
            table.append({
                "target": reg.node_types[t] if reg else t,
                "kind": kind,
                "relation": (reg.edge_types[etype][0] if reg else etype)
                if kind == "rel" else None,
                "source": reg.node_types[other] if reg else other,
            })
        header = json.dumps(
            {"d": self.d, "layers": self.layers, "branches": table},
            sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(PARAMS_MAGIC)
            fh.write(struct.pack("<II", PARAMS_VERSION, len(header)))
            fh.write(header)
            for l in range(self.layers):
                for bi in range(len(self.branches)):
                    fh.write(np.ascontiguousarray(self.W[l][bi],
                                                  dtype="<f8").tobytes())
                    fh.write(np.ascontiguousarray(self.q[l][bi],
                                                  dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, registry):
        with open(path, "rb") as fh:
            head = fh.read(12)
            if len(head) < 12 or head[:4] != PARAMS_MAGIC:
                raise DataError(f"{path}: not a refiner params blob")
            version, hlen = struct.unpack("<II", head[4:])
            if version != PARAMS_VERSION:
                raise DataError(f"{path}: unsupported params version {version}")
            meta = json.loads(fh.read(hlen).decode())
            d, layers = meta["d"], meta["layers"]
            branches = _branch_table(registry)
            if len(branches) != len(meta["branches"]):
                raise DataError(f"{path}: branch table does not match schema")
            W, q = [], []
            for _ in range(layers):
                Wl, ql = [], []
                for _ in branches:
                    buf = fh.read(d * d * 8)
                    if len(buf) < d * d * 8:
                        raise DataError(f"{path}: truncated params blob")
                    Wl.append(np.frombuffer(buf, dtype="<f8").reshape(d, d).copy())
                    buf = fh.read(d * 8)
                    if len(buf) < d * 8:
                        raise DataError(f"{path}: truncated params blob")
                    ql.append(np.frombuffer(buf, dtype="<f8").copy())
                W.append(Wl)
                q.append(ql)
        return cls(d, layers, branches, W, q, registry)


# -- graph context: normalized adjacency blocks -------------------------------

def _normalize_rows(mat):
    rowsum = np.asarray(mat.sum(axis=1)).ravel()
    inv = np.where(rowsum > 0, 1.0 / np.where(rowsum > 0, rowsum, 1.0), 0.0)
    return sparse.diags(inv) @ mat


def build_context(g):
    """Precompute, per relation branch, the row-normalized block of the
    adjacency (rows: target type nodes, cols: source type nodes), its
    transpose, and the per-node availability mask (rows with any weight).
    Same-type blocks get coarsening self weights on the diagonal before
    normalization. Attention at a node runs over its available branches only
    (the self branch is always available)."""
    blocks = {}
    offs = g.type_offsets
    for (t, kind, etype, other) in _branch_table(g.registry):
        if kind == "self":
            continue
        rel = g.relations[etype]
        lo_t, hi_t = offs[t], offs[t + 1]
        lo_s, hi_s = offs[other], offs[other + 1]
        n_t, n_s = hi_t - lo_t, hi_s - lo_s
        indptr = (rel.indptr[lo_t:hi_t + 1] - rel.indptr[lo_t]).astype(np.int64)
        lo_ptr, hi_ptr = rel.indptr[lo_t], rel.indptr[hi_t]
        indices = rel.indices[lo_ptr:hi_ptr] - lo_s
        data = rel.weights[lo_ptr:hi_ptr]
        block = sparse.csr_matrix((data, indices, indptr), shape=(n_t, n_s))
        if t == other and n_t > 0:
            sw = g.self_weights[lo_t:hi_t]
            if np.any(sw):
                block = (block + sparse.diags(sw)).tocsr()
        avail = np.asarray(block.sum(axis=1)).ravel() > 0
        block = _normalize_rows(block).tocsr()
        blocks[(t, etype)] = (block, block.T.tocsr(), avail)
    return blocks


def normalized_blocks(g):
    """Branch key -> row-normalized block; exposed for invariant checks."""
    return {k: v[0] for k, v in build_context(g).items()}


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _forward(g, ctx, h, params, want_cache=False):
    offs = g.type_offsets
    by_type = {}
    for bi, (t, kind, etype, other) in enumerate(params.branches):
        by_type.setdefault(t, []).append((bi, kind, etype, other))
    h = np.asarray(h, dtype=np.float64)
    cache = {"h": [h]} if want_cache else None
    for l in range(params.layers):
        h_next = np.empty_like(h)
        layer_cache = {} if want_cache else None
        for t, branch_list in by_type.items():
            lo, hi = offs[t], offs[t + 1]
            if hi == lo:
                continue
            zs, bins, scores, avails = [], [], [], []
            for (bi, kind, etype, other) in branch_list:
                if kind == "self":
                    b_in = h[lo:hi]
                    avails.append(np.ones(hi - lo, dtype=bool))
                else:
                    block, _, avail = ctx[(t, etype)]
                    b_in = block @ h[offs[other]:offs[other + 1]]
                    avails.append(avail)
                z = b_in @ params.W[l][bi]
                p = z @ params.q[l][bi]
                zs.append(z)
                bins.append(b_in)
                scores.append(p)
            pmat = np.stack(scores, axis=1)  # (n_t, B)
            mask = np.stack(avails, axis=1)
            smat = np.where(pmat > 0, pmat, _LRELU_SLOPE * pmat)
            smat = np.where(mask, smat, -np.inf)
            smat = smat - smat.max(axis=1, keepdims=True)
            e = np.exp(smat)
            alpha = e / e.sum(axis=1, keepdims=True)
            u = np.zeros_like(zs[0])
            for k, z in enumerate(zs):
                u += alpha[:, k:k + 1] * z
            h_next[lo:hi] = u if l == params.layers - 1 else _elu(u)
            if want_cache:
                layer_cache[t] = (bins, pmat, alpha, u)
        if want_cache:
            cache.setdefault("layers", []).append(layer_cache)
            cache["h"].append(h_next)
        h = h_next
    return h, cache


def hgcn_forward(g, h, params):
    """Run the refiner network on a graph; the last layer is linear.

    A node whose type has no declared relations (or empty blocks) flows
    through the self branch weighted by its attention share.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] != g.num_nodes:
        raise DataError("embedding row count does not match graph")
    ctx = build_context(g)
    out, _ = _forward(g, ctx, h, params)
    return out


def attention_coefficients(g, h, params, layer=0):
    """Per-node attention over branches at one layer (rows sum to 1)."""
    if params.layers == 0:
        return {}
    ctx = build_context(g)
    _, cache = _forward(g, ctx, np.asarray(h, dtype=np.float64), params,
                        want_cache=True)
    return {t: alpha for t, (_, _, alpha, _) in cache["layers"][layer].items()}


def _backward(g, ctx, params, cache, d_out):
    offs = g.type_offsets
    by_type = {}
    for bi, (t, kind, etype, other) in enumerate(params.branches):
        by_type.setdefault(t, []).append((bi, kind, etype, other))
    gW = [[np.zeros_like(params.W[l][bi]) for bi in range(len(params.branches))]
          for l in range(params.layers)]
    gq = [[np.zeros_like(params.q[l][bi]) for bi in range(len(params.branches))]
          for l in range(params.layers)]
    dh = np.asarray(d_out, dtype=np.float64)
    for l in range(params.layers - 1, -1, -1):
        dh_prev = np.zeros_like(cache["h"][l])
        for t, branch_list in by_type.items():
            lo, hi = offs[t], offs[t + 1]
            if hi == lo:
                continue
            bins, pmat, alpha, u = cache["layers"][l][t]
            du = dh[lo:hi]
            if l != params.layers - 1:
                du = du * _elu_grad(u)
            # recompute Z per branch, accumulate attention and weight grads
            zs = [b_in @ params.W[l][bi]
                  for (bi, _, _, _), b_in in zip(branch_list, bins)]
            dalpha = np.stack([np.sum(du * z, axis=1) for z in zs], axis=1)
            inner = np.sum(dalpha * alpha, axis=1, keepdims=True)
            ds = alpha * (dalpha - inner)
            dp = ds * np.where(pmat > 0, 1.0, _LRELU_SLOPE)
            for k, (bi, kind, etype, other) in enumerate(branch_list):
                dz = alpha[:, k:k + 1] * du + dp[:, k:k + 1] * \
                    params.q[l][bi][None, :]
                gq[l][bi] += zs[k].T @ dp[:, k]
                gW[l][bi] += bins[k].T @ dz
                db_in = dz @ params.W[l][bi].T
                if kind == "self":
                    dh_prev[lo:hi] += db_in
                else:
                    block_t = ctx[(t, etype)][1]
                    dh_prev[offs[other]:offs[other + 1]] += block_t @ db_in
        dh = dh_prev
    return gW, gq, dh


def refine_loss_and_grads(g, h_in, target, params, ctx=None):
    """MSE loss |target - forward(h_in)|^2 / num_nodes and its gradients."""
    if ctx is None:
        ctx = build_context(g)
    out, cache = _forward(g, ctx, np.asarray(h_in, np.float64), params,
                          want_cache=True)
    diff = out - np.asarray(target, np.float64)
    n = g.num_nodes
    loss = float(np.sum(diff * diff) / n)
    if params.layers == 0:
        return loss, [], [], out
    gW, gq, _ = _backward(g, ctx, params, cache, 2.0 * diff / n)
    return loss, gW, gq, out


def project(m, coarse_emb):
    """Copy each supernode's embedding onto its fine members (E_p = M E)."""
    coarse_emb = np.asarray(coarse_emb)
    if coarse_emb.shape[0] != m.coarse_count:
        raise DataError("embedding rows do not match matching coarse count")
    return coarse_emb[m.assignment]


def pool_embedding(m, fine_emb):
    """Group-mean of fine rows per supernode (the projection's left inverse)."""
    fine_emb = np.asarray(fine_emb, dtype=np.float64)
    if fine_emb.shape[0] != m.fine_count:
        raise DataError("embedding rows do not match matching fine count")
    sums = np.zeros((m.coarse_count, fine_emb.shape[1]))
    np.add.at(sums, m.assignment, fine_emb)
    counts = np.bincount(m.assignment, minlength=m.coarse_count)
    return sums / counts[:, None]


class _Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for i, (a, gr) in enumerate(zip(arrays, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * gr
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * gr * gr
            a -= self.lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) +
                                                self.eps)


def train_refiner(g_m, e_m, cfg, coarsen_cfg, base_embed_fn=None):
    """Fit refiner weights on the coarsest pair.

    G_m is coarsened one extra level; the model input is the projection of
    an embedding of that extra level (a fresh base embedding in "embed" mode,
    requiring base_embed_fn, or the group-mean pooling of e_m in "pool" mode)
    and the target is e_m itself. Returns (params, curve) where curve is the
    per-epoch [(epoch, loss)] list.
    """
    e_m = np.asarray(e_m, dtype=np.float64)
    if e_m.shape[0] != g_m.num_nodes:
        raise DataError("embedding rows do not match graph")
    matcher = _MATCHERS[coarsen_cfg.strategy]
    m_extra = matcher(g_m, derive_seed(coarsen_cfg.seed, 0x7A11), coarsen_cfg)
    if cfg.train_pair == "embed":
        if base_embed_fn is None:
            raise ConfigError("train_pair='embed' requires base_embed_fn")
        g_m1 = build_coarse_graph(g_m, m_extra)
        e_m1 = np.asarray(base_embed_fn(g_m1), dtype=np.float64)
    else:
        e_m1 = pool_embedding(m_extra, e_m)
    h_in = project(m_extra, e_m1)

    d = e_m.shape[1]
    params = RefinerParams.init(g_m.registry, d, cfg.layers, cfg.seed)
    ctx = build_context(g_m)
    flat = [arr for _, arr in params.arrays()]
    opt = _Adam([a.shape for a in flat], cfg.learning_rate)
    curve = []
    for epoch in range(cfg.epochs):
        loss, gW, gq, _ = refine_loss_and_grads(g_m, h_in, e_m, params, ctx)
        if not np.isfinite(loss):
            raise NumericError(
                f"refiner training diverged at epoch {epoch}: loss={loss}")
        curve.append((epoch, loss))
        if params.layers == 0:
            break
        gflat = []
        for l in range(params.layers):
            for bi in range(len(params.branches)):
                gflat.append(gW[l][bi])
                gflat.append(gq[l][bi])
        opt.step(flat, gflat)
    params.check_finite()
    return params, curve


def refine_chain(chain, e_m, params):
    """Walk the chain from the coarsest level back to G_0, projecting then
    refining at each step; returns the level-0 embedding (float64)."""
    if chain.levels == 0:
        return e_m
    e = np.asarray(e_m, dtype=np.float64)
    if e.shape[0] != chain.coarsest.num_nodes:
        raise DataError("embedding rows do not match coarsest graph")
    for i in range(chain.levels - 1, -1, -1):
        e = project(chain.matchings[i], e)
        e = hgcn_forward(chain.graphs[i], e, params)
    return e


def save_curve(curve, path):
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in curve:
            fh.write(f"{epoch},{loss!r}\n")
