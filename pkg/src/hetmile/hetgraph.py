"""Typed heterogeneous graph data model, ingestion and serialization.

A graph holds typed nodes (ids reindexed so each type occupies one
contiguous block), one symmetric CSR adjacency per declared edge type,
and a per-node self-loop weight vector that coarsening accumulates into.
Graphs are immutable after construction and safe to share across threads.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

EMBED_MAGIC = b"HMEB"
EMBED_VERSION = 1

# node ids must stay below 2**32 so the minhash modular arithmetic in
# coarsen.py fits in uint64 products
MAX_NODES = 2**32 - 1


@dataclass
class TypeRegistry:
    """Names for node and edge types; ids are dense indexes into the lists."""

    node_types: list = field(default_factory=list)
    edge_types: list = field(default_factory=list)  # (name, src_type_id, dst_type_id)

    def node_type_id(self, name):
        try:
            return self.node_types.index(name)
        except ValueError:
            raise DataError(f"unknown node type {name!r}") from None

    def edge_type_id(self, name):
        for i, (n, _, _) in enumerate(self.edge_types):
            if n == name:
                return i
        raise DataError(f"unknown edge type {name!r}")

    def add_node_type(self, name):
        if name in self.node_types:
            raise DataError(f"duplicate node type {name!r}")
        self.node_types.append(name)
        return len(self.node_types) - 1

    def add_edge_type(self, name, src_type, dst_type):
        if any(n == name for n, _, _ in self.edge_types):
            raise DataError(f"duplicate edge type {name!r}")
        self.edge_types.append((name, src_type, dst_type))
        return len(self.edge_types) - 1

    @property
    def num_node_types(self):
        return len(self.node_types)

    @property
    def num_edge_types(self):
        return len(self.edge_types)


class Relation:
    """Symmetric CSR adjacency for one edge type over all graph nodes.

    Both endpoints see the edge, so `indptr`/`indices`/`weights` cover the
    full node range; rows of nodes whose type does not touch this relation
    are empty. `num_edges` counts undirected edges once.
    """

    __slots__ = ("etype", "name", "src_type", "dst_type",
                 "indptr", "indices", "weights", "num_edges")

    def __init__(self, etype, name, src_type, dst_type,
                 indptr, indices, weights, num_edges):
        self.etype = etype
        self.name = name
        self.src_type = src_type
        self.dst_type = dst_type
        self.indptr = indptr
        self.indices = indices
        self.weights = weights
        self.num_edges = num_edges

    def row(self, u):
        s, e = self.indptr[u], self.indptr[u + 1]
        return self.indices[s:e], self.weights[s:e]


def _build_csr(num_nodes, us, vs, ws):
    """Symmetric CSR from undirected edge arrays; neighbor ids sorted per row."""
    src = np.concatenate([us, vs])
    dst = np.concatenate([vs, us])
    w = np.concatenate([ws, ws])
    order = np.lexsort((dst, src))
    src, dst, w = src[order], dst[order], w[order]
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst.astype(np.int64), w.astype(np.float64)


class HeteroGraph:
    """Immutable typed graph with per-relation symmetric adjacency."""

    def __init__(self, node_type, registry, relations, self_weights=None,
                 orig_ids=None):
        self.node_type = np.asarray(node_type, dtype=np.int32)
        self.num_nodes = len(self.node_type)
        if self.num_nodes > MAX_NODES:
            raise DataError("graph exceeds supported node count")
        self.registry = registry
        self.relations = relations  # dict etype id -> Relation
        if self_weights is None:
            self_weights = np.zeros(self.num_nodes, dtype=np.float64)
        self.self_weights = np.asarray(self_weights, dtype=np.float64)
        if orig_ids is None:
            orig_ids = np.arange(self.num_nodes, dtype=np.int64)
        self.orig_ids = np.asarray(orig_ids, dtype=np.int64)
        self._orig_to_internal = None

        # per-type contiguous blocks: type_offsets[t] .. type_offsets[t+1]
        t = self.node_type
        if np.any(t[1:] < t[:-1]):
            raise DataError("node ids must be grouped by type in ascending order")
        counts = np.bincount(t, minlength=registry.num_node_types)
        self.type_offsets = np.zeros(registry.num_node_types + 1, dtype=np.int64)
        np.cumsum(counts, out=self.type_offsets[1:])

        self.degree = np.zeros(self.num_nodes, dtype=np.int64)
        for rel in relations.values():
            self.degree += np.diff(rel.indptr)
        self.num_edges = sum(r.num_edges for r in relations.values())

    # -- lookups ---------------------------------------------------------

    def nodes_of_type(self, t):
        return np.arange(self.type_offsets[t], self.type_offsets[t + 1],
                         dtype=np.int64)

    def type_count(self, t):
        return int(self.type_offsets[t + 1] - self.type_offsets[t])

    def internal_id(self, orig_id):
        if self._orig_to_internal is None:
            self._orig_to_internal = {int(o): i for i, o in enumerate(self.orig_ids)}
        try:
            return self._orig_to_internal[int(orig_id)]
        except KeyError:
            raise DataError(f"node id {orig_id} not present in graph") from None

    def neighbors(self, u, relation=None):
        """(neighbor id, weight) pairs in ascending id order.

        With relation=None the union over all relations is returned;
        a neighbor reachable through several relations appears once with
        the weights summed.
        """
        if relation is not None:
            idx, w = self.relations[relation].row(u)
            return list(zip(idx.tolist(), w.tolist()))
        parts_i, parts_w = [], []
        for rel in self.relations.values():
            idx, w = rel.row(u)
            parts_i.append(idx)
            parts_w.append(w)
        if not parts_i:
            return []
        idx = np.concatenate(parts_i)
        w = np.concatenate(parts_w)
        uniq, inv = np.unique(idx, return_inverse=True)
        acc = np.zeros(len(uniq), dtype=np.float64)
        np.add.at(acc, inv, w)
        return list(zip(uniq.tolist(), acc.tolist()))

    def neighbor_ids(self, u):
        """Union of neighbor ids over all relations, sorted, possibly empty."""
        parts = [rel.row(u)[0] for rel in self.relations.values()]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))

    def two_hop_neighborhood(self, u):
        """1-hop plus 2-hop neighbor ids of u, excluding u itself."""
        one = self.neighbor_ids(u)
        if len(one) == 0:
            return set()
        parts = [one]
        for rel in self.relations.values():
            s = rel.indptr[one]
            e = rel.indptr[one + 1]
            for a, b in zip(s, e):
                parts.append(rel.indices[a:b])
        out = np.unique(np.concatenate(parts))
        return set(out[out != u].tolist())

    def total_weight(self):
        """Sum over undirected edge weights plus self-loop weights."""
        tot = float(self.self_weights.sum())
        for rel in self.relations.values():
            tot += float(rel.weights.sum()) / 2.0
        return tot


def build_graph(registry, node_type, edges_per_relation, self_weights=None,
                orig_ids=None):
    """Assemble a HeteroGraph from per-relation (u, v, w) arrays.

    Endpoint types are validated against each relation's declaration and
    duplicate (u, v) rows have their weights summed. Edges with u == v are
    routed into self_weights.
    """
    node_type = np.asarray(node_type, dtype=np.int32)
    n = len(node_type)
    if self_weights is None:
        self_weights = np.zeros(n, dtype=np.float64)
    else:
        self_weights = np.array(self_weights, dtype=np.float64, copy=True)
    relations = {}
    for etype, (name, st, dt) in enumerate(registry.edge_types):
        if etype in edges_per_relation and len(edges_per_relation[etype][0]):
            us, vs, ws = (np.asarray(a) for a in edges_per_relation[etype])
            us = us.astype(np.int64)
            vs = vs.astype(np.int64)
            ws = ws.astype(np.float64)
            if us.max(initial=-1) >= n or vs.max(initial=-1) >= n \
                    or us.min(initial=0) < 0 or vs.min(initial=0) < 0:
                raise DataError(f"edge endpoint out of range in relation {name!r}")
            if np.any(ws <= 0):
                raise DataError(f"non-positive edge weight in relation {name!r}")
            tu, tv = node_type[us], node_type[vs]
            ok = ((tu == st) & (tv == dt)) | ((tu == dt) & (tv == st))
            if not np.all(ok):
                bad = int(np.argmin(ok))
                raise DataError(
                    f"edge ({us[bad]}, {vs[bad]}) contradicts relation "
                    f"{name!r} declared as ({registry.node_types[st]}, "
                    f"{registry.node_types[dt]})")
            loops = us == vs
            if np.any(loops):
                np.add.at(self_weights, us[loops], ws[loops])
                us, vs, ws = us[~loops], vs[~loops], ws[~loops]
            # canonical order + duplicate merge
            lo = np.minimum(us, vs)
            hi = np.maximum(us, vs)
            key = lo * np.int64(n) + hi
            uniq, inv = np.unique(key, return_inverse=True)
            wacc = np.zeros(len(uniq), dtype=np.float64)
            np.add.at(wacc, inv, ws)
            lo = (uniq // n).astype(np.int64)
            hi = (uniq % n).astype(np.int64)
            indptr, indices, weights = _build_csr(n, lo, hi, wacc)
            relations[etype] = Relation(etype, name, st, dt, indptr, indices,
                                        weights, len(uniq))
        else:
            indptr = np.zeros(n + 1, dtype=np.int64)
            relations[etype] = Relation(etype, name, st, dt, indptr,
                                        np.empty(0, np.int64),
                                        np.empty(0, np.float64), 0)
    return HeteroGraph(node_type, registry, relations, self_weights, orig_ids)


# -- schema + TSV ingestion ------------------------------------------------

def parse_schema(path):
    """Flat key-value schema file.

    Lines: `node_type <name>`, `edge_type <name> <src> <dst>`,
    `node_file <relative path>`, `node_range <type> <start> <end>`
    (end exclusive). Blank lines and `#` comments are ignored.
    """
    registry = TypeRegistry()
    node_file = None
    ranges = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if kind == "node_type" and len(parts) == 2:
                registry.add_node_type(parts[1])
            elif kind == "edge_type" and len(parts) == 4:
                st = registry.node_type_id(parts[2])
                dt = registry.node_type_id(parts[3])
                registry.add_edge_type(parts[1], st, dt)
            elif kind == "node_file" and len(parts) == 2:
                node_file = parts[1]
            elif kind == "node_range" and len(parts) == 4:
                ranges.append((parts[1], int(parts[2]), int(parts[3])))
            else:
                raise DataError(f"{path}:{ln}: bad schema line {line!r}")
    return registry, node_file, ranges


def _read_node_file(path, registry):
    orig_ids, types = [], []
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{ln}: expected `node_id<TAB>type`")
            orig_ids.append(int(parts[0]))
            types.append(registry.node_type_id(parts[1]))
    return np.asarray(orig_ids, dtype=np.int64), np.asarray(types, dtype=np.int32)


def load_graph(edge_file, schema_file, self_weight_file=None):
    """Load a graph from a TSV edge file plus a schema config.

    Edge rows are `src <TAB> dst <TAB> edge_type [<TAB> weight]` with weight
    defaulting to 1.0; duplicate edges are merged by summing weights. Node
    ids are reindexed so each type is one contiguous block (sorted by
    original id inside the block); `orig_ids` preserves the input ids.
    """
    import os

    registry, node_file, ranges = parse_schema(schema_file)
    if registry.num_node_types == 0:
        raise DataError(f"{schema_file}: no node types declared")

    if node_file is not None:
        base = os.path.dirname(os.path.abspath(schema_file))
        orig_ids, types = _read_node_file(os.path.join(base, node_file), registry)
    elif ranges:
        ids, tys = [], []
        for tname, lo, hi in ranges:
            t = registry.node_type_id(tname)
            ids.append(np.arange(lo, hi, dtype=np.int64))
            tys.append(np.full(hi - lo, t, dtype=np.int32))
        orig_ids = np.concatenate(ids)
        types = np.concatenate(tys)
    else:
        raise DataError(f"{schema_file}: need node_file or node_range entries")

    if len(np.unique(orig_ids)) != len(orig_ids):
        raise DataError("duplicate node id in node declarations")

    # stable reindex: (type, original id) -> internal id
    order = np.lexsort((orig_ids, types))
    orig_ids = orig_ids[order]
    types = types[order]
    lookup = {int(o): i for i, o in enumerate(orig_ids)}

    per_rel = {e: ([], [], []) for e in range(registry.num_edge_types)}
    with open(edge_file) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) not in (3, 4):
                raise DataError(f"{edge_file}:{ln}: expected 3 or 4 columns")
            try:
                u = lookup[int(parts[0])]
                v = lookup[int(parts[1])]
            except KeyError as exc:
                raise DataError(f"{edge_file}:{ln}: dangling node id {exc}") from None
            e = registry.edge_type_id(parts[2])
            w = float(parts[3]) if len(parts) == 4 else 1.0
            us, vs, ws = per_rel[e]
            us.append(u)
            vs.append(v)
            ws.append(w)

    edges = {e: (np.asarray(us, np.int64), np.asarray(vs, np.int64),
                 np.asarray(ws, np.float64))
             for e, (us, vs, ws) in per_rel.items()}

    self_w = None
    if self_weight_file is not None:
        self_w = np.zeros(len(orig_ids), dtype=np.float64)
        with open(self_weight_file) as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line:
                    continue
                parts = line.split()
                self_w[lookup[int(parts[0])]] = float(parts[1])

    types_sorted = types  # already grouped by lexsort
    return build_graph(registry, types_sorted, edges, self_w, orig_ids)


def save_graph_dir(g, dirpath):
    """Persist a graph as schema.cfg + nodes.tsv + edges.tsv (+ self_weights.tsv)."""
    import os

    os.makedirs(dirpath, exist_ok=True)
    with open(os.path.join(dirpath, "schema.cfg"), "w") as fh:
        for name in g.registry.node_types:
            fh.write(f"node_type {name}\n")
        for name, st, dt in g.registry.edge_types:
            fh.write(f"edge_type {name} {g.registry.node_types[st]} "
                     f"{g.registry.node_types[dt]}\n")
        fh.write("node_file nodes.tsv\n")
    with open(os.path.join(dirpath, "nodes.tsv"), "w") as fh:
        for i in range(g.num_nodes):
            fh.write(f"{g.orig_ids[i]}\t{g.registry.node_types[g.node_type[i]]}\n")
    with open(os.path.join(dirpath, "edges.tsv"), "w") as fh:
        for rel in g.relations.values():
            for u in range(g.num_nodes):
                idx, w = rel.row(u)
                keep = idx > u
                for v, wv in zip(idx[keep], w[keep]):
                    fh.write(f"{g.orig_ids[u]}\t{g.orig_ids[v]}\t{rel.name}\t"
                             f"{float(wv)!r}\n")
    if np.any(g.self_weights > 0):
        with open(os.path.join(dirpath, "self_weights.tsv"), "w") as fh:
            for i in np.nonzero(g.self_weights > 0)[0]:
                fh.write(f"{g.orig_ids[i]}\t{float(g.self_weights[i])!r}\n")


def load_graph_dir(dirpath):
    import os

    self_file = os.path.join(dirpath, "self_weights.tsv")
    return load_graph(os.path.join(dirpath, "edges.tsv"),
                      os.path.join(dirpath, "schema.cfg"),
                      self_file if os.path.exists(self_file) else None)


# -- embedding matrix serialization -----------------------------------------

def save_embeddings(emb, path, fmt="binary", node_ids=None):
    """Write an embedding matrix.

    binary: magic HMEB, u32 version, u64 N, u32 d, N*d little-endian f32
    row-major. text: word2vec layout, header `N d`, then `id v1 .. vd`.
    """
    emb = np.asarray(emb)
    if emb.ndim != 2:
        raise DataError("embedding matrix must be 2-d")
    n, d = emb.shape
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(EMBED_MAGIC)
            fh.write(struct.pack("<IQI", EMBED_VERSION, n, d))
            fh.write(np.ascontiguousarray(emb, dtype="<f4").tobytes())
    elif fmt == "text":
        ids = np.arange(n) if node_ids is None else np.asarray(node_ids)
        with open(path, "w") as fh:
            fh.write(f"{n} {d}\n")
            for i in range(n):
                row = " ".join(f"{x:.8f}" for x in emb[i])
                fh.write(f"{ids[i]} {row}\n")
    else:
        raise DataError(f"unknown embedding format {fmt!r}")


def load_embeddings(path, fmt="binary"):
    """Read an embedding matrix; returns (matrix float32, node id array)."""
    if fmt == "binary":
        with open(path, "rb") as fh:
            head = fh.read(4 + 4 + 8 + 4)
            if len(head) < 20 or head[:4] != EMBED_MAGIC:
                raise DataError(f"{path}: not an embedding blob")
            version, n, d = struct.unpack("<IQI", head[4:])
            if version != EMBED_VERSION:
                raise DataError(f"{path}: unsupported version {version}")
            data = np.frombuffer(fh.read(), dtype="<f4")
            if data.size != n * d:
                raise DataError(f"{path}: truncated embedding blob")
            return data.reshape(n, d).copy(), np.arange(n, dtype=np.int64)
    if fmt == "text":
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise DataError(f"{path}: bad text embedding header")
            n, d = int(header[0]), int(header[1])
            emb = np.zeros((n, d), dtype=np.float32)
            ids = np.zeros(n, dtype=np.int64)
            for i in range(n):
                parts = fh.readline().split()
                if len(parts) != d + 1:
                    raise DataError(f"{path}: row {i} has wrong column count")
                ids[i] = int(parts[0])
                emb[i] = [float(x) for x in parts[1:]]
        return emb, ids
    raise DataError(f"unknown embedding format {fmt!r}")
