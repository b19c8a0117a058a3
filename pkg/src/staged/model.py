"""The learnable agent: masked single-head graph attention over each cell's
augmented graph, bilinear per-gene messages, an MLP derivative head, and a
fixed-step rollout with one parameter set per cell type.

All cells of all batch elements are evaluated together on a flattened
"tissue graph"; reductions run in canonical edge order so results do not
depend on how many cells share a batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import (
    Dataset,
    GrnSpec,
    LagConfig,
    LrPair,
    Neighborhood,
    RunConfig,
    dump_grn_specs,
    dump_lr_catalog,
    parse_grn_specs,
    parse_lr_catalog,
    resolve_spec,
)
from .errors import NothingToPredict, NumericalBlowup, SchemaMismatch, WarmupViolation
from .graph import (
    GENE,
    LIGAND_IN,
    LIGAND_OUT,
    RECEPTOR,
    AugmentedCellGraph,
    FeatureMap,
    attach_neighbor_ligands,
    build_cell_graph,
    neighbor_lists,
    warmup_length,
)
from .sim import substeps

DTYPE = torch.float64
LEAKY_SLOPE = 0.2
LAG_KINDS = (GENE, LIGAND_OUT, RECEPTOR, LIGAND_IN)  # feature-frame slot order


def lag_values(lags: LagConfig) -> tuple[int, int, int, int]:
    return (lags.gg, lags.gl, lags.rg, lags.lr)


# ---------------------------------------------------------------------------
# Parameters


def param_names(k: str) -> list[str]:
    return [f"{k}/{n}" for n in ("W", "a", "l1.w", "l1.b", "l2.w", "l2.b", "l3.w", "l3.b")]


@dataclass
class ModelParams:
    """One attention block and one derivative head per cell type."""

    type_genes: dict[str, tuple[str, ...]]
    hidden: int
    mlp_width: int
    aggregation: str
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def types(self) -> list[str]:
        return sorted(self.type_genes)

    def message_width(self, k: str) -> int:
        return 2 * len(self.type_genes[k]) if self.aggregation == "per_gene" else 1

    def input_width(self, k: str) -> int:
        return len(self.type_genes[k]) * self.hidden + self.message_width(k) + 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, w = self.hidden, self.mlp_width
        out = {}
        for k in self.types:
            g = len(self.type_genes[k])
            W, a, l1w, l1b, l2w, l2b, l3w, l3b = param_names(k)
            out.update({W: (2, d), a: (2 * d,), l1w: (self.input_width(k), w), l1b: (w,),
                        l2w: (w, w), l2b: (w,), l3w: (w, g), l3b: (g,)})
        return out

    @classmethod
    def init(cls, type_genes: Mapping[str, Sequence[str]], hidden: int = 8, mlp_width: int = 32,
             aggregation: str = "per_gene", seed: int = 0) -> "ModelParams":
        """Uniform in +-fan_in**-0.5, drawn in canonical name order from ``seed``."""
        p = cls({k: tuple(v) for k, v in sorted(type_genes.items())}, hidden, mlp_width, aggregation)
        rng = np.random.default_rng(seed)
        for name, shape in p.shapes().items():
            leaf = name.split("/")[-1]
            if leaf == "W":
                fan_in = 2
            elif leaf == "a":
                fan_in = 2 * hidden
            elif leaf.endswith(".w"):
                fan_in = shape[0]
            else:  # bias: fan_in of its layer
                fan_in = p.shapes()[name[:-2] + ".w"][0]
            bound = fan_in ** -0.5
            p.tensors[name] = torch.tensor(rng.uniform(-bound, bound, size=shape), dtype=DTYPE)
        return p

    def zeros_like(self) -> "ModelParams":
        return self.with_tensors({n: torch.zeros_like(t) for n, t in self.tensors.items()})

    def with_tensors(self, tensors: Mapping[str, torch.Tensor]) -> "ModelParams":
        return ModelParams(dict(self.type_genes), self.hidden, self.mlp_width, self.aggregation, dict(tensors))

    def numpy(self) -> dict[str, np.ndarray]:
        return {n: t.detach().cpu().numpy().copy() for n, t in self.tensors.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([t.detach().reshape(-1).numpy() for t in self.tensors.values()])

    def from_flat(self, v: np.ndarray) -> "ModelParams":
        out, i = {}, 0
        for n, t in self.tensors.items():
            out[n] = torch.tensor(v[i:i + t.numel()].reshape(t.shape), dtype=DTYPE)
            i += t.numel()
        return self.with_tensors(out)

    def requires_grad_(self) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad_(True)
        return self

    def detached(self) -> "ModelParams":
        return self.with_tensors({n: t.detach().clone() for n, t in self.tensors.items()})


# ---------------------------------------------------------------------------
# Problem structure and flattened per-frame graphs


@dataclass
class TissueGraph:
    """All cells' augmented graphs for one frame, flattened with node and cell offsets."""

    graphs: list[AugmentedCellGraph]
    node_cell: np.ndarray  # owner cell
    node_src_cell: np.ndarray  # cell whose expression feeds the node
    node_gene: np.ndarray  # dataset gene index
    node_slot: np.ndarray  # index into LAG_KINDS
    node_type: np.ndarray  # owner type index
    node_is_gene: np.ndarray
    src: np.ndarray  # surviving edges, sorted by (dst, src)
    dst: np.ndarray
    inter: np.ndarray  # bool, intercellular
    masked: list[tuple[int, int]]  # removed intercellular edges
    gene_node: dict[str, np.ndarray]  # type -> (n_cells_k, G_k) node indices
    cells_of_type: dict[str, np.ndarray]

    @property
    def n_nodes(self) -> int:
        return len(self.node_cell)


@dataclass
class ModelStructure:
    """Everything about a tissue the model needs besides parameters and data."""

    cells: tuple[str, ...]
    genes: tuple[str, ...]
    cell_type: tuple[str, ...]
    specs: dict[str, GrnSpec]
    catalog: tuple[LrPair, ...]
    neighborhood: Neighborhood
    lags: LagConfig
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.types = sorted(set(self.cell_type))
        gidx = {g: i for i, g in enumerate(self.genes)}
        self.type_genes: dict[str, tuple[str, ...]] = {}
        self.type_gene_idx: dict[str, np.ndarray] = {}
        self.skeletons: dict[str, AugmentedCellGraph] = {}
        for k in self.types:
            spec = resolve_spec(self.specs, k)
            missing = [g for g in spec.genes if g not in gidx]
            if missing:
                raise SchemaMismatch(f"type {k!r}: network genes {missing} absent from the dataset")
            tg = tuple(sorted(spec.genes))
            self.type_genes[k] = tg
            self.type_gene_idx[k] = np.array([gidx[g] for g in tg], dtype=int)
            self.skeletons[k] = build_cell_graph(spec, self.catalog)
        self.pairs = {(p.ligand, p.receptor) for p in self.catalog}

    @classmethod
    def from_dataset(cls, ds: Dataset, specs: Mapping[str, GrnSpec], catalog: Sequence[LrPair],
                     config: RunConfig) -> "ModelStructure":
        return cls(ds.cells, ds.genes, ds.cell_type, dict(specs), tuple(catalog),
                   config.neighborhood_spec, config.lags)

    @property
    def t_init(self) -> int:
        return warmup_length(self.lags)

    def cell_graph(self, c: int, nbrs: Sequence[int]) -> AugmentedCellGraph:
        k = self.cell_type[c]
        sk = self.skeletons[k]
        sk = AugmentedCellGraph(sk.nodes, sk.edges, self.cells[c])
        return attach_neighbor_ligands(
            sk, [(self.cells[s], self.type_genes[self.cell_type[s]]) for s in nbrs], self.catalog)

    def neighbor_sets(self, positions) -> tuple[tuple[int, ...], ...]:
        if len(self.cells) == 1:
            return ((),)
        return tuple(tuple(n) for n in neighbor_lists(positions, self.neighborhood))

    def tissue_graph(self, positions) -> TissueGraph:
        key = self.neighbor_sets(positions)
        if key not in self._cache:
            self._cache[key] = self._flatten([self.cell_graph(c, nb) for c, nb in enumerate(key)])
        return self._cache[key]

    def _flatten(self, graphs: list[AugmentedCellGraph]) -> TissueGraph:
        cidx = {c: i for i, c in enumerate(self.cells)}
        gidx = {g: i for i, g in enumerate(self.genes)}
        tidx = {k: i for i, k in enumerate(self.types)}
        nc, nsc, ng, nsl, nt, nig = [], [], [], [], [], []
        src, dst, inter, masked = [], [], [], []
        gene_node = {k: [] for k in self.types}
        off = 0
        for c, g in enumerate(graphs):
            k = self.cell_type[c]
            local_gene_node = {}
            for i, n in enumerate(g.nodes):
                nc.append(c)
                nsc.append(cidx[n.source_cell] if n.kind == LIGAND_IN else c)
                ng.append(gidx[n.gene])
                nsl.append(LAG_KINDS.index(n.kind))
                nt.append(tidx[k])
                nig.append(n.kind == GENE)
                if n.kind == GENE:
                    local_gene_node[n.gene] = off + i
            gene_node[k].append([local_gene_node[gn] for gn in self.type_genes[k]])
            for s, t, _ in g.attention_edges():
                ns, nd = g.nodes[s], g.nodes[t]
                is_inter = ns.source_cell is not None or nd.source_cell is not None
                if is_inter and not (ns.kind == LIGAND_IN and nd.kind == RECEPTOR
                                     and (ns.gene, nd.gene) in self.pairs):
                    masked.append((off + s, off + t))
                    continue
                src.append(off + s)
                dst.append(off + t)
                inter.append(is_inter)
            off += g.n_nodes
        return TissueGraph(
            graphs, np.array(nc), np.array(nsc), np.array(ng), np.array(nsl), np.array(nt),
            np.array(nig, dtype=bool), np.array(src, dtype=int), np.array(dst, dtype=int),
            np.array(inter, dtype=bool), masked,
            {k: np.array(v, dtype=int).reshape(-1, len(self.type_genes[k])) for k, v in gene_node.items()},
            {k: np.array(self.cells_of(k), dtype=int) for k in self.types},
        )

    def cells_of(self, k: str) -> list[int]:
        return [i for i, kk in enumerate(self.cell_type) if kk == k]

    def to_meta(self) -> dict:
        return {
            "cells": list(self.cells), "genes": list(self.genes), "cell_type": list(self.cell_type),
            "specs": dump_grn_specs(self.specs), "catalog": dump_lr_catalog(self.catalog),
            "neighborhood": str(self.neighborhood),
            "lags": {"gg": self.lags.gg, "gl": self.lags.gl, "lr": self.lags.lr, "rg": self.lags.rg},
        }


@dataclass
class BatchGraph:
    """Several tissue graphs (one per batch element) stacked with offsets."""

    tg: list[TissueGraph]
    feat_index: torch.Tensor
    node_batch: torch.Tensor
    node_type: torch.Tensor
    src: torch.Tensor
    dst: torch.Tensor
    n_nodes: int
    intra_e: torch.Tensor  # edges into gene nodes
    intra_slot: torch.Tensor  # flattened (b, cell, gene) target
    inter_e: torch.Tensor
    inter_slot: torch.Tensor
    inter_row: torch.Tensor  # flattened (b, cell) target, for scalar aggregation
    gene_node: dict[str, torch.Tensor]  # type -> (B * n_k, G_k)
    rows: dict[str, torch.Tensor]  # type -> flattened (b, cell) rows
    node_offsets: list[int]


def batch_graphs(tgs: Sequence[TissueGraph], n_cells: int, n_genes: int) -> BatchGraph:
    B = len(tgs)
    plane = B * n_cells * n_genes
    fi, nb, nt, src, dst = [], [], [], [], []
    intra_e, intra_slot, inter_e, inter_slot, inter_row = [], [], [], [], []
    gene_node = {k: [] for k in tgs[0].gene_node}
    rows = {k: [] for k in tgs[0].gene_node}
    off = e_off = 0
    offsets = []
    for b, tg in enumerate(tgs):
        offsets.append(off)
        fi.append(tg.node_slot * plane + (b * n_cells + tg.node_src_cell) * n_genes + tg.node_gene)
        nb.append(np.full(tg.n_nodes, b))
        nt.append(tg.node_type)
        src.append(tg.src + off)
        dst.append(tg.dst + off)
        into_gene = tg.node_is_gene[tg.dst]
        ie = np.flatnonzero(into_gene)
        intra_e.append(ie + e_off)
        intra_slot.append((b * n_cells + tg.node_cell[tg.dst[ie]]) * n_genes + tg.node_gene[tg.dst[ie]])
        xe = np.flatnonzero(tg.inter)
        inter_e.append(xe + e_off)
        inter_slot.append((b * n_cells + tg.node_cell[tg.dst[xe]]) * n_genes + tg.node_gene[tg.dst[xe]])
        inter_row.append(b * n_cells + tg.node_cell[tg.dst[xe]])
        for k in gene_node:
            gene_node[k].append(tg.gene_node[k] + off)
            rows[k].append(b * n_cells + tg.cells_of_type[k])
        off += tg.n_nodes
        e_off += len(tg.src)
    t = lambda xs: torch.as_tensor(np.concatenate(xs).astype(np.int64))  # noqa: E731
    return BatchGraph(
        list(tgs), t(fi), t(nb), t(nt), t(src), t(dst), off, t(intra_e), t(intra_slot), t(inter_e),
        t(inter_slot), t(inter_row),
        {k: torch.as_tensor(np.concatenate(v, axis=0).astype(np.int64)) for k, v in gene_node.items()},
        {k: t(v) for k, v in rows.items()}, offsets,
    )


# ---------------------------------------------------------------------------
# Kernels


def _linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # row-wise reduction: each output row depends only on its own input row
    return (x.unsqueeze(-1) * w).sum(-2) + b


def mlp(x: torch.Tensor, tensors: Mapping[str, torch.Tensor], k: str) -> torch.Tensor:
    h = torch.tanh(_linear(x, tensors[f"{k}/l1.w"], tensors[f"{k}/l1.b"]))
    h = torch.tanh(_linear(h, tensors[f"{k}/l2.w"], tensors[f"{k}/l2.b"]))
    return _linear(h, tensors[f"{k}/l3.w"], tensors[f"{k}/l3.b"])


def attention_core(feat, tnode, W_node, a_node, src, dst, n_nodes):
    """Edge logits ``a . leaky([Wz_dst || Wz_src])`` and per-target softmax.

    Returns ``(beta per edge, Wz per node)``.
    """
    wz = feat.unsqueeze(-1) * W_node[:, 0, :] + tnode.unsqueeze(-1) * W_node[:, 1, :]
    s = F.leaky_relu(wz, LEAKY_SLOPE)
    d = wz.shape[-1]
    as_dst = (s * a_node[:, :d]).sum(-1)
    as_src = (s * a_node[:, d:]).sum(-1)
    logits = as_dst[dst] + as_src[src]
    with torch.no_grad():
        mx = torch.full((n_nodes,), -torch.inf, dtype=logits.dtype).scatter_reduce(
            0, dst, logits, reduce="amax", include_self=True)
    ex = torch.exp(logits - mx[dst])
    den = torch.zeros(n_nodes, dtype=ex.dtype).index_add(0, dst, ex)
    return ex / den[dst], wz


@dataclass
class FieldOutput:
    deriv: torch.Tensor  # (B, C, G)
    beta: torch.Tensor  # per surviving edge


def evaluate_field(st: ModelStructure, params: ModelParams, bg: BatchGraph, frames: torch.Tensor,
                   tvals: torch.Tensor) -> FieldOutput:
    """Derivative of every (batch, cell, gene); ``frames`` is (4, B, C, G), one plane per lag slot."""
    _, B, C, G = frames.shape
    ten = params.tensors
    feat = frames.reshape(-1)[bg.feat_index]
    tnode = tvals[bg.node_batch]
    W_all = torch.stack([ten[f"{k}/W"] for k in st.types])
    a_all = torch.stack([ten[f"{k}/a"] for k in st.types])
    W_node, a_node = W_all[bg.node_type], a_all[bg.node_type]
    beta, wz = attention_core(feat, tnode, W_node, a_node, bg.src, bg.dst, bg.n_nodes)
    emb = F.elu(torch.zeros_like(wz).index_add(0, bg.dst, beta.unsqueeze(-1) * wz[bg.src]))
    msg = beta * feat[bg.dst] * feat[bg.src]
    intra = torch.zeros(B * C * G, dtype=DTYPE).index_add(0, bg.intra_slot, msg[bg.intra_e]).reshape(B * C, G)
    if params.aggregation == "per_gene":
        inter = torch.zeros(B * C * G, dtype=DTYPE).index_add(0, bg.inter_slot, msg[bg.inter_e]).reshape(B * C, G)
    else:
        inter = torch.zeros(B * C, dtype=DTYPE).index_add(0, bg.inter_row, msg[bg.inter_e]).reshape(B * C, 1)
    tcell = tvals.repeat_interleave(C)
    out = torch.zeros(B * C, G, dtype=DTYPE)
    for k in st.types:
        rows = bg.rows[k]
        if len(rows) == 0:
            continue
        gi = torch.as_tensor(st.type_gene_idx[k])
        e = emb[bg.gene_node[k]].reshape(len(rows), -1)
        m = torch.cat([intra[rows][:, gi], inter[rows][:, gi]], -1) if params.aggregation == "per_gene" \
            else inter[rows]
        x_in = torch.cat([e, m, tcell[rows].unsqueeze(-1)], -1)
        y = mlp(x_in, ten, k)
        out = out.index_put((rows.unsqueeze(-1), gi.unsqueeze(0)), y)
    if not torch.all(torch.isfinite(out)):
        raise NumericalBlowup("derivative head produced non-finite values; parameter norms: " + ", ".join(
            f"{n}={float(t.detach().norm()):.3g}" for n, t in ten.items()))
    return FieldOutput(out.reshape(B, C, G), beta)


# ---------------------------------------------------------------------------
# Rollout


@dataclass
class StepRecord:
    frame: int  # base frame the step starts from
    graph: TissueGraph
    beta: np.ndarray


@dataclass
class RolloutResult:
    pred: np.ndarray  # (T, C, G); frames <= t_init copy the observations
    t_init: int
    records: list[StepRecord]
    cells: tuple[str, ...] = ()
    genes: tuple[str, ...] = ()
    times: np.ndarray | None = None

    @property
    def predicted_frames(self) -> range:
        return range(self.t_init + 1, len(self.pred))


def _stage_frames(hist: list[torch.Tensor], j: int, current: torch.Tensor, lags: Sequence[int]) -> torch.Tensor:
    return torch.stack([current if lag == 0 else hist[j - lag] for lag in lags])


def unroll(st: ModelStructure, params: ModelParams, obs: torch.Tensor, positions: np.ndarray, times: np.ndarray,
           starts: Sequence[int], n_steps: int, *, integrator: str = "euler", dt: float = 0.0,
           time_scale: float = 1.0, teacher: float = 0.0, record: bool = False):
    """Run ``len(starts)`` windows side by side.

    Window ``b`` copies observed frames ``starts[b] .. starts[b] + t_init`` as
    warm-up and predicts the next ``n_steps`` frames. ``teacher`` in [0, 1]
    blends observations into the history the model reads (1 = teacher forcing,
    0 = closed loop). Returns predictions ``(n_steps, B, C, G)`` and, with
    ``record``, the attention of every step (B must be 1).
    """
    t_init = st.t_init
    lags = lag_values(st.lags)
    C, G = obs.shape[1], obs.shape[2]
    starts = list(starts)
    B = len(starts)
    spacing = float(times[1] - times[0])
    n_sub = substeps(spacing, dt)
    h = spacing / n_sub
    hist = [obs[[s + j for s in starts]] for j in range(t_init + 1)]
    preds, records = [], []
    bg_cache = {}
    for j in range(t_init, t_init + n_steps):
        frames_abs = [s + j for s in starts]
        tgs = [st.tissue_graph(positions[f]) for f in frames_abs]
        key = tuple(id(tg) for tg in tgs)
        if key not in bg_cache:
            bg_cache[key] = batch_graphs(tgs, C, G)
        bg = bg_cache[key]
        t0 = torch.as_tensor(times[frames_abs], dtype=DTYPE)
        x = hist[j]

        def f(state, toff):
            return evaluate_field(st, params, bg, _stage_frames(hist, j, state, lags), (t0 + toff) * time_scale)

        for sub in range(n_sub):
            base = sub * h
            if integrator == "euler":
                out = f(x, base)
                if record and sub == 0:
                    records.append(StepRecord(frames_abs[0], tgs[0], out.beta.detach().numpy().copy()))
                x = x + h * out.deriv
            else:
                o1 = f(x, base)
                if record and sub == 0:
                    records.append(StepRecord(frames_abs[0], tgs[0], o1.beta.detach().numpy().copy()))
                k1 = o1.deriv
                k2 = f(x + 0.5 * h * k1, base + 0.5 * h).deriv
                k3 = f(x + 0.5 * h * k2, base + 0.5 * h).deriv
                k4 = f(x + h * k3, base + h).deriv
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        preds.append(x)
        if teacher > 0:
            x = teacher * obs[[f + 1 for f in frames_abs]] + (1.0 - teacher) * x
        hist.append(x)
    return torch.stack(preds), records


def rollout(dataset: Dataset, params: ModelParams, config: RunConfig, specs: Mapping[str, GrnSpec],
            catalog: Sequence[LrPair], structure: ModelStructure | None = None,
            record: bool = True) -> RolloutResult:
    """Closed-loop prediction of every frame after the warm-up."""
    st = structure or ModelStructure.from_dataset(dataset, specs, catalog, config)
    T = dataset.n_frames
    if T - 1 <= st.t_init:
        raise NothingToPredict(f"{T} frames leave nothing to predict after warm-up t_init={st.t_init}")
    obs = torch.tensor(dataset.expression, dtype=DTYPE)
    with torch.no_grad():
        preds, records = unroll(st, params, obs, dataset.positions, dataset.times, [0], T - 1 - st.t_init,
                                integrator=config.integrator, dt=config.dt, time_scale=config.time_scale,
                                record=record)
    pred = dataset.expression.copy()
    pred[st.t_init + 1:] = preds[:, 0].numpy()
    return RolloutResult(pred, st.t_init, records, dataset.cells, dataset.genes, dataset.times.copy())


def step(st: ModelStructure, params: ModelParams, history, t: int, dt: float, positions, times,
         integrator: str = "euler", time_scale: float = 1.0) -> np.ndarray:
    """Advance every cell from frame ``t`` to ``t + 1``; ``history`` holds frames ``0..t``."""
    if t < st.t_init:
        raise WarmupViolation(f"t={t} is inside the warm-up period (t_init={st.t_init})")
    hist = torch.tensor(np.asarray(history, dtype=float), dtype=DTYPE)
    pos = np.asarray(positions, dtype=float)
    pos = np.broadcast_to(pos, (t + 2,) + pos.shape[-2:]) if pos.ndim == 2 else pos
    with torch.no_grad():
        preds, _ = unroll(st, params, hist, pos, np.asarray(times, dtype=float), [t - st.t_init], 1,
                          integrator=integrator, dt=dt, time_scale=time_scale)
    return preds[0, 0].numpy()


# ---------------------------------------------------------------------------
# Per-cell reference operations (single graph, explicit node names)


@dataclass
class AttentionMatrix:
    nodes: tuple[str, ...]
    beta: np.ndarray  # [target, source]
    intercellular: np.ndarray  # bool [target, source]


def _type_tensors(phi: Mapping) -> tuple[torch.Tensor, torch.Tensor]:
    W = phi["W"] if "W" in phi else next(v for k, v in phi.items() if k.endswith("/W"))
    a = phi["a"] if "a" in phi else next(v for k, v in phi.items() if k.endswith("/a"))
    return torch.as_tensor(W, dtype=DTYPE), torch.as_tensor(a, dtype=DTYPE)


def attention_weights(graph: AugmentedCellGraph, feats: FeatureMap, phi: Mapping,
                      mask_catalog: Sequence[LrPair]) -> AttentionMatrix:
    """Masked softmax attention over one augmented cell graph.

    ``phi`` holds ``W`` (2, d) and ``a`` (2d,).
    """
    W, a = _type_tensors(phi)
    pairs = {(p.ligand, p.receptor) for p in mask_catalog}
    N = graph.n_nodes
    src, dst, inter = [], [], np.zeros((N, N), dtype=bool)
    for s, t, _ in graph.attention_edges():
        ns, nt = graph.nodes[s], graph.nodes[t]
        is_inter = ns.source_cell is not None or nt.source_cell is not None
        inter[t, s] = is_inter
        if is_inter and not (ns.kind == LIGAND_IN and nt.kind == RECEPTOR and (ns.gene, nt.gene) in pairs):
            continue
        src.append(s)
        dst.append(t)
    feat = torch.tensor([feats.values[n.name] for n in graph.nodes], dtype=DTYPE)
    tn = torch.full((N,), feats.t, dtype=DTYPE)
    src_t, dst_t = torch.as_tensor(src, dtype=torch.long), torch.as_tensor(dst, dtype=torch.long)
    with torch.no_grad():
        beta, _ = attention_core(feat, tn, W.expand(N, 2, -1), a.expand(N, -1), src_t, dst_t, N)
    B = np.zeros((N, N))
    B[dst, src] = beta.numpy()
    return AttentionMatrix(tuple(graph.names()), B, inter)


def aggregate_messages(att: AttentionMatrix, feats: FeatureMap, graph: AugmentedCellGraph
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Per gene node (graph order): intracellular and intercellular bilinear messages.

    The intercellular entry of gene ``i`` collects edges into its receptor node.
    """
    genes = [n for n in graph.nodes if n.kind == GENE]
    intra = np.zeros(len(genes))
    inter = np.zeros(len(genes))
    names = att.nodes
    for gi, gn in enumerate(genes):
        i = names.index(gn.name)
        for j, sname in enumerate(names):
            b = att.beta[i, j]
            if b != 0.0:
                intra[gi] += b * feats.values[gn.name] * feats.values[sname]
        rname = f"rec:{gn.gene}"
        if rname in names:
            r = names.index(rname)
            for j, sname in enumerate(names):
                if att.intercellular[r, j] and att.beta[r, j] != 0.0:
                    inter[gi] += att.beta[r, j] * feats.values[rname] * feats.values[sname]
    return intra, inter


def embed(att: AttentionMatrix, feats: FeatureMap, graph: AugmentedCellGraph, phi: Mapping) -> np.ndarray:
    """Gene-node embeddings ``elu(sum_j beta_ij W z_j)``, shape (n_genes, d)."""
    W, _ = _type_tensors(phi)
    W = W.numpy()
    z = np.array([[feats.values[n], feats.t] for n in att.nodes])
    wz = z @ W
    agg = att.beta @ wz
    rows = [i for i, n in enumerate(graph.nodes) if n.kind == GENE]
    out = agg[rows]
    return np.where(out > 0, out, np.expm1(out))


def derivative_head(embedding, messages, t: float, theta: Mapping, k: str | None = None) -> np.ndarray:
    """MLP on ``[embedding (flattened) || messages || t]``; ``theta`` keys are ``<type>/l1.w`` etc."""
    if k is None:
        k = next(iter(theta)).split("/")[0]
    x = np.concatenate([np.asarray(embedding, dtype=float).reshape(-1), np.asarray(messages, dtype=float).reshape(-1),
                        [float(t)]])
    ten = {n: torch.as_tensor(v, dtype=DTYPE) for n, v in theta.items()}
    with torch.no_grad():
        y = mlp(torch.as_tensor(x, dtype=DTYPE).unsqueeze(0), ten, k)[0]
    if not torch.all(torch.isfinite(y)):
        raise NumericalBlowup("derivative head produced non-finite values: " + json.dumps(
            {n: float(np.linalg.norm(np.asarray(v))) for n, v in theta.items()}))
    return y.numpy()


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params: ModelParams, structure: ModelStructure, config: RunConfig, extra: dict | None = None):
    meta = {
        "format": "staged-checkpoint/1",
        "type_genes": {k: list(v) for k, v in params.type_genes.items()},
        "hidden": params.hidden, "mlp_width": params.mlp_width, "aggregation": params.aggregation,
        "config": config.to_dict(), "seed": config.seed, "structure": structure.to_meta(),
        "extra": extra or {},
    }
    arrays = {f"param:{n}": a for n, a in params.numpy().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


@dataclass
class Checkpoint:
    params: ModelParams
    config: RunConfig
    specs: dict[str, GrnSpec]
    catalog: tuple[LrPair, ...]
    meta: dict

    def structure_for(self, ds: Dataset) -> ModelStructure:
        if tuple(ds.genes) != tuple(self.meta["structure"]["genes"]):
            raise SchemaMismatch(
                f"dataset genes {list(ds.genes)} differ from checkpoint genes {self.meta['structure']['genes']}")
        unknown = set(ds.cell_type) - set(self.params.type_genes)
        if unknown:
            raise SchemaMismatch(f"cell types {sorted(unknown)} have no parameters in the checkpoint")
        return ModelStructure.from_dataset(ds, self.specs, self.catalog, self.config)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        tensors = {}
        for n in z.files:
            if n.startswith("param:"):
                tensors[n[len("param:"):]] = torch.as_tensor(z[n].copy(), dtype=DTYPE)
    params = ModelParams({k: tuple(v) for k, v in meta["type_genes"].items()}, meta["hidden"], meta["mlp_width"],
                         meta["aggregation"])
    params.tensors = {n: tensors[n] for n in params.shapes()}
    cfg = RunConfig().replace(**meta["config"])
    specs = parse_grn_specs(meta["structure"]["specs"])
    catalog = parse_lr_catalog(meta["structure"]["catalog"])
    return Checkpoint(params, cfg, specs, catalog, meta)
