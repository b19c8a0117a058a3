"""Per-cell augmented regulatory graphs, spatial neighborhoods and lagged
node features."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import GrnSpec, LagConfig, LrPair, Neighborhood
from .errors import WarmupViolation

GENE, RECEPTOR, LIGAND_OUT, LIGAND_IN = "gene", "receptor", "ligand_out", "ligand_in"

# edge kinds
PRIOR, TO_RECEPTOR, RECEPTOR_OUT, TO_LIGAND, SIGNAL, SELF = (
    "prior", "gene_to_receptor", "receptor_to_gene", "gene_to_ligand", "intercellular", "self")


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    gene: str
    source_cell: str | None = None  # set for input-ligand nodes only


@dataclass(frozen=True)
class AugmentedCellGraph:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[int, int, str], ...]  # (source index, target index, kind)
    cell: str | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def index(self, name: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i
        raise KeyError(name)

    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def named_edges(self) -> list[tuple[str, str, str]]:
        return [(self.nodes[s].name, self.nodes[t].name, k) for s, t, k in self.edges]

    def gene_nodes(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == GENE]

    def attention_edges(self) -> list[tuple[int, int, str]]:
        """Edges used by attention: the graph's edges plus one self-edge per gene
        node, deduplicated, ordered by (target, source)."""
        seen = {(s, t) for s, t, _ in self.edges}
        out = list(self.edges)
        for i in self.gene_nodes():
            if (i, i) not in seen:
                out.append((i, i, SELF))
        return sorted(out, key=lambda e: (e[1], e[0]))


def _lr_genes(grn: GrnSpec, lr_catalog: Sequence[LrPair] | None):
    genes = set(grn.genes)
    receptors = set(grn.receptors)
    ligands = set(grn.ligands)
    for p in lr_catalog or ():
        receptors.add(p.receptor)
        ligands.add(p.ligand)
    return sorted(receptors & genes), sorted(ligands & genes)


def build_cell_graph(grn: GrnSpec, lr_catalog: Sequence[LrPair] | None = None, cell: str | None = None
                     ) -> AugmentedCellGraph:
    """Gene nodes plus receptor and output-ligand nodes; depends only on the cell type."""
    genes = sorted(grn.genes)
    receptors, ligands = _lr_genes(grn, lr_catalog)
    nodes = [Node(g, GENE, g) for g in genes]
    nodes += [Node(f"rec:{g}", RECEPTOR, g) for g in receptors]
    nodes += [Node(f"lig:{g}", LIGAND_OUT, g) for g in ligands]
    idx = {n.name: i for i, n in enumerate(nodes)}
    edges = []
    seen = set()
    for e in grn.edges:
        key = (idx[e.source], idx[e.target])
        if key not in seen:
            seen.add(key)
            edges.append((key[0], key[1], PRIOR))
    for g in receptors:
        r = idx[f"rec:{g}"]
        edges.append((idx[g], r, TO_RECEPTOR))
        edges.extend((r, idx[h], RECEPTOR_OUT) for h in genes)
    for g in ligands:
        edges.append((idx[g], idx[f"lig:{g}"], TO_LIGAND))
    return AugmentedCellGraph(tuple(nodes), tuple(edges), cell)


def attach_neighbor_ligands(skeleton: AugmentedCellGraph, neighbors: Sequence[tuple[str, Sequence[str]]],
                            lr_catalog: Sequence[LrPair]) -> AugmentedCellGraph:
    """Add one input-ligand node per (neighbor, catalog ligand the neighbor
    carries), wired into the matching receptor nodes.

    ``neighbors`` holds ``(cell_id, genes of that cell)``; it is processed in
    cell-id order so the result does not depend on the order given.
    """
    nodes = list(skeleton.nodes)
    edges = list(skeleton.edges)
    idx = {n.name: i for i, n in enumerate(nodes)}
    ligands = sorted({p.ligand for p in lr_catalog})
    for cell_id, genes in sorted(neighbors, key=lambda nb: nb[0]):
        genes = set(genes)
        for g in ligands:
            if g not in genes:
                continue
            li = len(nodes)
            nodes.append(Node(f"nbr:{g}@{cell_id}", LIGAND_IN, g, cell_id))
            for p in lr_catalog:
                r = idx.get(f"rec:{p.receptor}")
                if p.ligand == g and r is not None:
                    edges.append((li, r, SIGNAL))
    return AugmentedCellGraph(tuple(nodes), tuple(edges), skeleton.cell)


def _distances(positions: np.ndarray, c: int) -> np.ndarray:
    d = positions - positions[c]
    return np.sqrt((d * d).sum(axis=1))


def neighbors(positions, c: int, neighborhood: Neighborhood | str) -> list[int]:
    """Spatial neighbors of cell index ``c`` (never ``c`` itself), ascending index."""
    if isinstance(neighborhood, str):
        neighborhood = Neighborhood.parse(neighborhood)
    positions = np.asarray(positions, dtype=float)
    dist = _distances(positions, c)
    others = [s for s in range(len(positions)) if s != c]
    if neighborhood.mode == "radius":
        return [s for s in others if dist[s] <= neighborhood.value]
    ranked = sorted(others, key=lambda s: (dist[s], s))
    return sorted(ranked[: int(neighborhood.value)])


def neighbor_lists(positions, neighborhood: Neighborhood | str) -> list[list[int]]:
    positions = np.asarray(positions, dtype=float)
    return [neighbors(positions, c, neighborhood) for c in range(len(positions))]


def warmup_length(lags: LagConfig) -> int:
    return max(lags.gg, lags.gl, lags.lr, lags.rg)


def node_lag(node: Node, lags: LagConfig) -> int:
    return {GENE: lags.gg, LIGAND_OUT: lags.gl, RECEPTOR: lags.rg, LIGAND_IN: lags.lr}[node.kind]


@dataclass(frozen=True)
class FeatureMap:
    values: Mapping[str, float]
    t: float


def assign_lagged_features(history, graph: AugmentedCellGraph, t: int, lags: LagConfig,
                           cells: Sequence[str], genes: Sequence[str], time_value: float | None = None
                           ) -> FeatureMap:
    """Read each node's feature from ``history[frame, cell, gene]`` at its lag.

    ``t`` is a frame index; the time channel defaults to ``t`` itself.
    """
    if t < warmup_length(lags):
        raise WarmupViolation(f"t={t} is inside the warm-up period (t_init={warmup_length(lags)})")
    history = np.asarray(history)
    ci = {c: i for i, c in enumerate(cells)}
    gi = {g: i for i, g in enumerate(genes)}
    own = ci[graph.cell]
    vals = {}
    for n in graph.nodes:
        src = ci[n.source_cell] if n.kind == LIGAND_IN else own
        vals[n.name] = float(history[t - node_lag(n, lags), src, gi[n.gene]])
    return FeatureMap(vals, float(t if time_value is None else time_value))


def dump_graph(graph: AugmentedCellGraph, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("src", "dst", "kind"))
        for s, t, k in graph.named_edges():
            w.writerow((s, t, k))
