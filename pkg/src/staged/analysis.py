"""Time-resolved attention export, network recovery scoring and trajectory-fit metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

from .data import ATTENTION_HEADER, PLOT_HEADER, Dataset, GrnSpec, fmt, resolve_spec
from .errors import SchemaMismatch
from .model import Checkpoint, RolloutResult, load_checkpoint, rollout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttentionRecord:
    t: float
    cell: str
    target_node: str
    source_node: str
    source_cell: str
    beta: float
    intercellular: bool


@dataclass
class AttentionSeries:
    records: list[AttentionRecord]
    cell_type: dict[str, str] = field(default_factory=dict)

    def times(self) -> list[float]:
        return sorted({r.t for r in self.records})

    def target_sums(self) -> dict[tuple[float, str, str], float]:
        out: dict[tuple[float, str, str], float] = {}
        for r in self.records:
            key = (r.t, r.cell, r.target_node)
            out[key] = out.get(key, 0.0) + r.beta
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ATTENTION_HEADER)
            for r in self.records:
                w.writerow((fmt(r.t), r.cell, r.target_node, r.source_node, r.source_cell, fmt(r.beta),
                            int(r.intercellular)))


def series_from_rollout(result: RolloutResult, cell_type: Sequence[str] | None = None) -> AttentionSeries:
    records = []
    for rec in result.records:
        tg = rec.graph
        names = []
        for g in tg.graphs:
            names.extend(n.name for n in g.nodes)
        t = float(result.times[rec.frame])
        for e, (s, d) in enumerate(zip(tg.src, tg.dst)):
            records.append(AttentionRecord(
                t, result.cells[tg.node_cell[d]], names[d], names[s], result.cells[tg.node_src_cell[s]],
                float(rec.beta[e]), bool(tg.inter[e])))
    ctype = dict(zip(result.cells, cell_type)) if cell_type is not None else {}
    return AttentionSeries(records, ctype)


def extract_attention_series(checkpoint, dataset: Dataset) -> tuple[AttentionSeries, RolloutResult]:
    """Closed-loop rollout of ``dataset`` under a checkpoint, keeping every step's attention."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    st = ck.structure_for(dataset)
    result = rollout(dataset, ck.params, ck.config, ck.specs, ck.catalog, structure=st, record=True)
    return series_from_rollout(result, dataset.cell_type), result


# ---------------------------------------------------------------------------
# Scoring


def auroc(scores, labels) -> float | None:
    """Area under the ROC curve via the rank-sum statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def spearman(a, b) -> float | None:
    """Rank correlation with average ranks; ``None`` when either series is constant."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return None
    rho = spearmanr(a, b).statistic
    return None if not math.isfinite(rho) else float(rho)


@dataclass
class FitRow:
    cell_type: str
    gene: str
    spearman: float | None
    mse: float


def _overlap(pred, obs: Dataset):
    if isinstance(pred, RolloutResult):
        frames = list(pred.predicted_frames)
        return pred.pred[frames], obs.expression[frames], obs.times[frames]
    if tuple(pred.genes) != tuple(obs.genes):
        raise SchemaMismatch(f"gene sets differ: {list(pred.genes)} vs {list(obs.genes)}")
    if tuple(pred.cells) != tuple(obs.cells):
        raise SchemaMismatch("cell sets differ between prediction and observation")
    common = np.intersect1d(pred.times, obs.times)
    if len(common) == 0:
        raise SchemaMismatch("prediction and observation share no time points")
    pi = np.searchsorted(pred.times, common)
    oi = np.searchsorted(obs.times, common)
    return pred.expression[pi], obs.expression[oi], common


def eval_fit(pred, obs: Dataset) -> list[FitRow]:
    """Per (cell type, gene): Spearman rho of type-mean trajectories and MSE over overlapping frames."""
    p, o, _ = _overlap(pred, obs)
    ctype = np.array(obs.cell_type)
    rows = []
    for k in obs.types:
        sel = ctype == k
        for gi, g in enumerate(obs.genes):
            rows.append(FitRow(k, g, spearman(p[:, sel, gi].mean(1), o[:, sel, gi].mean(1)),
                               float(((p[:, sel, gi] - o[:, sel, gi]) ** 2).mean())))
    return rows


def plot_rows(pred, obs: Dataset) -> list[tuple]:
    p, o, times = _overlap(pred, obs)
    ctype = np.array(obs.cell_type)
    out = []
    for k in obs.types:
        sel = ctype == k
        for gi, g in enumerate(obs.genes):
            for ti, t in enumerate(times):
                out.append((k, g, t, o[ti, sel, gi].mean(), o[ti, sel, gi].std(), p[ti, sel, gi].mean()))
    return out


def write_plot_csv(pred, obs: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_HEADER)
        for k, g, t, mo, so, mp in plot_rows(pred, obs):
            w.writerow((k, g, fmt(t), fmt(mo), fmt(so), fmt(mp)))


@dataclass
class TypeRecovery:
    top1_accuracy: float | None
    top1_activating: float | None  # argmax is an activating parent
    auroc: float | None
    precision_at_k: float | None
    k: int
    top1_parent: dict[str, str]
    excluded_genes: list[str]
    mean_beta: dict[str, dict[str, float]]  # target -> source -> time-averaged beta
    intercellular_mean_beta: dict[str, float]  # "ligand->receptor" -> mean beta


@dataclass
class RecoveryReport:
    top1_accuracy: float | None
    top1_activating: float | None
    auroc: float | None
    precision_at_k: float | None
    per_type: dict[str, TypeRecovery]
    spearman: dict[str, dict[str, float | None]]

    def to_dict(self) -> dict:
        return asdict(self)


def _gene_of(node: str) -> str | None:
    return None if ":" in node else node


def time_averaged_intracellular(series: AttentionSeries, k: str) -> dict[tuple[str, str], float]:
    """Mean beta of gene -> gene edges (self-edges excluded) over time and the cells of type ``k``."""
    acc: dict[tuple[str, str], list[float]] = {}
    for r in series.records:
        if r.intercellular or series.cell_type.get(r.cell) != k:
            continue
        tgt, src = _gene_of(r.target_node), _gene_of(r.source_node)
        if tgt is None or src is None or tgt == src:
            continue
        acc.setdefault((src, tgt), []).append(r.beta)
    return {key: float(np.mean(v)) for key, v in sorted(acc.items())}


def recovery_metrics(series: AttentionSeries, truth: Mapping[str, GrnSpec], pred: RolloutResult | None = None,
                     obs: Dataset | None = None) -> RecoveryReport:
    """Score time-averaged intracellular attention against the true networks.

    Pairs are all ordered (source, target) gene pairs with source != target;
    absent edges score 0. Ties in top-1 and precision@k resolve to the lower
    (target, source) gene order.
    """
    types = sorted(set(series.cell_type.values()))
    per_type = {}
    all_scores, all_labels, hits, n_scored, tp_total, k_total = [], [], 0, 0, 0, 0
    act_total = act_scored = 0
    for k in types:
        spec = resolve_spec(truth, k)
        genes = sorted(spec.genes)
        series_genes = {g for r in series.records if series.cell_type.get(r.cell) == k
                        for g in (_gene_of(r.target_node), _gene_of(r.source_node)) if g}
        if not set(genes) <= series_genes:
            raise SchemaMismatch(f"type {k!r}: truth genes {sorted(set(genes) - series_genes)} absent from series")
        true_edges = {(e.source, e.target) for e in spec.edges if e.source != e.target}
        act_edges = {(e.source, e.target) for e in spec.edges if e.source != e.target and e.kind == "activation"}
        mean = time_averaged_intracellular(series, k)
        pairs = [(s, t) for t in genes for s in genes if s != t]
        scores = [mean.get(p, 0.0) for p in pairs]
        labels = [p in true_edges for p in pairs]
        order = sorted(range(len(pairs)), key=lambda i: (-scores[i], genes.index(pairs[i][1]),
                                                         genes.index(pairs[i][0])))
        kk = len(true_edges)
        tp = sum(labels[i] for i in order[:kk])
        top1, excluded = {}, []
        for t in genes:
            incoming = [(mean[(s, t)], s) for s in genes if (s, t) in mean]
            if not incoming:
                excluded.append(t)
                continue
            best = max(incoming, key=lambda x: (x[0], -genes.index(x[1])))
            top1[t] = best[1]
        correct = sum((top1[t], t) in true_edges for t in top1)
        act_targets = [t for t in top1 if any(e[1] == t for e in act_edges)]
        act_hits = sum((top1[t], t) in act_edges for t in act_targets)
        inter = {}
        for r in series.records:
            if r.intercellular and series.cell_type.get(r.cell) == k:
                key = f"{r.source_node.split(':', 1)[1].split('@')[0]}->{r.target_node.split(':', 1)[1]}"
                inter.setdefault(key, []).append(r.beta)
        nested: dict[str, dict[str, float]] = {}
        for (s, t), v in mean.items():
            nested.setdefault(t, {})[s] = v
        per_type[k] = TypeRecovery(
            top1_accuracy=correct / len(top1) if top1 else None,
            top1_activating=act_hits / len(act_targets) if act_targets else None,
            auroc=auroc(scores, labels),
            precision_at_k=tp / kk if kk else None,
            k=kk, top1_parent=top1, excluded_genes=excluded, mean_beta=nested,
            intercellular_mean_beta={key: float(np.mean(v)) for key, v in sorted(inter.items())},
        )
        all_scores += scores
        all_labels += labels
        hits += correct
        n_scored += len(top1)
        act_total += act_hits
        act_scored += len(act_targets)
        tp_total += tp
        k_total += kk
    sp: dict[str, dict[str, float | None]] = {}
    if pred is not None and obs is not None:
        for row in eval_fit(pred, obs):
            sp.setdefault(row.cell_type, {})[row.gene] = row.spearman
    return RecoveryReport(
        top1_accuracy=hits / n_scored if n_scored else None,
        top1_activating=act_total / act_scored if act_scored else None,
        auroc=auroc(all_scores, all_labels),
        precision_at_k=tp_total / k_total if k_total else None,
        per_type=per_type,
        spearman=sp,
    )


def prediction_dataset(obs: Dataset, pred: np.ndarray) -> Dataset:
    """Predictions packaged as a trajectory table; negative excursions are clamped to 0 so the file loads."""
    pred = np.asarray(pred, dtype=float)
    n_neg = int((pred < 0).sum())
    if n_neg:
        log.info("clamped %d negative predicted values to 0", n_neg)
    return obs.replace(expression=np.maximum(pred, 0.0))
