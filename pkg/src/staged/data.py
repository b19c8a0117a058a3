"""Data model and file IO: trajectories, regulatory network specs,
ligand-receptor catalogs and run configuration."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BinningError,
    DomainError,
    DuplicateEntry,
    IncompleteGrid,
    NonUniformGrid,
    SchemaMismatch,
    UnknownGene,
)

log = logging.getLogger(__name__)

TRAJECTORY_HEADER = ("cell_id", "cell_type", "t", "x", "y", "gene", "value")
ATTENTION_HEADER = ("t", "cell", "target_node", "source_node", "source_cell", "beta", "intercellular")
PLOT_HEADER = ("cell_type", "gene", "t", "mean_obs", "sd_obs", "mean_pred")

DEFAULT_THRESHOLD = 0.5
DEFAULT_HILL = 2.0


def fmt(v: float) -> str:
    """Shortest round-trip text for a float; the canonical number format of every writer."""
    return repr(float(v))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# Dataset


@dataclass(frozen=True, eq=False)
class Dataset:
    """Expression ``x[t, c, g]`` and positions ``y[t, c, :]`` on a shared uniform time grid.

    Cells and genes are held in canonical (lexicographic) order once built
    through :meth:`build` or :func:`load_dataset`.
    """

    cells: tuple[str, ...]
    genes: tuple[str, ...]
    times: np.ndarray
    expression: np.ndarray  # (T, C, G)
    positions: np.ndarray  # (T, C, 2)
    cell_type: tuple[str, ...]  # aligned with cells

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(str(c) for c in self.cells))
        object.__setattr__(self, "genes", tuple(str(g) for g in self.genes))
        object.__setattr__(self, "cell_type", tuple(str(k) for k in self.cell_type))
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "expression", _frozen(self.expression))
        object.__setattr__(self, "positions", _frozen(self.positions))
        T, C, G = len(self.times), len(self.cells), len(self.genes)
        if T < 2:
            raise DomainError(f"need at least 2 time points, got {T}")
        if len(set(self.cells)) != C or len(set(self.genes)) != G:
            raise DuplicateEntry("cell ids and gene names must be unique")
        if len(self.cell_type) != C:
            raise DomainError("every cell needs a type")
        if self.expression.shape != (T, C, G):
            raise IncompleteGrid(f"expression shape {self.expression.shape} != {(T, C, G)}")
        if self.positions.shape != (T, C, 2):
            raise IncompleteGrid(f"positions shape {self.positions.shape} != {(T, C, 2)}")
        if not np.all(np.isfinite(self.expression)):
            raise DomainError("expression values must be finite")
        if np.any(self.expression < 0):
            raise DomainError("expression values must be non-negative")
        if not np.all(np.isfinite(self.positions)):
            raise DomainError("positions must be finite")
        dt = np.diff(self.times)
        if np.any(dt <= 0):
            raise DomainError("times must be strictly increasing")
        if not np.allclose(dt, dt[0], rtol=1e-9, atol=0.0):
            raise NonUniformGrid("time grid is not uniform")

    @classmethod
    def build(cls, cells, genes, times, expression, positions, cell_type) -> "Dataset":
        """Construct and canonicalize (sort cells and genes, ascending times)."""
        ti = np.argsort(np.asarray(times, dtype=float), kind="stable")
        return cls(cells, genes, np.asarray(times, dtype=float)[ti], np.asarray(expression)[ti],
                   np.asarray(positions)[ti], cell_type).canonicalize()

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_frames(self) -> int:
        return len(self.times)

    @property
    def types(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.cell_type)))

    def type_of(self, cell: str) -> str:
        return self.cell_type[self.cells.index(cell)]

    def cells_of_type(self, k: str) -> list[int]:
        return [i for i, kk in enumerate(self.cell_type) if kk == k]

    def canonicalize(self) -> "Dataset":
        ci = sorted(range(len(self.cells)), key=lambda i: self.cells[i])
        gi = sorted(range(len(self.genes)), key=lambda i: self.genes[i])
        ti = np.argsort(self.times, kind="stable")
        return Dataset(
            cells=[self.cells[i] for i in ci],
            genes=[self.genes[i] for i in gi],
            times=self.times[ti],
            expression=self.expression[ti][:, ci][:, :, gi],
            positions=self.positions[ti][:, ci],
            cell_type=[self.cell_type[i] for i in ci],
        )

    def replace(self, **kw) -> "Dataset":
        return dataclasses.replace(self, **kw)

    def normalized(self) -> "Dataset":
        """Rescale each gene by its maximum over cells and times (all-zero genes untouched)."""
        m = self.expression.max(axis=(0, 1))
        m = np.where(m > 0, m, 1.0)
        return self.replace(expression=self.expression / m)

    def subset_cells(self, keep: Iterable[str]) -> "Dataset":
        keep = set(keep)
        idx = [i for i, c in enumerate(self.cells) if c in keep]
        return Dataset(
            cells=[self.cells[i] for i in idx],
            genes=self.genes,
            times=self.times,
            expression=self.expression[:, idx],
            positions=self.positions[:, idx],
            cell_type=[self.cell_type[i] for i in idx],
        )

    def equals(self, other: "Dataset") -> bool:
        """Exact (bitwise) equality."""
        return (
            self.cells == other.cells
            and self.genes == other.genes
            and self.cell_type == other.cell_type
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.expression, other.expression)
            and np.array_equal(self.positions, other.positions)
        )


def load_dataset(path, normalize: bool = False) -> Dataset:
    """Read a long-format trajectory CSV (one row per cell, time, gene)."""
    rows = _read_csv(path, TRAJECTORY_HEADER)
    values: dict[tuple[str, float, str], float] = {}
    ctype: dict[str, str] = {}
    pos: dict[tuple[str, float], tuple[float, float]] = {}
    for lineno, r in enumerate(rows, start=2):
        c, k, g = r["cell_id"], r["cell_type"], r["gene"]
        t, v = float(r["t"]), float(r["value"])
        xy = (float(r["x"]), float(r["y"]))
        key = (c, t, g)
        if key in values:
            raise DuplicateEntry(f"line {lineno}: duplicate entry for cell={c} t={r['t']} gene={g}")
        if not math.isfinite(v):
            raise DomainError(f"line {lineno}: non-finite expression {r['value']}")
        if v < 0:
            raise DomainError(f"line {lineno}: negative expression {r['value']}")
        values[key] = v
        if ctype.setdefault(c, k) != k:
            raise DomainError(f"line {lineno}: cell {c} has conflicting types {ctype[c]!r} and {k!r}")
        if pos.setdefault((c, t), xy) != xy:
            raise DomainError(f"line {lineno}: cell {c} has conflicting positions at t={r['t']}")
    cells = sorted(ctype)
    genes = sorted({k[2] for k in values})
    times = sorted({k[1] for k in values})
    if not cells:
        raise IncompleteGrid("empty trajectory file")
    T, C, G = len(times), len(cells), len(genes)
    x = np.empty((T, C, G))
    y = np.empty((T, C, 2))
    for ti, t in enumerate(times):
        for ci, c in enumerate(cells):
            if (c, t) not in pos:
                raise IncompleteGrid(f"missing entries for cell={c} t={t}")
            y[ti, ci] = pos[(c, t)]
            for gi, g in enumerate(genes):
                try:
                    x[ti, ci, gi] = values[(c, t, g)]
                except KeyError:
                    raise IncompleteGrid(f"missing entry cell={c} t={t} gene={g}") from None
    ds = Dataset(cells, genes, np.array(times), x, y, [ctype[c] for c in cells])
    return ds.normalized() if normalize else ds


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for ci, c in enumerate(ds.cells):
            for ti, t in enumerate(ds.times):
                px, py = ds.positions[ti, ci]
                for gi, g in enumerate(ds.genes):
                    w.writerow([c, ds.cell_type[ci], fmt(t), fmt(px), fmt(py), g, fmt(ds.expression[ti, ci, gi])])


def _read_csv(path, header: Sequence[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != tuple(header):
            raise SchemaMismatch(f"{path}: expected header {','.join(header)}, got {reader.fieldnames}")
        return list(reader)


def load_attention_csv(path) -> list[dict]:
    """Read an attention export; numeric columns are converted."""
    rows = _read_csv(path, ATTENTION_HEADER)
    for r in rows:
        r["t"] = float(r["t"])
        r["beta"] = float(r["beta"])
        r["intercellular"] = r["intercellular"] == "1"
    return rows


def load_plot_csv(path) -> list[dict]:
    rows = _read_csv(path, PLOT_HEADER)
    for r in rows:
        for k in ("t", "mean_obs", "sd_obs", "mean_pred"):
            r[k] = float(r[k])
    return rows


def load_placements(path) -> list[tuple[str, str, tuple[float, float]]]:
    rows = _read_csv(path, ("cell_id", "cell_type", "x", "y"))
    return [(r["cell_id"], r["cell_type"], (float(r["x"]), float(r["y"]))) for r in rows]


def save_placements(placements, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cell_id", "cell_type", "x", "y"))
        for c, k, (x, y) in placements:
            w.writerow([c, k, fmt(x), fmt(y)])


# ---------------------------------------------------------------------------
# Regulatory networks


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    kind: str  # "activation" | "repression"
    rate_constant: float
    threshold: float | None = None
    hill: float | None = None

    def to_dict(self) -> dict:
        d = {"source": self.source, "target": self.target, "kind": self.kind, "rate_constant": self.rate_constant}
        if self.kind == "activation":
            d["threshold"] = self.threshold
            d["hill"] = self.hill
        return d


@dataclass(frozen=True)
class GrnSpec:
    genes: tuple[str, ...]
    edges: tuple[Edge, ...] = ()
    x_max: Mapping[str, float] = field(default_factory=dict)
    decay: Mapping[str, float] = field(default_factory=dict)
    init: Mapping[str, float] = field(default_factory=dict)
    ligands: tuple[str, ...] = ()
    receptors: tuple[str, ...] = ()

    def parents(self, gene: str) -> list[Edge]:
        return [e for e in self.edges if e.target == gene]

    def xmax_of(self, g: str) -> float:
        return float(self.x_max.get(g, 1.0))

    def to_dict(self) -> dict:
        return {
            "genes": list(self.genes),
            "edges": [e.to_dict() for e in self.edges],
            "x_max": {g: self.x_max[g] for g in self.genes if g in self.x_max},
            "decay": {g: self.decay[g] for g in self.genes if g in self.decay},
            "init": {g: self.init[g] for g in self.genes if g in self.init},
            "ligands": list(self.ligands),
            "receptors": list(self.receptors),
        }


def parse_grn_spec(doc: Mapping) -> GrnSpec:
    """Validate a JSON-shaped network document and fill activation defaults."""
    genes = tuple(str(g) for g in doc.get("genes", ()))
    gs = set(genes)
    if len(gs) != len(genes):
        raise DuplicateEntry("duplicate gene names")

    def known(g, what):
        if g not in gs:
            raise UnknownGene(f"{what} refers to unknown gene {g!r}")
        return g

    edges = []
    for i, e in enumerate(doc.get("edges", ())):
        src, tgt = known(e["source"], f"edge {i} source"), known(e["target"], f"edge {i} target")
        kind = e.get("kind", "activation")
        if kind not in ("activation", "repression"):
            raise DomainError(f"edge {i}: unknown kind {kind!r}")
        k = float(e["rate_constant"])
        if not k >= 0:
            raise DomainError(f"edge {i}: rate_constant must be >= 0, got {k}")
        if kind == "activation":
            th = float(e.get("threshold", DEFAULT_THRESHOLD) if e.get("threshold") is not None else DEFAULT_THRESHOLD)
            n = float(e.get("hill", DEFAULT_HILL) if e.get("hill") is not None else DEFAULT_HILL)
            if not th > 0:
                raise DomainError(f"edge {i}: threshold must be > 0")
            if not n >= 1:
                raise DomainError(f"edge {i}: hill coefficient must be >= 1")
            edges.append(Edge(src, tgt, kind, k, th, n))
        else:
            ignored = [f for f in ("threshold", "hill") if e.get(f) is not None]
            if ignored:
                log.warning("edge %d (%s -| %s): repression is linear, ignoring %s", i, src, tgt, ", ".join(ignored))
            edges.append(Edge(src, tgt, kind, k))

    def per_gene(key, default, lo, hi=None, strict=False):
        out = {}
        for g, v in dict(doc.get(key, {})).items():
            known(g, key)
            v = float(v)
            bad = (v <= lo) if strict else (v < lo)
            if bad or not math.isfinite(v):
                raise DomainError(f"{key}[{g}] = {v} out of range")
            out[g] = v
        for g in genes:
            out.setdefault(g, default)
        return out

    x_max = per_gene("x_max", 1.0, 0.0, strict=True)
    decay = per_gene("decay", 0.0, 0.0)
    init = per_gene("init", 0.0, 0.0)
    for g in genes:
        if init[g] > x_max[g]:
            raise DomainError(f"init[{g}] = {init[g]} exceeds x_max {x_max[g]}")
    ligands = tuple(known(g, "ligands") for g in doc.get("ligands", ()))
    receptors = tuple(known(g, "receptors") for g in doc.get("receptors", ()))
    return GrnSpec(genes, tuple(edges), x_max, decay, init, ligands, receptors)


def load_grn_spec(path) -> GrnSpec:
    return parse_grn_spec(json.loads(Path(path).read_text()))


def parse_grn_specs(doc: Mapping) -> dict[str, GrnSpec]:
    """A ``{"types": {name: spec}}`` document, or a single spec applied to every type (key ``"*"``)."""
    if "types" in doc:
        return {str(k): parse_grn_spec(v) for k, v in sorted(doc["types"].items())}
    return {"*": parse_grn_spec(doc)}


def load_grn_specs(path) -> dict[str, GrnSpec]:
    return parse_grn_specs(json.loads(Path(path).read_text()))


def resolve_spec(specs: Mapping[str, GrnSpec], cell_type: str) -> GrnSpec:
    if cell_type in specs:
        return specs[cell_type]
    if "*" in specs:
        return specs["*"]
    raise SchemaMismatch(f"no regulatory network for cell type {cell_type!r}")


def dump_grn_specs(specs: Mapping[str, GrnSpec]) -> dict:
    if set(specs) == {"*"}:
        return specs["*"].to_dict()
    return {"types": {k: v.to_dict() for k, v in sorted(specs.items())}}


@dataclass(frozen=True)
class LrPair:
    ligand: str
    receptor: str
    kind: str = "activation"
    rate_constant: float = 1.0
    threshold: float = DEFAULT_THRESHOLD
    hill: float = DEFAULT_HILL

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_lr_catalog(doc) -> tuple[LrPair, ...]:
    """``{"pairs": [{"ligand", "receptor", "kind"?, "rate_constant"?, ...}]}`` or a bare list."""
    items = doc["pairs"] if isinstance(doc, Mapping) else doc
    out = []
    for i, p in enumerate(items):
        if isinstance(p, (list, tuple)):
            p = {"ligand": p[0], "receptor": p[1]}
        kind = p.get("kind", "activation")
        if kind not in ("activation", "repression"):
            raise DomainError(f"pair {i}: unknown kind {kind!r}")
        k = float(p.get("rate_constant", 1.0))
        if k < 0:
            raise DomainError(f"pair {i}: rate_constant must be >= 0")
        out.append(LrPair(str(p["ligand"]), str(p["receptor"]), kind, k,
                          float(p.get("threshold") or DEFAULT_THRESHOLD), float(p.get("hill") or DEFAULT_HILL)))
    return tuple(out)


def load_lr_catalog(path) -> tuple[LrPair, ...]:
    return parse_lr_catalog(json.loads(Path(path).read_text()))


def dump_lr_catalog(pairs: Sequence[LrPair]) -> dict:
    return {"pairs": [p.to_dict() for p in pairs]}


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class LagConfig:
    gg: int = 0
    gl: int = 0
    lr: int = 0
    rg: int = 0

    def __post_init__(self):
        for name in ("gg", "gl", "lr", "rg"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise DomainError(f"lag {name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))


@dataclass(frozen=True)
class Neighborhood:
    mode: str  # "radius" | "knn"
    value: float

    @classmethod
    def parse(cls, text: str) -> "Neighborhood":
        mode, _, v = str(text).partition(":")
        mode = mode.strip().lower()
        if mode == "radius":
            r = float(v)
            if not r > 0:
                raise DomainError("radius must be > 0")
            return cls("radius", r)
        if mode == "knn":
            k = int(v)
            if k < 1:
                raise DomainError("k must be >= 1")
            return cls("knn", k)
        raise DomainError(f"neighborhood must be radius:<r> or knn:<k>, got {text!r}")

    def __str__(self):
        return f"{self.mode}:{self.value if self.mode == 'radius' else int(self.value)}"


@dataclass(frozen=True)
class RunConfig:
    neighborhood: str = "knn:2"
    lag_gg: int = 0
    lag_gl: int = 0
    lag_lr: int = 1
    lag_rg: int = 0
    integrator: str = "euler"
    dt: float = 0.0  # 0 means one step per data frame
    learning_rate: float = 0.01
    epochs: int = 200
    seed: int = 0
    window: int = 0  # truncated rollout length in frames; 0 = full horizon
    window_stride: int = 1
    teacher_forcing_epochs: int = 0
    noise_sigma: float = 0.0
    hidden: int = 8
    mlp_width: int = 32
    time_scale: float = 1.0
    aggregation: str = "per_gene"  # or "scalar"
    val_fraction: float = 0.2
    checkpoint_every: int = 0
    workers: int = 1
    chunk_size: int = 16
    eq2_sign_as_printed: bool = False

    def __post_init__(self):
        Neighborhood.parse(self.neighborhood)
        self.lags  # validates
        if self.integrator not in ("euler", "rk4"):
            raise DomainError(f"integrator must be euler or rk4, got {self.integrator!r}")
        if self.aggregation not in ("per_gene", "scalar"):
            raise DomainError(f"aggregation must be per_gene or scalar, got {self.aggregation!r}")
        if self.dt < 0 or self.noise_sigma < 0 or self.learning_rate < 0:
            raise DomainError("dt, noise_sigma and learning_rate must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise DomainError("val_fraction must be in [0, 1)")

    @property
    def lags(self) -> LagConfig:
        return LagConfig(self.lag_gg, self.lag_gl, self.lag_lr, self.lag_rg)

    @property
    def neighborhood_spec(self) -> Neighborhood:
        return Neighborhood.parse(self.neighborhood)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **{k: coerce_field(k, v) for k, v in kw.items()})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def coerce_field(name: str, value):
    if name not in _FIELD_TYPES:
        raise DomainError(f"unknown config key {name!r}")
    kind = _FIELD_TYPES[name]
    if isinstance(value, str):
        value = value.strip()
        if kind == "bool":
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise DomainError(f"{name}: not a boolean: {value!r}")
            return low in ("1", "true", "yes", "on")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        return bool(value)
    return str(value)


def load_run_config(path) -> RunConfig:
    """Flat ``key = value`` file (INI syntax, an optional ``[run]`` header)."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    parser.read_string(text)
    section = parser["run"] if parser.has_section("run") else parser[parser.sections()[0]]
    return RunConfig().replace(**dict(section))


def save_run_config(cfg: RunConfig, path) -> None:
    lines = ["[run]"]
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Pseudotime binning


def pseudotime_bins(pseudotime, n_bins: int) -> np.ndarray:
    """Assign each cell a bin index so bins are contiguous in pseudotime,
    cells with equal pseudotime share a bin, and bin sizes are as balanced
    as possible (least squares against ``n / n_bins``)."""
    pt = np.asarray(pseudotime, dtype=float)
    if n_bins < 2:
        raise BinningError("n_bins must be >= 2")
    values, inverse, counts = np.unique(pt, return_inverse=True, return_counts=True)
    m, n = len(values), len(pt)
    if m < n_bins:
        raise BinningError(f"{m} distinct pseudotimes cannot fill {n_bins} bins")
    cum = np.concatenate([[0], np.cumsum(counts)])
    target = n / n_bins
    # cost[b][j]: best cost of putting the first j groups into b bins
    inf = math.inf
    cost = np.full((n_bins + 1, m + 1), inf)
    back = np.zeros((n_bins + 1, m + 1), dtype=int)
    cost[0, 0] = 0.0
    for b in range(1, n_bins + 1):
        for j in range(b, m - (n_bins - b) + 1):
            best, arg = inf, -1
            for i in range(b - 1, j):
                c = cost[b - 1, i] + (cum[j] - cum[i] - target) ** 2
                if c < best - 1e-12:
                    best, arg = c, i
            cost[b, j], back[b, j] = best, arg
    group_bin = np.empty(m, dtype=int)
    j = m
    for b in range(n_bins, 0, -1):
        i = back[b, j]
        group_bin[i:j] = b - 1
        j = i
    return group_bin[inverse]


def bin_pseudotime(expression, pseudotime, n_bins: int, genes: Sequence[str],
                   cell_types: Sequence[str] | None = None, positions=None) -> Dataset:
    """Collapse static snapshots onto a pseudotime grid.

    Each cell type becomes one aggregate cell whose profile at bin ``b`` is the
    mean over that type's cells in bin ``b``; positions are averaged likewise.
    The output grid is ``t = 0, 1, ..., n_bins - 1``.
    """
    x = np.asarray(expression, dtype=float)
    n = x.shape[0]
    if len(pseudotime) != n:
        raise BinningError("every cell needs a pseudotime")
    labels = pseudotime_bins(pseudotime, n_bins)
    types = np.asarray(cell_types if cell_types is not None else ["all"] * n, dtype=object)
    pos = np.zeros((n, 2)) if positions is None else np.asarray(positions, dtype=float)
    uniq = sorted(set(types))
    out_x = np.empty((n_bins, len(uniq), x.shape[1]))
    out_y = np.empty((n_bins, len(uniq), 2))
    for ki, k in enumerate(uniq):
        for b in range(n_bins):
            sel = (types == k) & (labels == b)
            if not sel.any():
                raise BinningError(f"cell type {k!r} has no cells in bin {b}")
            out_x[b, ki] = x[sel].mean(axis=0)
            out_y[b, ki] = pos[sel].mean(axis=0)
    return Dataset.build(uniq, genes, np.arange(n_bins, dtype=float), out_x, out_y, uniq)
