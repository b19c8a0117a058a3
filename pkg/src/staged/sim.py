"""Mechanistic ground-truth generator: coupled multicellular GRNs with
Hill activation, linear repression and gated passive decay, integrated with
fixed-step RK4 or Euler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, GrnSpec, LrPair, Neighborhood, resolve_spec
from .errors import DomainError, NumericalBlowup, UnknownGene
from .graph import neighbor_lists


@dataclass(frozen=True)
class SimState:
    x: np.ndarray
    t: float = 0.0


@dataclass(frozen=True, eq=False)
class CoupledModel:
    cells: tuple[str, ...]
    cell_types: tuple[str, ...]
    positions: np.ndarray  # (C, 2), static for one run
    specs: tuple[GrnSpec, ...]  # per cell
    species: tuple[tuple[str, str], ...]  # (cell, gene), canonical order
    # regulation edges over species indices
    src: np.ndarray
    tgt: np.ndarray
    activation: np.ndarray  # bool
    rate: np.ndarray
    threshold: np.ndarray
    hill: np.ndarray
    intercellular: np.ndarray  # bool
    x_max: np.ndarray
    decay: np.ndarray
    init: np.ndarray
    printed_decay_sign: bool = False

    @property
    def n_species(self) -> int:
        return len(self.species)

    def index(self, cell: str, gene: str) -> int:
        return self.species.index((cell, gene))

    def intercellular_edges(self) -> list[tuple[tuple[str, str], tuple[str, str]]]:
        return [(self.species[s], self.species[t]) for s, t, m in zip(self.src, self.tgt, self.intercellular) if m]

    def without_coupling(self) -> "CoupledModel":
        keep = ~self.intercellular
        return CoupledModel(
            self.cells, self.cell_types, self.positions, self.specs, self.species,
            self.src[keep], self.tgt[keep], self.activation[keep], self.rate[keep],
            self.threshold[keep], self.hill[keep], self.intercellular[keep],
            self.x_max, self.decay, self.init, self.printed_decay_sign,
        )


def assemble_tissue(type_specs: Mapping[str, GrnSpec], placements: Sequence, lr_catalog: Sequence[LrPair] = (),
                    neighborhood: Neighborhood | str = "knn:2", eq2_sign_as_printed: bool = False) -> CoupledModel:
    """Instantiate one GRN block per placed cell and wire ligand -> receptor
    edges from every spatial neighbor.

    ``placements`` is a sequence of ``(cell_id, cell_type, (x, y))``; cells are
    sorted by id.
    """
    if isinstance(neighborhood, str):
        neighborhood = Neighborhood.parse(neighborhood)
    placements = sorted(placements, key=lambda p: str(p[0]))
    cells = tuple(str(p[0]) for p in placements)
    types = tuple(str(p[1]) for p in placements)
    pos = np.array([p[2] for p in placements], dtype=float).reshape(len(cells), 2)
    specs = tuple(resolve_spec(type_specs, k) for k in types)
    if neighborhood.mode == "knn" and len(cells) > 1 and neighborhood.value >= len(cells):
        raise DomainError(f"k={int(neighborhood.value)} must be smaller than the number of cells ({len(cells)})")

    all_genes = set().union(*(s.genes for s in type_specs.values())) if type_specs else set()
    for p in lr_catalog:
        for g, role in ((p.ligand, "ligand"), (p.receptor, "receptor")):
            if g not in all_genes:
                raise UnknownGene(f"catalog {role} {g!r} is absent from every network spec")

    species = []
    offset = []
    for c, spec in zip(cells, specs):
        offset.append(len(species))
        species.extend((c, g) for g in sorted(spec.genes))
    sidx = {s: i for i, s in enumerate(species)}

    cols = {k: [] for k in ("src", "tgt", "act", "rate", "th", "n", "inter")}

    def add(s, t, act, k, th, n, inter):
        cols["src"].append(s)
        cols["tgt"].append(t)
        cols["act"].append(act)
        cols["rate"].append(k)
        cols["th"].append(th if act else 1.0)
        cols["n"].append(n if act else 1.0)
        cols["inter"].append(inter)

    for c, spec in zip(cells, specs):
        for e in spec.edges:
            add(sidx[(c, e.source)], sidx[(c, e.target)], e.kind == "activation",
                e.rate_constant, e.threshold, e.hill, False)
    nbrs = neighbor_lists(pos, neighborhood) if len(cells) > 1 else [[] for _ in cells]
    for ci, c in enumerate(cells):
        for si in nbrs[ci]:
            s = cells[si]
            for p in lr_catalog:
                if p.ligand in specs[si].genes and p.receptor in specs[ci].genes:
                    add(sidx[(s, p.ligand)], sidx[(c, p.receptor)], p.kind == "activation",
                        p.rate_constant, p.threshold, p.hill, True)

    x_max = np.array([specs[cells.index(c)].xmax_of(g) for c, g in species])
    decay = np.array([specs[cells.index(c)].decay.get(g, 0.0) for c, g in species])
    init = np.array([specs[cells.index(c)].init.get(g, 0.0) for c, g in species])
    return CoupledModel(
        cells, types, pos, specs, tuple(species),
        np.array(cols["src"], dtype=int), np.array(cols["tgt"], dtype=int),
        np.array(cols["act"], dtype=bool), np.array(cols["rate"], dtype=float),
        np.array(cols["th"], dtype=float), np.array(cols["n"], dtype=float),
        np.array(cols["inter"], dtype=bool), x_max, decay, init, eq2_sign_as_printed,
    )


def _state_vector(state) -> np.ndarray:
    return np.asarray(state.x if isinstance(state, SimState) else state, dtype=float)


def _hill(x, k, th, n):
    x = np.maximum(x, 0.0)  # RK4 overshoot below zero must not produce NaN powers
    xn = x ** n
    return k * xn / (th ** n + xn)


def regulatory_inputs(model: CoupledModel, x: np.ndarray) -> np.ndarray:
    """Net regulatory input for every species at once."""
    xs = x[model.src]
    contrib = np.where(model.activation, _hill(xs, model.rate, model.threshold, model.hill), -model.rate * xs)
    return np.bincount(model.tgt, weights=contrib, minlength=model.n_species)


def _rate_law(R, x, x_max, decay, printed_sign):
    relu = lambda z: np.maximum(z, 0.0)  # noqa: E731
    sign = 1.0 if printed_sign else -1.0
    return relu(R) * (1.0 - x / x_max) - relu(-R) * x + sign * relu(1.0 - np.abs(R)) * decay * x


def derivatives(model: CoupledModel, x: np.ndarray) -> np.ndarray:
    R = regulatory_inputs(model, x)
    return _rate_law(R, x, model.x_max, model.decay, model.printed_decay_sign)


def regulatory_input(model: CoupledModel, species, state) -> float:
    """Net input to one species, summed edge by edge (cross-cell regulators included)."""
    x = _state_vector(state)
    i = model.index(*species) if isinstance(species, tuple) else int(species)
    total = 0.0
    for s, t, act, k, th, n in zip(model.src, model.tgt, model.activation, model.rate, model.threshold, model.hill):
        if t != i:
            continue
        xa = max(float(x[s]), 0.0)
        total += k * xa ** n / (th ** n + xa ** n) if act else -k * float(x[s])
    return total


def gene_derivative(model: CoupledModel, species, state) -> float:
    x = _state_vector(state)
    i = model.index(*species) if isinstance(species, tuple) else int(species)
    R = regulatory_input(model, i, x)
    return float(_rate_law(np.float64(R), x[i], model.x_max[i], model.decay[i], model.printed_decay_sign))


def _rk4(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _euler(f, x, h):
    return x + h * f(x)


def substeps(spacing: float, dt: float | None) -> int:
    if dt is None or dt <= 0:
        return 1
    n = int(round(spacing / dt))
    if n < 1 or abs(n * dt - spacing) > 1e-9 * max(spacing, 1.0):
        raise DomainError(f"integration step {dt} must divide the grid spacing {spacing}")
    return n


def integrate(model: CoupledModel, t_grid, integrator: str = "rk4", dt: float | None = None,
              x0: np.ndarray | None = None) -> np.ndarray:
    """Noise-free trajectory, shape ``(len(t_grid), n_species)``."""
    t_grid = np.asarray(t_grid, dtype=float)
    spacing = np.diff(t_grid)
    if len(t_grid) < 2 or np.any(spacing <= 0) or not np.allclose(spacing, spacing[0], rtol=1e-9, atol=0):
        raise DomainError("t_grid must be uniform and increasing with at least 2 points")
    n_sub = substeps(spacing[0], dt)
    h = spacing[0] / n_sub
    stepper = {"rk4": _rk4, "euler": _euler}[integrator]
    f = lambda x: derivatives(model, x)  # noqa: E731
    x = np.array(model.init if x0 is None else x0, dtype=float)
    out = np.empty((len(t_grid), model.n_species))
    out[0] = x
    for ti in range(1, len(t_grid)):
        for j in range(n_sub):
            x = stepper(f, x, h)
            if not np.all(np.isfinite(x)):
                bad = int(np.flatnonzero(~np.isfinite(x))[0])
                t = t_grid[ti - 1] + (j + 1) * h
                raise NumericalBlowup(f"non-finite state at t={t:.6g} in species {model.species[bad]}")
        out[ti] = x
    return out


def simulate(model: CoupledModel, t_grid, integrator: str = "rk4", noise_sigma: float = 0.0, seed: int = 0,
             dt: float | None = None) -> Dataset:
    """Integrate the coupled system and add clamped Gaussian observation noise."""
    traj = integrate(model, t_grid, integrator, dt)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        traj = np.maximum(traj + rng.normal(0.0, noise_sigma, size=traj.shape), 0.0)
    genes = sorted({g for _, g in model.species})
    gidx = {g: i for i, g in enumerate(genes)}
    T, C = len(t_grid), len(model.cells)
    x = np.zeros((T, C, len(genes)))  # genes a cell's network lacks stay at 0
    cidx = {c: i for i, c in enumerate(model.cells)}
    for si, (c, g) in enumerate(model.species):
        x[:, cidx[c], gidx[g]] = traj[:, si]
    pos = np.broadcast_to(model.positions, (T, C, 2))
    return Dataset.build(model.cells, genes, np.asarray(t_grid, dtype=float), x, pos, model.cell_types)
