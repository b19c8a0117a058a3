import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staged import bench
from staged.data import LrPair, parse_grn_spec
from staged.errors import DomainError, NumericalBlowup, UnknownGene
from staged.sim import (assemble_tissue, derivatives, gene_derivative, integrate, regulatory_input,
                        regulatory_inputs, simulate)


def one_cell(spec, k="A"):
    return assemble_tissue({k: spec}, [("c0", k, (0.0, 0.0))])


def hill(x, k=1.0, th=0.5, n=2.0):
    return k * x ** n / (th ** n + x ** n)


def test_regulatory_input_examples():
    spec = parse_grn_spec(dict(genes=["a1", "a2", "r", "t"], edges=[
        dict(source="a1", target="t", kind="activation", rate_constant=1.0),
        dict(source="a2", target="t", kind="activation", rate_constant=1.0),
        dict(source="r", target="t", kind="repression", rate_constant=0.3)]))
    m = one_cell(spec)
    x = np.array([1.0, 1.0, 1.0, 0.2])  # species order a1, a2, r, t
    assert regulatory_input(m, ("c0", "t"), x) == pytest.approx(2 * (1 / (0.25 + 1)) - 0.3, abs=1e-15)
    assert regulatory_input(m, ("c0", "a1"), x) == 0.0


def test_half_saturation():
    spec = parse_grn_spec(dict(genes=["a", "b"], edges=[
        dict(source="a", target="b", kind="activation", rate_constant=1.7, threshold=0.4, hill=3)]))
    m = one_cell(spec)
    assert regulatory_input(m, ("c0", "b"), np.array([0.4, 0.0])) == pytest.approx(0.85)


def test_gene_derivative_examples():
    sat = parse_grn_spec(dict(genes=["a", "b"], x_max={"b": 2.0}, decay={"b": 0.7}, edges=[
        dict(source="a", target="b", kind="activation", rate_constant=3.0)]))
    m = one_cell(sat)
    assert gene_derivative(m, ("c0", "b"), np.array([1.0, 2.0])) == 0.0  # x = x_max, R >= 1
    for a in (0.0, 0.3, 1.0):
        d = gene_derivative(m, ("c0", "b"), np.array([a, 0.0]))
        assert d == pytest.approx(max(regulatory_input(m, ("c0", "b"), np.array([a, 0.0])), 0.0)) and d >= 0
    lone = one_cell(parse_grn_spec(dict(genes=["g"], decay={"g": 0.1}, x_max={"g": 2.0})))
    assert gene_derivative(lone, ("c0", "g"), np.array([1.0])) == pytest.approx(-0.1)
    printed = assemble_tissue({"A": lone.specs[0]}, [("c0", "A", (0, 0))], eq2_sign_as_printed=True)
    assert gene_derivative(printed, ("c0", "g"), np.array([1.0])) == pytest.approx(0.1)


def test_vectorized_matches_edge_loop():
    specs = bench.type_specs()
    m = assemble_tissue(specs, bench.PLACEMENTS, bench.LR_CATALOG, "knn:2")
    x = np.random.default_rng(0).uniform(0, 1, m.n_species)
    R = regulatory_inputs(m, x)
    d = derivatives(m, x)
    for i in range(m.n_species):
        assert R[i] == pytest.approx(regulatory_input(m, i, x), abs=1e-13)
        assert d[i] == pytest.approx(gene_derivative(m, i, x), abs=1e-13)


def test_assemble_examples():
    spec = parse_grn_spec(dict(genes=["gL", "gR"]))
    cat = (LrPair("gL", "gR"),)
    m = assemble_tissue({"A": spec}, [("c0", "A", (0, 0)), ("c1", "A", (1, 0))], cat, "knn:1")
    assert m.intercellular_edges() == [(("c1", "gL"), ("c0", "gR")), (("c0", "gL"), ("c1", "gR"))]
    assert assemble_tissue({"A": spec}, [("c0", "A", (0, 0))], cat, "knn:1").intercellular_edges() == []
    m7 = assemble_tissue(bench.type_specs(), bench.PLACEMENTS, bench.LR_CATALOG, "knn:2")
    assert m7.n_species == 42
    with pytest.raises(UnknownGene):
        assemble_tissue({"A": spec}, [("c0", "A", (0, 0))], (LrPair("zz", "gR"),))
    with pytest.raises(DomainError):
        assemble_tissue({"A": spec}, [("c0", "A", (0, 0)), ("c1", "A", (1, 0))], cat, "knn:2")


def test_radius_coupling_symmetric():
    spec = parse_grn_spec(dict(genes=["gL", "gR"]))
    rng = np.random.default_rng(3)
    placements = [(f"c{i}", "A", tuple(rng.uniform(0, 3, 2))) for i in range(8)]
    m = assemble_tissue({"A": spec}, placements, (LrPair("gL", "gR"),), "radius:1.2")
    pairs = {(s[0], t[0]) for s, t in m.intercellular_edges()}
    assert pairs and all((b, a) in pairs for a, b in pairs)


def test_simulate_determinism_and_decay():
    m = assemble_tissue(bench.type_specs(), bench.PLACEMENTS, bench.LR_CATALOG, "knn:2")
    grid = np.linspace(0, 5, 11)
    a = simulate(m, grid, "rk4", 0.0, seed=1, dt=0.05)
    b = simulate(m, grid, "rk4", 0.0, seed=1, dt=0.05)
    assert a.equals(b)
    noisy = simulate(m, grid, "rk4", 0.05, seed=4, dt=0.05)
    assert noisy.equals(simulate(m, grid, "rk4", 0.05, seed=4, dt=0.05))
    assert noisy.expression.min() >= 0.0

    decay = one_cell(parse_grn_spec(dict(genes=["g"], decay={"g": 0.4}, x_max={"g": 2.0}, init={"g": 1.0})))
    traj = integrate(decay, np.linspace(0, 5, 51), "rk4", dt=0.01)[:, 0]
    assert np.all(np.diff(traj) < 0)
    assert traj[-1] == pytest.approx(np.exp(-0.4 * 5), rel=1e-9)


def test_blowup_reports_time_and_species():
    spec = parse_grn_spec(dict(genes=["g"], decay={"g": 0.1}, init={"g": 0.5}))
    m = one_cell(spec, "A")
    with pytest.raises(NumericalBlowup, match=r"t=.*\('c0', 'g'\)"):
        integrate(m, [0.0, 1.0], "euler", x0=np.array([np.nan]))


def test_zero_coupling_matches_isolated_cells():
    specs = bench.type_specs()
    m = assemble_tissue(specs, bench.PLACEMENTS, bench.LR_CATALOG, "knn:2").without_coupling()
    grid = np.linspace(0, 4, 9)
    full = integrate(m, grid, "rk4", dt=0.05)
    for ci, (c, k, xy) in enumerate(sorted(bench.PLACEMENTS)):
        alone = integrate(assemble_tissue(specs, [(c, k, xy)]), grid, "rk4", dt=0.05)
        assert np.array_equal(full[:, ci * 6:(ci + 1) * 6], alone)


def count_maxima(x):
    return int(np.sum((x[1:-1] > x[:-2]) & (x[1:-1] > x[2:])))


def test_benchmark_ring_oscillates_in_phase_order():
    specs = bench.type_specs()
    for k, order in (("A", bench.GENES), ("B", bench.GENES[::-1])):
        m = assemble_tissue(specs, [("c0", k, (0, 0))])
        grid = np.arange(0, 60.0001, 0.05)
        coarse = integrate(m, grid, "rk4", dt=0.05)
        fine = integrate(m, grid, "rk4", dt=0.0005)  # step / 100 reference
        assert np.max(np.abs(coarse - fine)) < 1e-3
        late = grid > 20
        peaks = []
        for g in order:
            x = fine[late, bench.GENES.index(g)]
            assert count_maxima(x) >= 3
            i = int(np.flatnonzero((x[1:-1] > x[:-2]) & (x[1:-1] > x[2:]))[0]) + 1
            peaks.append(grid[late][i])
        # ring members peak one after another in ring order
        by_peak = sorted(range(6), key=lambda i: peaks[i])
        assert set(np.mod(np.diff(by_peak), 6).tolist()) == {1}


def random_tissue(rng):
    n_genes = int(rng.integers(2, 11))
    n_cells = int(rng.integers(2, 8))
    genes = [f"g{i}" for i in range(n_genes)]
    specs = {}
    for k in ("A", "B"):
        edges = []
        for _ in range(int(rng.integers(0, 3 * n_genes))):
            s, t = rng.choice(genes, 2)
            if rng.random() < 0.6:
                edges.append(dict(source=s, target=t, kind="activation", rate_constant=float(rng.uniform(0, 5)),
                                  threshold=float(rng.uniform(0.05, 2)), hill=float(rng.uniform(1, 4))))
            else:
                edges.append(dict(source=s, target=t, kind="repression", rate_constant=float(rng.uniform(0, 5))))
        xmax = {g: float(rng.uniform(0.2, 3)) for g in genes}
        specs[k] = parse_grn_spec(dict(genes=genes, edges=edges, x_max=xmax,
                                       decay={g: float(rng.uniform(0, 3)) for g in genes},
                                       init={g: float(rng.uniform(0, xmax[g])) for g in genes}))
    lig, rec = rng.choice(genes, 2)
    placements = [(f"c{i}", "AB"[int(rng.integers(2))], tuple(rng.uniform(0, 4, 2))) for i in range(n_cells)]
    hood = "knn:1" if rng.random() < 0.5 else f"radius:{rng.uniform(0.5, 3)}"
    return assemble_tissue(specs, placements, (LrPair(lig, rec, rate_constant=float(rng.uniform(0, 3))),), hood)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_boundedness_fuzz(seed):
    m = random_tissue(np.random.default_rng(seed))
    traj = integrate(m, np.linspace(0, 3, 31), "rk4", dt=0.01)
    assert traj.min() >= -1e-6
    assert np.all(traj <= m.x_max + 1e-6)


def smooth_ring():
    spec = parse_grn_spec(dict(
        genes=["a", "b", "c"],
        edges=[dict(source=s, target=t, kind="activation", rate_constant=0.8) for s, t in
               (("a", "b"), ("b", "c"), ("c", "a"))],
        decay={"a": 0.5, "b": 0.7, "c": 0.9}, init={"a": 0.6, "b": 0.3, "c": 0.1}))
    return one_cell(spec)


def test_rk4_fourth_order():
    m = smooth_ring()
    grid = np.linspace(0, 2, 5)
    steps = [0.1, 0.05, 0.025]
    ref = integrate(m, grid, "rk4", dt=steps[-1] / 100)
    # every regulatory input stays inside (0, 1), where the rate law is smooth
    R = np.array([regulatory_inputs(m, x) for x in ref])
    assert R.min() > 0 and R.max() < 1
    errs = [np.abs(integrate(m, grid, "rk4", dt=h)[-1] - ref[-1]).max() for h in steps]
    slope = np.polyfit(np.log(steps), np.log(errs), 1)[0]
    assert abs(slope - 4) <= 0.3


def test_euler_first_order():
    m = smooth_ring()
    grid = np.linspace(0, 2, 5)
    ref = integrate(m, grid, "rk4", dt=0.00025)
    errs = [np.abs(integrate(m, grid, "euler", dt=h)[-1] - ref[-1]).max() for h in (0.02, 0.01, 0.005)]
    assert abs(np.polyfit(np.log([0.02, 0.01, 0.005]), np.log(errs), 1)[0] - 1) < 0.1
