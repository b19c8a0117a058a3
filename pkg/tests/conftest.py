import numpy as np
import pytest

from staged.data import Dataset, LrPair, RunConfig, parse_grn_spec


def ring(genes, k=1.0, decay=0.5, init=None, ligands=(), receptors=()):
    n = len(genes)
    edges = [dict(source=genes[i], target=genes[(i + 1) % n], kind="activation", rate_constant=k) for i in range(n)]
    return parse_grn_spec(dict(genes=list(genes), edges=edges, decay={g: decay for g in genes},
                               init=init or {genes[0]: 0.8}, ligands=list(ligands), receptors=list(receptors)))


@pytest.fixture
def two_gene_spec():
    return parse_grn_spec(dict(
        genes=["a", "b"],
        edges=[dict(source="a", target="b", kind="activation", rate_constant=1.2),
               dict(source="b", target="a", kind="repression", rate_constant=0.4)],
        decay={"a": 0.3, "b": 0.5}, init={"a": 0.7, "b": 0.2},
        ligands=["a"], receptors=["b"],
    ))


@pytest.fixture
def catalog_ab():
    return (LrPair("a", "b", "activation", 0.6),)


def random_dataset(rng, cells=("c0", "c1"), genes=("a", "b"), types=("A", "A"), T=6, dt=0.5, moving=False):
    x = rng.uniform(0.05, 1.0, size=(T, len(cells), len(genes)))
    base = rng.uniform(0, 2, size=(len(cells), 2))
    pos = np.broadcast_to(base, (T, len(cells), 2)).copy()
    if moving:
        pos += np.cumsum(rng.normal(0, 0.3, size=pos.shape), axis=0)
    return Dataset.build(cells, genes, np.arange(T) * dt, x, pos, types)


def small_config(**kw):
    base = dict(neighborhood="knn:1", lag_gg=0, lag_gl=0, lag_lr=1, lag_rg=0, hidden=3, mlp_width=5,
                val_fraction=0.0, epochs=3, seed=1)
    base.update(kw)
    return RunConfig(**base)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def emit(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
