import numpy as np
import pytest

from conftest import ring
from staged import bench
from staged.data import LagConfig, LrPair, parse_grn_spec
from staged.errors import WarmupViolation
from staged.graph import (GENE, LIGAND_IN, assign_lagged_features, attach_neighbor_ligands, build_cell_graph,
                          dump_graph, neighbors, warmup_length)


def test_six_gene_skeleton_counts():
    spec = ring(list(bench.GENES), ligands=["g4"], receptors=["g1"])
    assert len(spec.edges) == 6
    g = build_cell_graph(spec, bench.LR_CATALOG)
    assert g.n_nodes == 8 and len(g.edges) == 14
    kinds = [k for _, _, k in g.edges]
    assert kinds.count("receptor_to_gene") == 6 and kinds.count("gene_to_receptor") == 1
    assert kinds.count("gene_to_ligand") == 1
    # brute-force count: prior edges + receptor wiring + fan-out + ligand wiring
    assert len(g.edges) == len(spec.edges) + 1 + len(spec.genes) + 1


def test_no_ligands_no_receptors_is_prior():
    spec = parse_grn_spec(dict(genes=["a", "b"], edges=[dict(source="a", target="b", rate_constant=1)]))
    g = build_cell_graph(spec, ())
    assert g.names() == ["a", "b"] and g.named_edges() == [("a", "b", "prior")]


def test_same_type_same_skeleton():
    spec = bench.type_specs()["B"]
    a = build_cell_graph(spec, bench.LR_CATALOG, "c4")
    b = build_cell_graph(spec, bench.LR_CATALOG, "c5")
    assert a.nodes == b.nodes and a.edges == b.edges


def test_self_loops_only_for_attention():
    g = build_cell_graph(bench.type_specs()["A"], bench.LR_CATALOG)
    att = g.attention_edges()
    selfs = [(s, t) for s, t, k in att if k == "self"]
    assert sorted(selfs) == [(i, i) for i in g.gene_nodes()]
    assert len(att) == len(g.edges) + 6


def test_neighbors_examples():
    pos = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert neighbors(pos, 0, "radius:1.0") == [1] and neighbors(pos, 1, "radius:1.0") == [0]
    assert neighbors(pos, 0, "radius:0.5") == []
    line = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert neighbors(line, 1, "knn:1") == [0]
    assert neighbors(line, 0, "knn:2") == [1, 2]


def test_radius_symmetry_random():
    rng = np.random.default_rng(0)
    pos = rng.uniform(0, 5, (12, 2))
    for c in range(12):
        for s in neighbors(pos, c, "radius:1.7"):
            assert c in neighbors(pos, s, "radius:1.7")


def test_attach_neighbor_ligands():
    gL = parse_grn_spec(dict(genes=["gL", "gR"]))
    cat = (LrPair("gL", "gR"),)
    sk = build_cell_graph(gL, cat, "c0")
    one = attach_neighbor_ligands(sk, [("c1", ["gL", "gR"])], cat)
    assert one.n_nodes == sk.n_nodes + 1 and len(one.edges) == len(sk.edges) + 1
    assert attach_neighbor_ligands(sk, [], cat) == sk
    three = attach_neighbor_ligands(sk, [("c3", ["gL"]), ("c1", ["gL"]), ("c2", ["gL"])], cat)
    new = [n for n in three.nodes if n.kind == LIGAND_IN]
    assert [n.name for n in new] == ["nbr:gL@c1", "nbr:gL@c2", "nbr:gL@c3"]
    r = three.index("rec:gR")
    assert sum(1 for s, t, k in three.edges if t == r and k == "intercellular") == 3
    # monotone: more neighbors never remove structure
    assert set(one.named_edges()) <= set(three.named_edges())


def test_warmup_examples():
    assert warmup_length(LagConfig(1, 2, 3, 2)) == 3
    assert warmup_length(LagConfig()) == 0
    assert warmup_length(LagConfig(5, 0, 0, 0)) == 5


def hist_fixture():
    # history[t, cell, gene] = 100 * t + 10 * cell + gene, easy to read back
    T, C, G = 7, 2, 2
    t, c, g = np.meshgrid(np.arange(T), np.arange(C), np.arange(G), indexing="ij")
    return (100 * t + 10 * c + g).astype(float)


def two_cell_graph():
    spec = parse_grn_spec(dict(genes=["gL", "gR"], edges=[dict(source="gL", target="gR", rate_constant=1)]))
    cat = (LrPair("gL", "gR"),)
    return attach_neighbor_ligands(build_cell_graph(spec, cat, "c0"), [("c1", ["gL", "gR"])], cat)


def test_lagged_features_hand_table():
    g = two_cell_graph()
    h = hist_fixture()
    f0 = assign_lagged_features(h, g, 4, LagConfig(), ["c0", "c1"], ["gL", "gR"])
    assert f0.values == {"gL": 400, "gR": 401, "rec:gR": 401, "lig:gL": 400, "nbr:gL@c1": 410}
    f = assign_lagged_features(h, g, 5, LagConfig(gg=2, gl=1, lr=3, rg=0), ["c0", "c1"], ["gL", "gR"])
    assert f.values == {"gL": 300, "gR": 301, "rec:gR": 501, "lig:gL": 400, "nbr:gL@c1": 210}
    assert f.t == 5.0
    with pytest.raises(WarmupViolation):
        assign_lagged_features(h, g, 2, LagConfig(gg=3), ["c0", "c1"], ["gL", "gR"])


def test_feature_totality():
    g = two_cell_graph()
    f = assign_lagged_features(hist_fixture(), g, 3, LagConfig(1, 1, 2, 3), ["c0", "c1"], ["gL", "gR"])
    assert set(f.values) == set(g.names()) and all(np.isfinite(list(f.values.values())))


def test_dump_graph(tmp_path):
    p = tmp_path / "g.csv"
    dump_graph(two_cell_graph(), p)
    lines = p.read_text().splitlines()
    assert lines[0] == "src,dst,kind" and "nbr:gL@c1,rec:gR,intercellular" in lines
