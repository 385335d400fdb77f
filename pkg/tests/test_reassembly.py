import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import best_medoids, enumerate_candidates, random_grouping, rule_violations
from pfedhr import archzoo
from pfedhr.errors import EmptyUpload, TooFewLayers
from pfedhr.nncore import FCUnit, OpType
from pfedhr.reassembly import (
    CandidateBlueprint,
    LayerClustering,
    LayerRef,
    cka,
    decompose,
    distance_from_cka,
    distance_matrix,
    dump_blueprint,
    group_layers,
    layer_activations,
    layer_distance,
    search_candidates,
)


def _image_models(seed=0):
    temps = archzoo.templates_for((1, 8, 8), 4)
    return [archzoo.instantiate(t, seed + i, (1, 8, 8)) for i, t in enumerate(temps)]


def test_decompose_counts_and_tags():
    entries = decompose(_image_models())
    assert len(entries) == 2 + 3 + 4 + 5
    for ref, unit in entries:
        assert ref.op_type is unit.op_type
    assert [r.layer_index for r, _ in entries[:2]] == [0, 1]


def test_decompose_single_layer_model():
    model = archzoo.instantiate(archzoo.get_template("M1", 3, vector=True), 0, (5,))
    model.layers = model.layers[:1]
    ((ref, _),) = decompose([model])
    assert ref == LayerRef(0, 0, OpType.FC)


def test_decompose_empty():
    with pytest.raises(EmptyUpload):
        decompose([])


def test_first_layer_input_is_public_batch():
    model = _image_models()[3]
    batch = np.random.default_rng(0).random((64, 1, 8, 8)).astype(np.float32)
    x, y = layer_activations(model.layers[0], batch)
    np.testing.assert_array_equal(x, batch.reshape(64, -1))
    assert y.shape == (64, 8 * 4 * 4)
    _, y2 = layer_activations(model.layers[1], batch, model.layers[:1])
    assert y2.shape == (64, 16 * 2 * 2)


def test_identity_fc_passes_nonnegative_input():
    unit = FCUnit(6, 6)
    unit.params["weight"] = np.eye(6, dtype=np.float32)
    unit.params["bias"] = np.zeros(6, np.float32)
    batch = np.random.default_rng(1).random((10, 6)).astype(np.float32)
    x, y = layer_activations(unit, batch)
    np.testing.assert_array_equal(x, y)


def test_cka_self_similarity():
    x = np.random.default_rng(0).normal(size=(50, 12))
    assert cka(x, x) == pytest.approx(1.0, abs=1e-6)


def test_cka_orthogonal_and_scale_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 9))
    q, _ = np.linalg.qr(rng.normal(size=(9, 9)))
    assert cka(x, x @ q) == pytest.approx(1.0, abs=1e-5)
    assert cka(x, 3.7 * x) == pytest.approx(1.0, abs=1e-5)


def test_cka_degenerate_input_is_zero():
    x = np.random.default_rng(2).normal(size=(20, 4))
    dead = np.zeros((20, 5))
    assert cka(x, dead) == 0.0
    from pfedhr.errors import DegenerateInput

    with pytest.raises(DegenerateInput):
        cka(x, dead, strict=True)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (8, 3), elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, (8, 5), elements=st.floats(-1e3, 1e3)),
)
def test_cka_bounded(x, y):
    v = cka(x, y)
    assert -1e-6 <= v <= 1 + 1e-6


def test_layer_distance_arithmetic():
    x = np.random.default_rng(3).normal(size=(30, 6))
    assert layer_distance((x, x), (x, x)) == pytest.approx(0.5, abs=1e-6)
    assert distance_from_cka(0.25, 0.25) == 2.0


def test_layer_distance_symmetric():
    rng = np.random.default_rng(4)
    for _ in range(10):
        a = (rng.normal(size=(25, 4)), rng.normal(size=(25, 7)))
        b = (rng.normal(size=(25, 3)), rng.normal(size=(25, 2)))
        assert layer_distance(a, b) == layer_distance(b, a)


def test_distance_matrix_of_uploads():
    models = _image_models()
    batch = np.random.default_rng(0).random((32, 1, 8, 8)).astype(np.float32)
    refs, dist = distance_matrix(models, batch)
    assert len(refs) == 14
    assert np.allclose(dist, dist.T)
    assert np.all(np.diag(dist) == 0)
    off = dist[~np.eye(14, dtype=bool)]
    assert off.min() >= 0.5 - 1e-9
    # layer 0 of every model sees the same input: its input CKA is exactly 1
    x0, y0 = layer_activations(models[0].layers[0], batch)
    x1, y1 = layer_activations(models[1].layers[0], batch)
    assert dist[0, 2] == pytest.approx(layer_distance((x0, y0), (x1, y1)), rel=1e-9)


def _refs(n):
    return [LayerRef(0, i, OpType.FC) for i in range(n)]


def test_group_layers_singletons():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.5, 2, (5, 5))
    d = (a + a.T) / 2
    np.fill_diagonal(d, 0)
    cl = group_layers(_refs(5), d, 5, seed=1)
    assert cl.objective == 0.0
    assert all(len(g) == 1 for g in cl.groups)


def test_group_layers_two_blocks_matches_brute_force():
    d = np.full((6, 6), 3.0)
    d[:3, :3] = 0.6
    d[3:, 3:] = 0.7
    d[1, 2] = d[2, 1] = 0.55
    np.fill_diagonal(d, 0)
    cl = group_layers(_refs(6), d, 2, seed=0)
    assert sorted(sorted(r.layer_index for r in g) for g in cl.groups) == [[0, 1, 2], [3, 4, 5]]
    opt, _ = best_medoids(d, 2)
    assert cl.objective == pytest.approx(opt)


def test_group_layers_k1_linear_scan():
    rng = np.random.default_rng(5)
    a = rng.uniform(0.5, 2, (7, 7))
    d = (a + a.T) / 2
    np.fill_diagonal(d, 0)
    cl = group_layers(_refs(7), d, 1, seed=3)
    best = int(np.argmin(d.sum(axis=1)))
    assert cl.medoids == [_refs(7)[best]]
    assert cl.objective == pytest.approx(d[best].sum())


@pytest.mark.parametrize("seed", range(20))
def test_pam_invariants(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 10))
    a = rng.uniform(0.5, 3, (n, n))
    d = (a + a.T) / 2
    np.fill_diagonal(d, 0)
    k = int(rng.integers(1, n))
    cl = group_layers(_refs(n), d, k, seed=seed)
    assert all(x >= y for x, y in zip(cl.history, cl.history[1:]))
    medoid_idx = [cl.refs.index(m) for m in cl.medoids]
    for i in range(n):
        assert d[i, medoid_idx[cl.labels[i]]] == pytest.approx(d[i, medoid_idx].min())
    assert cl.objective == pytest.approx(sum(d[i, medoid_idx[cl.labels[i]]] for i in range(n)))
    assert all(cl.medoids[g] in cl.groups[g] for g in range(k))
    assert sum(len(g) for g in cl.groups) == n
    again = group_layers(_refs(n), d, k, seed=seed)
    assert again.groups == cl.groups


def test_group_layers_too_many_clusters():
    with pytest.raises(TooFewLayers):
        group_layers(_refs(3), np.zeros((3, 3)), 4)


def _clustering(groups):
    refs = sorted(r for g in groups for r in g)
    labels = np.array([next(i for i, g in enumerate(groups) if r in g) for r in refs])
    return LayerClustering(refs, [sorted(g) for g in groups], [g[0] for g in groups],
                           np.zeros((len(refs),) * 2), 0.0, labels)


def test_search_hand_enumeration():
    conv, fc = LayerRef(0, 0, OpType.CONV), LayerRef(1, 1, OpType.FC)
    out = search_candidates(_clustering([[conv], [fc]]), {OpType.CONV, OpType.FC})
    assert [bp.sequence for bp in out] == [(conv, fc)]
    assert dump_blueprint(out[0]) == "0 0 CONV 0\n1 1 FC 1"


def test_search_missing_op_type_is_empty():
    groups = [[LayerRef(0, 0, OpType.CONV)], [LayerRef(0, 1, OpType.CONV)]]
    assert search_candidates(_clustering(groups), {OpType.CONV, OpType.FC}) == []


def test_search_caps_candidates():
    groups = [[LayerRef(c, 0, OpType.FC) for c in range(10)], [LayerRef(c, 1, OpType.FC) for c in range(10)]]
    out = search_candidates(_clustering(groups), {OpType.FC}, max_candidates=3)
    assert len(out) == 3
    assert len({bp.key for bp in out}) == 3


@pytest.mark.parametrize("seed", range(25))
def test_search_matches_enumerator_and_rules(seed):
    cl = random_grouping(np.random.default_rng(1000 + seed))
    ops = {r.op_type for r in cl.refs}
    out = search_candidates(cl, ops)
    assert {bp.key for bp in out} == enumerate_candidates(cl, ops)
    for bp in out:
        assert rule_violations(bp, cl, ops, cl.k) == []
    assert len({bp.key for bp in out}) == len(out)


def test_blueprint_sets():
    bp = CandidateBlueprint((LayerRef(0, 0, OpType.CONV), LayerRef(2, 3, OpType.FC)), (1, 0))
    assert bp.op_set == {OpType.CONV, OpType.FC}
    assert bp.group_set == {0, 1}


def test_groups_numbered_shallow_to_deep():
    # two tight blocks: deep layers {3,4,5} and shallow layers {0,1,2}
    d = np.full((6, 6), 3.0)
    d[:3, :3] = 0.5
    d[3:, 3:] = 0.5
    np.fill_diagonal(d, 0)
    for seed in range(5):
        cl = group_layers(_refs(6), d, 2, seed=seed)
        assert [r.layer_index for r in cl.groups[0]] == [0, 1, 2]
        assert cl.medoids[0] in cl.groups[0] and cl.medoids[1] in cl.groups[1]
        assert all(cl.group_of(r) == g for g in range(2) for r in cl.groups[g])
