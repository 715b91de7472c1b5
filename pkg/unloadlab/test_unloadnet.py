from collections import OrderedDict

import pytest
import numpy as np
from numpy import testing as nptest

from unloadlab import unloadnet, meshcore, datagen
from unloadlab import gradkernel as gk
from unloadlab.records import GlobalParams
from unloadlab.errors import (ConfigError, IsolatedNode, ShapeMismatch, UnknownVariant)

@pytest.fixture()
def small_config(request):
    return unloadnet.ModelConfig(hidden=8, heads=2, gat_layers=2, dropout=0.)

@pytest.fixture()
def toy_mesh(request):
    """Two tets sharing a face, five nodes"""
    nodes = [[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [0., 0., 1.], [1., 1., 1.]]
    return meshcore.TetMesh(nodes, [[0, 1, 2, 3], [1, 2, 3, 4]])

@pytest.fixture()
def lv_mesh(request):
    spec = datagen.ShapeSpec('lv', datagen.PARAMETRIC_ELLIPSOID,
                             [('a', 2.5), ('b', 2.2), ('long_axis', 8.), ('base_height', 0.5),
                              ('t_base', 1.), ('t_apex', 1.)])
    return datagen.build_shell_mesh(spec, datagen.MeshResolution.preset('coarse'))

PARAMS = GlobalParams(8., 100., 60., -60.)

def _toy_sample(mesh, target_scale=0.9):
    shrunk = mesh.with_nodes(mesh.nodes*target_scale, validate=False)
    return unloadnet.prepare_sample(mesh, PARAMS.normalized(), shrunk)

def test_config_validation():
    with pytest.raises(ConfigError):
        unloadnet.ModelConfig(hidden=10, heads=4)
    with pytest.raises(ConfigError):
        unloadnet.ModelConfig(dropout=1.)
    with pytest.raises(ConfigError):
        unloadnet.ModelConfig(conv='transformer')
    config = unloadnet.ModelConfig(pooling='max', fusion='concat')
    assert config.pooling == unloadnet.MAX and config.fusion == unloadnet.CONCAT
    assert unloadnet.ModelConfig.from_dict(config.to_dict()) == config
    assert config.head_dim == 32

def test_variants():
    a0 = unloadnet.variant_config('A0')
    assert a0 == unloadnet.ModelConfig()
    a5 = unloadnet.variant_config('A5')
    assert (a5.cycle, a5.fusion, a5.pooling, a5.conv, a5.dual_input) == \
        (False, unloadnet.CONCAT, unloadnet.NONE, unloadnet.GCN, False)
    assert unloadnet.variant_config('C6').pooling == unloadnet.MAX
    assert unloadnet.variant_config('C6').cycle
    with pytest.raises(UnknownVariant):
        unloadnet.variant_config('Z9')

def test_variant_parameters():
    base = unloadnet.ModelConfig(hidden=8, heads=2)
    a0 = unloadnet.init_params(unloadnet.variant_config('A0', base))
    assert 'conv0_a_src' in a0 and 'mesh_attn_Wq' in a0 and 'fusion_attn_Wq' in a0
    a2 = unloadnet.init_params(unloadnet.variant_config('A2', base))
    assert 'fusion_W' in a2 and a2['fusion_W'].shape == (16, 8)
    a3 = unloadnet.init_params(unloadnet.variant_config('A3', base))
    assert 'mesh_attn_Wq' not in a3
    a4 = unloadnet.init_params(unloadnet.variant_config('A4', base))
    assert 'conv0_a_src' not in a4
    a5 = unloadnet.init_params(unloadnet.variant_config('A5', base))
    assert a5['lift_W'].shape == (7, 8) and 'glob_W1' not in a5

def test_init_is_seeded(small_config):
    first = unloadnet.init_params(small_config, seed=3)
    second = unloadnet.init_params(small_config, seed=3)
    for name in first:
        nptest.assert_array_equal(first[name], second[name])
    assert np.all(first['ln1_gain'] == 1.) and np.all(first['lift_b'] == 0.)

def test_graph_construction(toy_mesh):
    graph = unloadnet.mesh_graph(toy_mesh)
    assert graph.n_edges == 2*9+5
    nptest.assert_array_equal(graph.in_degree(), [4, 5, 5, 5, 4])
    with pytest.raises(IsolatedNode):
        unloadnet.graph_from_edges([[0, 1]], 3, self_loops=False)

def test_batch_graphs(toy_mesh):
    graph = unloadnet.mesh_graph(toy_mesh)
    batched = unloadnet.batch_graphs([graph, graph])
    assert batched.n_nodes == 10 and batched.n_graphs == 2
    assert batched.src[graph.n_edges:].min() == 5
    nptest.assert_array_equal(batched.nodes_per_graph(), [5, 5])

def test_attention_weights_normalized(toy_mesh, small_config):
    model = unloadnet.UnloadNet(small_config, seed=1)
    sample = model.sample(toy_mesh, PARAMS)
    trace = {}
    model.forward(unloadnet.Batch([sample]), trace=trace)
    assert len(trace['alpha']) == small_config.gat_layers
    for alpha in trace['alpha']:
        sums = np.zeros((toy_mesh.n_nodes, small_config.heads))
        np.add.at(sums, sample.graph.dst, alpha)
        nptest.assert_allclose(sums, 1., atol=1e-12)
    nptest.assert_allclose(trace['mesh_attention'], 1.)
    nptest.assert_allclose(trace['fusion_attention'], 1.)

def test_single_node_attends_to_itself():
    graph = unloadnet.graph_from_edges(np.zeros((0, 2)), 1, self_loops=True)
    tape = gk.Tape()
    rng = np.random.default_rng(0)
    H = tape.constant(rng.normal(size=(1, 4)))
    trace = {}
    W = np.eye(4)
    out = unloadnet.gat_layer(H, graph, W, rng.normal(size=(2, 2)), rng.normal(size=(2, 2)),
                              2, trace=trace)
    nptest.assert_allclose(trace['alpha'][0], 1.)
    nptest.assert_allclose(out.values, np.maximum(H.values, 0.)+H.values)

def test_single_key_attention_returns_values():
    rng = np.random.default_rng(5)
    tape = gk.Tape()
    Q = tape.constant(rng.normal(size=(6, 4)))
    kv = tape.constant(rng.normal(size=(2, 4)))
    gid = np.array([0, 0, 0, 1, 1, 1])
    Wq, Wk, Wv = [rng.normal(size=(4, 4)) for _ in range(3)]
    out = unloadnet.single_key_attention(Q, kv, gid, Wq, Wk, Wv, heads=2)
    nptest.assert_allclose(out.values, kv.values.dot(Wv)[gid], atol=1e-12)

@pytest.mark.parametrize('variant', list(unloadnet.VARIANTS))
def test_permutation_equivariance(lv_mesh, variant):
    config = unloadnet.variant_config(variant, unloadnet.ModelConfig(hidden=8, heads=2,
                                                                     gat_layers=2, dropout=0.))
    model = unloadnet.UnloadNet(config, seed=2)
    perm = np.random.default_rng(0).permutation(lv_mesh.n_nodes)
    inverse = np.argsort(perm)
    permuted = meshcore.TetMesh(lv_mesh.nodes[perm], inverse[lv_mesh.tets])
    pred = model.predict_mesh(lv_mesh, PARAMS).nodes
    pred_perm = model.predict_mesh(permuted, PARAMS).nodes
    nptest.assert_allclose(pred_perm, pred[perm], rtol=1e-9, atol=1e-9)

def test_zero_decoder_is_identity(lv_mesh, small_config):
    model = unloadnet.UnloadNet(small_config, seed=0)
    model.params['dec_e_to_u_W2'][:] = 0.
    pred = model.predict_mesh(lv_mesh, PARAMS)
    nptest.assert_allclose(pred.nodes, lv_mesh.nodes, atol=1e-12)
    assert pred.same_topology(lv_mesh)

def test_loss_example():
    tape = gk.Tape()
    pred_u = tape.leaf(np.array([[0.1, 0., 0.]]))
    pred_ed = tape.leaf(np.array([[0.2, 0., 0.]]))
    zero = np.zeros((1, 3))
    value = unloadnet.loss(pred_u, zero, pred_ed, zero, 0.2)
    nptest.assert_allclose(value.values, 0.006)
    nptest.assert_allclose(unloadnet.loss(pred_u, zero, None, zero, 0.2).values, 0.01/3.)

def test_loss_shape_mismatch():
    tape = gk.Tape()
    with pytest.raises(ShapeMismatch):
        unloadnet.loss(tape.leaf(np.zeros((2, 3))), np.zeros((3, 3)), None, None, 0.2)

def test_loss_averages_graphs(toy_mesh, small_config):
    """A batch loss is the mean of the single-sample losses"""
    model = unloadnet.UnloadNet(small_config, seed=4)
    s1 = _toy_sample(toy_mesh, 0.9)
    s2 = _toy_sample(toy_mesh.with_nodes(toy_mesh.nodes*2.), 0.8)
    losses = [float(model.forward(unloadnet.Batch([s]))[3].values) for s in (s1, s2)]
    batched = float(model.forward(unloadnet.Batch([s1, s2]))[3].values)
    nptest.assert_allclose(batched, np.mean(losses), rtol=1e-10)

def test_batch_matches_single_predictions(toy_mesh, lv_mesh, small_config):
    model = unloadnet.UnloadNet(small_config, seed=4)
    s1 = model.sample(toy_mesh, PARAMS)
    s2 = model.sample(lv_mesh, GlobalParams(12., 200., 60., -60.))
    batch = unloadnet.Batch([s1, s2])
    _, _, out, total = model.forward(batch)
    assert total is None
    parts = batch.split(out.pred_u.values)
    for sample, part in zip((s1, s2), parts):
        _, _, single, _ = model.forward(unloadnet.Batch([sample]))
        nptest.assert_allclose(part, single.pred_u.values, rtol=1e-10, atol=1e-12)

@pytest.mark.parametrize('variant', ['A0', 'A2', 'A5', 'C6'])
def test_network_gradients(toy_mesh, variant):
    config = unloadnet.variant_config(variant, unloadnet.ModelConfig(hidden=4, heads=2,
                                                                     gat_layers=1, dropout=0.))
    model = unloadnet.UnloadNet(config, seed=7)
    batch = unloadnet.Batch([_toy_sample(toy_mesh)])
    names = list(model.params)

    def fn(*leaves):
        params = OrderedDict(zip(names, leaves))
        coords = leaves[0].tape.constant(batch.coords_ed)
        out = unloadnet.forward_cycle(coords, batch.globals_norm, batch.graph, params, config)
        return unloadnet.loss(out.pred_u, batch.coords_u, out.pred_ed, batch.coords_ed,
                              config.lambda_cycle, batch.graph)
    report = gk.gradcheck(fn, [model.params[n] for n in names], tol=1e-4, n_coords=4)
    assert report.passed, repr(report)

def test_cycle_gradients_reach_second_decoder(toy_mesh, small_config):
    batch = unloadnet.Batch([_toy_sample(toy_mesh)])
    model = unloadnet.UnloadNet(small_config, seed=0)
    tape, leaves, out, total = model.forward(batch, training=True,
                                             rng=np.random.default_rng(0))
    tape.backward(total)
    assert leaves['dec_u_to_e_W2'].grad is not None
    assert out.pred_ed is not None

    model = unloadnet.UnloadNet(small_config.replace(cycle=False), seed=0)
    tape, leaves, out, total = model.forward(batch, training=True,
                                             rng=np.random.default_rng(0))
    tape.backward(total)
    assert leaves['dec_u_to_e_W2'].grad is None
    assert out.pred_ed is None

def test_sample_mismatch(toy_mesh, lv_mesh):
    with pytest.raises(ShapeMismatch):
        unloadnet.prepare_sample(lv_mesh, PARAMS.normalized(), toy_mesh)

def test_params_must_match_config(small_config):
    params = unloadnet.init_params(small_config.replace(conv=unloadnet.GCN))
    with pytest.raises(ShapeMismatch):
        unloadnet.UnloadNet(small_config, params=params)

def test_sample_targets_share_transform(toy_mesh):
    sample = _toy_sample(toy_mesh, 0.5)
    nptest.assert_allclose(sample.transform.invert(sample.coords_u), 0.5*toy_mesh.nodes,
                           atol=1e-12)
    nptest.assert_allclose(sample.coords_ed.mean(axis=0), 0., atol=1e-12)
