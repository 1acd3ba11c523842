import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from helpers import bumped, make_sample
from src.utils.autodiff import Tape, backward
from src.utils.errors import ConfigError
from src.utils.gnn import (
    GnnConfig, GnnModel, init_params, param_shapes, params_from_arrays, params_to_arrays,
    reconstruct_with_tta, to_world,
)
from src.utils.losses import loss_vtx
from src.utils.mesh import ClothMesh


def permuted(mesh, perm):
    """The same cloth with vertex k of the result being vertex perm[k] of `mesh`."""
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    edges = inverse[mesh.edges]
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return ClothMesh(
        n_rows=mesh.n_rows, n_cols=mesh.n_cols, positions=mesh.positions[perm], flags=mesh.flags[perm],
        edges=edges[order], rest_lengths=mesh.rest_lengths[order], edge_kinds=mesh.edge_kinds[order],
        template=mesh.template[perm],
    )


@pytest.fixture
def image():
    rng = np.random.default_rng(0)
    out = np.zeros((32, 32))
    out[8:24, 8:24] = rng.uniform(0.01, 0.2, size=(16, 16))
    return out


def test_parameter_layout(tiny_gnn):
    names = [name for name, _ in param_shapes(tiny_gnn)]
    assert names[:4] == ["enc.0.w", "enc.0.b", "enc.1.w", "enc.1.b"]
    assert sum(name.startswith("upd.") for name in names) == 2 * 3 * 4
    shared = GnnConfig(encoder_channels=(4, 8), vertex_dim=8, edge_dim=8, hidden_dim=8, iterations=2,
                       shared_updaters=True)
    assert sum(name.startswith("upd.") for name, _ in param_shapes(shared)) == 3 * 4


def test_config_validation():
    with pytest.raises(ValueError):
        GnnConfig(iterations=0)
    with pytest.raises(ValueError):
        GnnConfig(encoder_channels=())


def test_init_is_seeded(tiny_gnn):
    a = init_params(tiny_gnn, 3)
    b = init_params(tiny_gnn, 3)
    for name in a:
        assert_array_equal(a[name].data, b[name].data)
    assert a["enc.0.w"].dtype == np.float32
    assert not np.any(a["mlp_d.1.b"].data)


def test_forward_shapes(tiny_gnn, template5, image):
    model = GnnModel(tiny_gnn, init_params(tiny_gnn, 0), template5)
    trace = model.features(image)
    assert len(trace) == tiny_gnn.iterations + 1
    assert trace[0].attention is None
    assert trace[-1].vertices.shape == (25, tiny_gnn.vertex_dim)
    assert trace[-1].edges.shape == (template5.n_edges, tiny_gnn.edge_dim)
    assert model.forward(image).shape == (25, 3)


def test_attention_weights_sum_to_one_per_vertex(tiny_gnn, template5, image):
    model = GnnModel(tiny_gnn, init_params(tiny_gnn, 0), template5)
    weights = model.features(image)[-1].attention.data.reshape(-1)
    sums = np.bincount(template5.edges[:, 0], weights=weights)
    assert_allclose(sums, 1.0, rtol=1e-5)


def test_mean_pooling_without_attention(template5, image):
    config = GnnConfig(encoder_channels=(4, 8), vertex_dim=8, edge_dim=8, hidden_dim=8, iterations=2,
                       attention=False)
    params = init_params(config, 0)
    assert not any(".attn." in name for name in params)
    weights = GnnModel(config, params, template5).features(image)[-1].attention.data.reshape(-1)
    degree = np.bincount(template5.edges[:, 0])
    assert_allclose(weights, 1.0 / degree[template5.edges[:, 0]], rtol=1e-6)


def test_vertex_order_permutes_the_output(tiny_gnn, template5, image):
    params = init_params(tiny_gnn, 1, dtype=np.float64)
    perm = np.random.default_rng(2).permutation(25)
    out = GnnModel(tiny_gnn, params, template5).predict(image)
    out_perm = GnnModel(tiny_gnn, params, permuted(template5, perm)).predict(image)
    assert_allclose(out_perm, out[perm], rtol=1e-9, atol=1e-12)


def test_row_column_relabeling_transposes_the_output(tiny_gnn, template5, image):
    symmetric = 0.5 * (image + image.T)
    grid = np.arange(25).reshape(5, 5)
    perm = grid.T.reshape(-1)
    transposed = permuted(template5, perm)
    # the relabeled template is the original mirrored across the diagonal
    assert_allclose(transposed.template[:, :2], template5.template[:, 1::-1])
    params = init_params(tiny_gnn, 3, dtype=np.float64)
    out = GnnModel(tiny_gnn, params, template5).predict(symmetric)
    out_t = GnnModel(tiny_gnn, params, transposed).predict(symmetric.T)
    assert_allclose(out_t, out[perm], rtol=1e-9, atol=1e-12)


def test_gradients_reach_every_parameter_group(tiny_gnn, template5, image):
    params = init_params(tiny_gnn, 0, dtype=np.float64)
    model = GnnModel(tiny_gnn, params, template5)
    with Tape() as tape:
        loss = loss_vtx(model.forward(image), template5.template)
    grads = backward(tape, loss)
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    for prefix in ("enc.", "mlp_v.", "mlp_e.", "upd.", "mlp_d."):
        assert any(np.any(grads[t]) for name, t in params.items() if name.startswith(prefix)), prefix


def test_prediction_is_in_meters(tiny_gnn, template5, image):
    model = GnnModel(tiny_gnn, init_params(tiny_gnn, 0), template5)
    normalized = model.forward(image).data.astype(np.float64)
    assert_allclose(model.predict(image), normalized * 0.3, rtol=1e-6)


def test_reconstruct_sets_visibility(tiny_gnn, template5, image, obs_config):
    _, obs = make_sample(template5, bumped(template5), obs_config)
    mesh = GnnModel(tiny_gnn, init_params(tiny_gnn, 0), template5).reconstruct(obs)
    assert mesh.positions.shape == (25, 3)
    assert mesh.flags.dtype == bool and mesh.flags.shape == (25,)


def test_tta_keeps_lowest_score_and_first_on_ties(tiny_gnn, template5, obs_config):
    _, obs = make_sample(template5, bumped(template5), obs_config)
    model = GnnModel(tiny_gnn, init_params(tiny_gnn, 0), template5)
    scores = iter([5.0, 4.0, 3.0, 1.0, 2.0, 1.0, 6.0, 7.0])
    _, k, seen = reconstruct_with_tta(model, obs, lambda mesh, o: next(scores))
    assert k == 3
    assert seen == [5.0, 4.0, 3.0, 1.0, 2.0, 1.0, 6.0, 7.0]
    _, k, _ = reconstruct_with_tta(model, obs, lambda mesh, o: 0.0)
    assert k == 0


def test_to_world_restores_table_position(template5, obs_config):
    world = bumped(template5)
    _, obs = make_sample(template5, world.with_positions(world.positions + [0.1, 0.0, 0.0]), obs_config)
    centered = world.with_positions(world.positions - [world.positions[:, 0].mean(), 0.0, 0.0])
    assert_allclose(to_world(centered, obs).positions[:, 0].mean(), 0.1 + world.positions[:, 0].mean(), atol=1e-12)


def test_checkpoint_arrays_round_trip(tiny_gnn):
    params = init_params(tiny_gnn, 0)
    rebuilt = params_from_arrays(tiny_gnn, params_to_arrays(params))
    for name in params:
        assert_array_equal(rebuilt[name].data, params[name].data)
        assert rebuilt[name].requires_grad


def test_checkpoint_from_another_config(tiny_gnn):
    arrays = params_to_arrays(init_params(tiny_gnn, 0))
    bigger = GnnConfig(encoder_channels=(4, 8), vertex_dim=16, edge_dim=8, hidden_dim=8, iterations=2)
    with pytest.raises(ConfigError):
        params_from_arrays(bigger, arrays)
    del arrays["mlp_d.1.b"]
    with pytest.raises(ConfigError):
        params_from_arrays(tiny_gnn, arrays)
