import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.utils.actions import gen_tier
from src.utils.errors import FormatError, PolicyError
from src.utils.mesh import MeshGroup, make_template
from src.utils.observation import ObservationConfig
from src.utils.policy import (
    EpisodeTrace, MeshSource, QueryList, TargetSpec, all_pairs, build_query_list, canonical_silhouette,
    center_silhouette, coverage, format_summary, load_query_list, make_target, rescore_query_list,
    run_dual_arm_episode, run_single_arm_episode, save_query_list, select_pair, select_ranked, similarity,
    single_arm_step, summarize,
)
from src.utils.sim import canonical_state


def group_of(flags, centroids=None, grasp=None):
    n = len(flags)
    return MeshGroup(
        group_rows=1, group_cols=n, block_size=1,
        centroids=np.zeros((n, 3)) if centroids is None else np.asarray(centroids, dtype=np.float64),
        flags=np.asarray(flags, dtype=bool),
        members=np.arange(n).reshape(n, 1),
        grasp=np.arange(10, 10 + n) if grasp is None else np.asarray(grasp),
    )


def query_of(pairs, scores, size=4):
    return QueryList(target="flat", pairs=np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
                     silhouettes=np.zeros((len(pairs), size, size), dtype=np.uint8),
                     scores=np.asarray(scores, dtype=np.float64), block_size=3)


def square(n=13, top=2, left=3, side=5):
    s = np.zeros((n, n))
    s[top:top + side, left:left + side] = 1.0
    return s


def test_pair_enumeration():
    assert all_pairs(3) == [(0, 1), (0, 2), (1, 2)]
    assert len(all_pairs(49)) == 1176
    assert all_pairs(1) == []


def test_similarity_ignores_position():
    assert similarity(square(), square()) == pytest.approx(1.0)
    assert similarity(square(top=6, left=0), square()) == pytest.approx(1.0)
    assert similarity(square(side=3), square(side=5)) < 1.0
    assert center_silhouette(square()).sum() == 25


def test_similarity_with_empty_reference():
    empty = np.zeros((12, 12))
    assert similarity(empty, empty) == 1.0
    assert similarity(square(), empty) == -math.inf


def test_coverage(template5, sim_params, obs_config):
    flat = canonical_silhouette(template5, sim_params, obs_config)
    assert coverage(flat, float(flat.sum())) == pytest.approx(1.0)
    assert coverage(square(), 50.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        coverage(flat, 0.0)


def test_target_silhouettes(template9, sim_params, obs_config):
    flat = make_target("flat", template9, sim_params, obs_config)
    triangle = make_target("triangle", template9, sim_params, obs_config)
    rectangle = make_target("rectangle", template9, sim_params, obs_config)
    area = flat.silhouette.sum()
    assert area == canonical_silhouette(template9, sim_params, obs_config).sum()
    assert 0.4 * area < triangle.silhouette.sum() < 0.6 * area
    assert 0.4 * area < rectangle.silhouette.sum() < 0.6 * area
    assert (flat.episodes, triangle.episodes, rectangle.episodes) == (2, 1, 1)
    with pytest.raises(PolicyError):
        make_target("circle", template9, sim_params, obs_config)


def test_select_pair_skips_unstable_and_hidden_groups():
    query = query_of([(0, 1), (0, 2), (1, 2)], [-math.inf, 0.5, 0.3])
    assert select_pair(group_of([True, True, True]), query) == (10, 12)
    assert select_pair(group_of([True, False, True]), query) == (10, 12)
    assert select_pair(group_of([True, True, False]), query) is None
    with pytest.raises(PolicyError):
        select_pair(group_of([True]), query_of([], []))


def test_select_ranked_returns_the_expected_score():
    query = query_of([(0, 1), (0, 2), (1, 2)], [-math.inf, 0.5, 0.3])
    assert select_ranked(group_of([True, True, True]), query) == ((10, 12), 0.5)
    assert select_ranked(group_of([False, True, True]), query) == ((11, 12), 0.3)
    assert select_ranked(group_of([True, False, False]), query) is None


def test_rescore_reranks_stored_outcomes():
    query = query_of([(0, 1), (0, 2), (1, 2)], [0.9, 0.5, -math.inf], size=13)
    query.silhouettes[0] = square(side=3)
    query.silhouettes[1] = square(side=5)
    query.silhouettes[2] = square(side=5)
    rescored = rescore_query_list(query, TargetSpec("rectangle", square(side=5), 1))
    assert rescored.target == "rectangle"
    assert_array_equal(rescored.pairs, [(0, 2), (0, 1), (1, 2)])
    assert rescored.scores[0] == pytest.approx(1.0)
    assert rescored.scores[1] < 1.0
    assert rescored.scores[2] == -math.inf
    assert_array_equal(rescored.silhouettes[0], square(side=5))


def test_single_arm_step_drags_farthest_visible_group():
    centroids = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.5, 0.5, 0.0]]
    targets = np.zeros((3, 3))
    drag = single_arm_step(group_of([True, True, False], centroids), targets)
    assert (drag.group, drag.vertex) == (1, 11)
    assert drag.distance == pytest.approx(0.1)
    assert_array_equal(drag.displacement, [-0.1, 0.0])
    tie = single_arm_step(group_of([True, True], [[0.1, 0.0, 0.0], [0.0, 0.1, 0.0]]), np.zeros((2, 3)))
    assert tie.group == 0
    with pytest.raises(PolicyError):
        single_arm_step(group_of([False, False], [[0.0, 0.0, 0.0]] * 2), np.zeros((2, 3)))


def test_query_list_file(tmp_path):
    query = query_of([(0, 3), (1, 2)], [0.9, -math.inf], size=6)
    query.silhouettes[0, 2:4, 1:5] = 1
    path = save_query_list(str(tmp_path / "q.qlist"), query)
    loaded = load_query_list(path)
    assert loaded.target == "flat" and loaded.block_size == 3 and len(loaded) == 2
    assert_array_equal(loaded.pairs, query.pairs)
    assert_array_equal(loaded.scores, query.scores)
    assert_array_equal(loaded.silhouettes, query.silhouettes)


def test_query_list_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.qlist"
    bad.write_bytes(b"NOTAQUERY" + bytes(32))
    with pytest.raises(FormatError):
        load_query_list(str(bad))
    path = save_query_list(str(tmp_path / "q.qlist"), query_of([(0, 1)], [0.5], size=6))
    with open(path, "rb") as fh:
        blob = fh.read()
    short = tmp_path / "short.qlist"
    short.write_bytes(blob[:-5])
    with pytest.raises(FormatError):
        load_query_list(str(short))


def test_query_list_with_a_single_group(sim_params, obs_config):
    mesh = make_template(3, 3, 0.3)
    target = make_target("flat", mesh, sim_params, obs_config)
    query = build_query_list(target, mesh, sim_params, obs_config, block_size=3)
    assert len(query) == 0
    assert query.silhouettes.shape == (0, 32, 32)


@pytest.mark.slow
def test_query_list_is_ranked(template9, sim_params, obs_config):
    target = make_target("triangle", template9, sim_params, obs_config)
    query = build_query_list(target, template9, sim_params, obs_config, block_size=3)
    assert len(query) == 36
    assert np.all(np.diff(query.scores) <= 0)
    assert {tuple(p) for p in query.pairs} == set(all_pairs(9))
    assert query.silhouettes.dtype == np.uint8


def test_mesh_source_validation(template5, obs_config, sim_params):
    with pytest.raises(PolicyError):
        MeshSource("recon", obs_config)
    with pytest.raises(PolicyError):
        MeshSource("oracle", obs_config)
    state = canonical_state(template5, sim_params)
    assert_array_equal(MeshSource("gt", obs_config)(state).positions, state.positions)


def test_single_arm_on_flat_cloth_is_done(template9, sim_params, obs_config):
    state = canonical_state(template9, sim_params)
    trace = run_single_arm_episode(state, MeshSource("gt", obs_config), obs_config, block_size=3, episodes=4)
    assert [a["action"] for a in trace.actions] == ["done"] * 4
    assert trace.metrics == pytest.approx([1.0] * 5)
    assert not trace.failed


def test_dual_arm_without_usable_pairs_records_noops(template9, sim_params, obs_config):
    state = canonical_state(template9, sim_params)
    target = make_target("flat", template9, sim_params, obs_config)
    query = query_of([(0, 1), (2, 3)], [-math.inf, -math.inf], size=32)
    trace = run_dual_arm_episode(state, target, query, MeshSource("gt", obs_config), obs_config, block_size=3)
    assert trace.actions == [{"action": "noop"}] * 2
    assert trace.metrics == pytest.approx([1.0] * 3)


def test_summary_per_tier_and_overall():
    traces = [
        EpisodeTrace(seed=0, tier="flat", policy="dual", target="flat", mesh_source="gt", metrics=[0.5, 1.0]),
        EpisodeTrace(seed=1, tier="drag", policy="dual", target="flat", mesh_source="gt", metrics=[0.3, 0.6]),
    ]
    summary = summarize(traces)
    assert summary["all"]["count"] == 2
    assert summary["all"]["mean"] == pytest.approx([0.4, 0.8])
    assert summary["flat"]["std"] == [0.0, 0.0]
    text = format_summary(summary, "coverage")
    assert "drag" in text and "coverage by episode" in text
    assert traces[0].to_record()["metrics"] == [0.5, 1.0]


def test_dual_arm_leaves_a_flat_cloth_flat(template9, sim_params, obs_config):
    state = canonical_state(template9, sim_params)
    target = make_target("flat", template9, sim_params, obs_config)
    query = query_of([(0, 1)], [0.9], size=32)
    trace = run_dual_arm_episode(state, target, query, MeshSource("gt", obs_config), obs_config, block_size=3)
    assert [a["action"] for a in trace.actions] == ["done", "done"]
    assert min(trace.metrics) >= 0.98
    assert state.step_count == 0


@pytest.mark.slow
def test_single_arm_recovers_dragged_cloth(template9, sim_params):
    config = ObservationConfig()
    final = []
    for seed in range(5):
        _, state = gen_tier("drag", seed, template9, sim_params)
        trace = run_single_arm_episode(state, MeshSource("gt", config), config, block_size=3, episodes=2)
        assert not trace.failed
        final.append(trace.metrics[-1])
    assert sum(c >= 0.9 for c in final) >= 4


@pytest.mark.slow
def test_shape_targets_reach_their_best_flip(template9, sim_params, obs_config):
    triangle = make_target("triangle", template9, sim_params, obs_config)
    rectangle = make_target("rectangle", template9, sim_params, obs_config)
    query = build_query_list(triangle, template9, sim_params, obs_config, block_size=3)
    for target, ranked in ((triangle, query), (rectangle, rescore_query_list(query, rectangle))):
        state = canonical_state(template9, sim_params)
        trace = run_dual_arm_episode(state, target, ranked, MeshSource("gt", obs_config), obs_config,
                                     block_size=3)
        assert trace.actions[0]["action"] == "flip"
        assert trace.metrics[-1] == pytest.approx(ranked.scores[0])
        assert trace.metrics[-1] >= 0.75, target.name
