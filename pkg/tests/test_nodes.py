import json
import os

import numpy as np
import pytest
from pocketflow import Flow

from flow import create_manipulate_flow, create_reconstruct_flow
from helpers import bumped
from src.main import create_flow, main, parse_overrides
from src.nodes.base_node import BaseNode
from src.utils.checkpoint import save_checkpoint
from src.utils.dataset_io import read_pgm, read_record
from src.utils.errors import ConfigError
from src.utils.gnn import init_params, params_to_arrays
from src.utils.observation import observe


class _Failing(BaseNode):
    def __init__(self, error):
        super().__init__()
        self.error = error

    def exec(self, prep_res):
        raise self.error


class _Recorder(BaseNode):
    def post(self, shared, prep_res, exec_res):
        shared["ran"] = True


def node_names(flow):
    names, node = [], flow.start_node
    while node is not None:
        names.append(type(node).__name__)
        node = node.successors.get("default")
    return names


SMALL = ["--set", "mesh.rows=5", "--set", "mesh.cols=5", "--set", "obs.resolution=32",
         "--set", "obs.silhouette_resolution=16"]


def test_package_errors_are_recorded():
    shared = {}
    _Failing(ConfigError("bad key"))._run(shared)
    assert shared["error"] == "_Failing: bad key"


def test_unexpected_errors_are_recorded():
    shared = {}
    _Failing(KeyError("samples"))._run(shared)
    assert shared["error"].startswith("_Failing error:")


def test_later_nodes_are_skipped_after_an_error():
    first = _Failing(ConfigError("stop"))
    first >> _Recorder()
    shared = {}
    Flow(start=first).run(shared)
    assert "ran" not in shared
    shared = {}
    Flow(start=_Recorder()).run(shared)
    assert shared["ran"]


def test_parse_overrides():
    assert parse_overrides(["sim.substeps=5", " policy.target=flat"]) == {"sim.substeps": "5", "policy.target": "flat"}
    assert parse_overrides(None) == {}
    assert parse_overrides(["a.b=x=y"]) == {"a.b": "x=y"}
    with pytest.raises(ConfigError):
        parse_overrides(["sim.substeps"])


def test_flow_layout():
    assert node_names(create_reconstruct_flow()) == ["LoadConfigNode", "LoadCheckpointNode", "ReconstructNode"]
    assert "BuildQueryNode" in node_names(create_manipulate_flow(build_query=True))
    assert "BuildQueryNode" not in node_names(create_flow({"command": "manipulate", "arms": 1}))
    assert "BuildQueryNode" not in node_names(create_flow({"command": "manipulate", "arms": 2, "query": "q"}))
    assert "BuildQueryNode" in node_names(create_flow({"command": "manipulate", "arms": 2}))


def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--seeds", "1", "--out", str(out)]) == 0
    assert "ops within" in capsys.readouterr().out
    with open(out / "gradcheck.json") as fh:
        assert json.load(fh)["seeds"] == 1
    assert os.path.exists(out / "resolved_config.env")


def test_unknown_setting_fails(tmp_path, capsys):
    assert main(["gradcheck", "--seeds", "1", "--out", str(tmp_path), "--set", "sim.colour=red"]) == 1
    assert "unknown configuration key" in capsys.readouterr().err


def test_malformed_setting_fails(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path), "--set", "sim.timestep"]) == 1
    assert "key=value" in capsys.readouterr().err


def test_train_without_dataset_fails(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "run")]) == 1
    assert "manifest.json" in capsys.readouterr().err


def test_manipulate_recon_needs_checkpoint(tmp_path, capsys):
    code = main(["manipulate", "--arms", "1", "--target", "flat", "--mesh-source", "recon",
                 "--out", str(tmp_path)] + SMALL)
    assert code == 1
    assert "--ckpt" in capsys.readouterr().err


@pytest.mark.slow
def test_generated_data_is_reproducible(tmp_path):
    for name in ("a", "b"):
        args = ["gen-data", "--count", "3", "--seed", "11", "--out", str(tmp_path / name)] + SMALL
        assert main(args) == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == sorted(os.listdir(tmp_path / "b"))
    assert [f for f in files if f.endswith(".rec")] == [
        "drag_0000000011.rec", "drop_0000000013.rec", "fold_0000000012.rec"]
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    report_dir = tmp_path / "report"
    assert main(["eval-recon", "--data", str(tmp_path / "a"), "--oracle", "--out", str(report_dir)] + SMALL) == 0
    with open(report_dir / "report.json") as fh:
        report = json.load(fh)
    assert report["counts"] == {"drag": 1, "fold": 1, "drop": 1}
    assert all(value == pytest.approx(0.0, abs=1e-9) for value in report["average"].values())


@pytest.mark.slow
def test_single_arm_manipulation(tmp_path):
    args = ["manipulate", "--arms", "1", "--target", "flat", "--tier", "drag", "--count", "1",
            "--set", "policy.block_size=5", "--set", "policy.episodes_single=2", "--out", str(tmp_path)] + SMALL
    assert main(args) == 0
    with open(tmp_path / "summary.json") as fh:
        summary = json.load(fh)
    assert summary["metric"] == "coverage"
    assert len(summary["summary"]["all"]["mean"]) == 3
    with open(tmp_path / "traces.jsonl") as fh:
        assert json.loads(fh.readline())["policy"] == "single"


def test_reconstruct_command(tmp_path, template5, obs_config, tiny_gnn, capsys):
    obs, _ = observe(bumped(template5), obs_config, template5.canonical_extent)
    depth_path = str(tmp_path / "depth.npy")
    np.save(depth_path, obs.image * obs.depth_scale)
    ckpt = str(tmp_path / "model.ckpt")
    save_checkpoint(ckpt, params_to_arrays(init_params(tiny_gnn, 0)))
    network = ["--set", "gnn.encoder_channels=4,8", "--set", "gnn.vertex_dim=8", "--set", "gnn.edge_dim=8",
               "--set", "gnn.hidden_dim=8", "--set", "gnn.iterations=2"]
    out = tmp_path / "recon"
    args = ["reconstruct", "--depth-file", depth_path, "--ckpt", ckpt,
            "--tta", "--refine", "2", "--out", str(out)] + SMALL + network
    assert main(args) == 0
    assert "pixel agreement" in capsys.readouterr().out
    record = read_record(str(out / "reconstruction.rec"))
    assert record.tier == "reconstructed" and record.positions.shape == (25, 3)
    assert set(np.unique(read_pgm(str(out / "overlay.pgm")))) <= {0, 85, 170, 255}


def test_reconstruct_rejects_unknown_files(tmp_path, tiny_gnn, capsys):
    ckpt = str(tmp_path / "model.ckpt")
    save_checkpoint(ckpt, params_to_arrays(init_params(tiny_gnn, 0)))
    (tmp_path / "depth.png").write_bytes(b"")
    network = ["--set", "gnn.encoder_channels=4,8", "--set", "gnn.vertex_dim=8", "--set", "gnn.edge_dim=8",
               "--set", "gnn.hidden_dim=8", "--set", "gnn.iterations=2"]
    args = ["reconstruct", "--depth-file", str(tmp_path / "depth.png"), "--ckpt", ckpt,
            "--out", str(tmp_path / "recon")] + SMALL + network
    assert main(args) == 1
    assert "unsupported depth file" in capsys.readouterr().err
