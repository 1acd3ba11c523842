"""
Finetune Node: pixel-wise tuning of a trained model on observations alone.
"""
import os

from src.nodes.base_node import BaseNode
from src.utils.checkpoint import save_checkpoint
from src.utils.gnn import params_to_arrays
from src.utils.training import finetune_pixelwise, sample_observation


class FinetuneNode(BaseNode):
    """Ground-truth meshes in the dataset are ignored; only the depth images are used."""

    def prep(self, shared):
        return (shared["model"], shared["samples"], shared["template"], shared["config"],
                int(shared["args"].get("epochs") or 1), shared["out_dir"])

    def exec(self, prep_res):
        model, samples, template, config, epochs, out_dir = prep_res
        observations = [sample_observation(s, template, config.obs.depth_scale) for s in samples]
        params, curve = finetune_pixelwise(model, observations, epochs, config.train, config.loss, config.obs)
        path = os.path.join(out_dir, "finetuned.ckpt")
        save_checkpoint(path, params_to_arrays(params))
        return curve, path

    def post(self, shared, prep_res, exec_res):
        curve, path = exec_res
        shared["outputs"].append(path)
        tail = f"{curve[0]:.5f} -> {curve[-1]:.5f}" if curve else "no epochs run"
        shared["summary_text"] = f"Pixel-wise loss {tail}; saved {path}"
