"""
Load Checkpoint Node: rebuilds the reconstruction network from a checkpoint.
"""
from src.nodes.base_node import BaseNode
from src.utils.checkpoint import load_checkpoint
from src.utils.errors import ConfigError
from src.utils.gnn import GnnModel, params_from_arrays
from src.utils.logger import logger


class LoadCheckpointNode(BaseNode):
    """
    Loads shared["args"]["ckpt"] into shared["model"]. Commands that can
    run without a network (oracle evaluation, ground-truth meshes) leave
    the model unset.
    """

    def prep(self, shared):
        args = shared["args"]
        needed = not args.get("oracle") and args.get("mesh_source", "recon") == "recon"
        return args.get("ckpt"), needed, shared["config"], shared["template"]

    def exec(self, prep_res):
        path, needed, config, template = prep_res
        if not path:
            if needed:
                raise ConfigError("--ckpt is required for this command")
            return None
        params = params_from_arrays(config.gnn, load_checkpoint(path))
        logger.info(f"Loaded {len(params)} tensors from {path}")
        return GnnModel(config.gnn, params, template)

    def post(self, shared, prep_res, exec_res):
        shared["model"] = exec_res
