"""
Load Config Node: resolves the run configuration and the template mesh.
"""
import os

from src.nodes.base_node import BaseNode
from src.utils.config import RESOLVED_NAME, env_workers, load_config, save_config
from src.utils.logger import logger


class LoadConfigNode(BaseNode):
    """
    Reads shared["args"] (config path, preset, output directory, worker
    count), builds the RunConfig and template, and writes the resolved
    configuration next to the command's outputs.
    """

    def prep(self, shared):
        args = shared.get("args", {})
        return {
            "config": args.get("config"),
            "preset": args.get("preset") or "desk",
            "out": args.get("out"),
            "workers": args.get("workers"),
            "overrides": args.get("overrides") or {},
        }

    def exec(self, prep_res):
        config = load_config(prep_res["config"], prep_res["preset"], prep_res["overrides"])
        template = config.mesh.build()
        workers = prep_res["workers"] or env_workers()
        resolved = None
        if prep_res["out"]:
            os.makedirs(prep_res["out"], exist_ok=True)
            resolved = save_config(os.path.join(prep_res["out"], RESOLVED_NAME), config)
        return config, template, workers, resolved

    def post(self, shared, prep_res, exec_res):
        config, template, workers, resolved = exec_res
        shared["config"] = config
        shared["template"] = template
        shared["workers"] = workers
        shared["out_dir"] = prep_res["out"]
        shared.setdefault("outputs", [])
        if resolved:
            shared["outputs"].append(resolved)
        logger.info(f"Configuration ready: preset {prep_res['preset']}, {template.n_rows}x{template.n_cols} mesh, "
                    f"{config.obs.resolution}px observations, {workers} worker(s)")
