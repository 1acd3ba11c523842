"""
Build Query Node: ranks every group pair for one target shape and saves
the query list.
"""
import os

from src.nodes.base_node import BaseNode
from src.utils.logger import logger
from src.utils.policy import build_query_list, make_target, save_query_list


def query_filename(target):
    return f"query_{target}.qlist"


class BuildQueryNode(BaseNode):
    def prep(self, shared):
        config = shared["config"]
        return {
            "target": shared["args"].get("target") or config.policy.target,
            "config": config,
            "template": shared["template"],
            "workers": shared["workers"],
            "out": shared["out_dir"],
        }

    def exec(self, prep_res):
        config, template = prep_res["config"], prep_res["template"]
        target = make_target(prep_res["target"], template, config.sim, config.obs)
        query_list = build_query_list(target, template, config.sim, config.obs, config.policy.block_size,
                                      workers=prep_res["workers"], seed=config.seed,
                                      flip_params=config.flip, action_params=config.action)
        path = None
        if prep_res["out"]:
            path = save_query_list(os.path.join(prep_res["out"], query_filename(target.name)), query_list)
        return query_list, path

    def post(self, shared, prep_res, exec_res):
        query_list, path = exec_res
        shared["query_list"] = query_list
        if path:
            shared["outputs"].append(path)
        best = query_list.scores[0] if len(query_list) else float("nan")
        logger.info(f"Query list for {query_list.target}: {len(query_list)} pairs, best score {best:.4f}")
        shared["summary_text"] = f"{len(query_list)} ranked pairs for {query_list.target}; best score {best:.4f}"
