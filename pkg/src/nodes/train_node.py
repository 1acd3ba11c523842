"""
Train Node: supervised training with checkpoints and a metrics log.
"""
import os

from src.nodes.base_node import BaseNode
from src.utils.checkpoint import save_checkpoint
from src.utils.gnn import params_to_arrays
from src.utils.logger import logger
from src.utils.training import train


class TrainNode(BaseNode):
    def prep(self, shared):
        return shared["samples"], shared["template"], shared["config"], shared["out_dir"]

    def exec(self, prep_res):
        samples, template, config, out_dir = prep_res
        result = train(samples, template, config.gnn, config.train, config.loss, config.obs, out_dir=out_dir)
        final = os.path.join(out_dir, "model.ckpt")
        save_checkpoint(final, params_to_arrays(result.params))
        return result, final

    def post(self, shared, prep_res, exec_res):
        result, final = exec_res
        shared["train_result"] = result
        shared["outputs"].append(final)
        logger.info(f"Selected epoch {result.best_epoch + 1} (score {result.best_score:.4f}); saved {final}")
        shared["summary_text"] = f"Best epoch {result.best_epoch + 1}, checkpoint {final}"
