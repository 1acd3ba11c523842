"""
Evaluate Node: per-tier reconstruction report.
"""
import json
import os

from src.nodes.base_node import BaseNode
from src.utils.training import evaluate, tta_predictions


class EvaluateNode(BaseNode):
    """Scores the model (or, with --oracle, the ground truth itself) on every sample."""

    def prep(self, shared):
        args = shared["args"]
        return (shared.get("model"), shared["samples"], shared["template"], shared["config"],
                bool(args.get("oracle")), bool(args.get("tta")), shared["out_dir"])

    def exec(self, prep_res):
        model, samples, template, config, oracle, tta, out_dir = prep_res
        if oracle:
            predictions = [(s.positions, s.flags) for s in samples]
        elif tta:
            predictions = tta_predictions(model, samples, config.loss, config.obs)
        else:
            predictions = None
        report = evaluate(model, samples, config.loss, config.obs, predictions=predictions, mesh=template)
        paths = []
        if out_dir:
            table_path = os.path.join(out_dir, "report.txt")
            with open(table_path, "w") as fh:
                fh.write(report.format_table() + "\n")
            json_path = os.path.join(out_dir, "report.json")
            with open(json_path, "w") as fh:
                json.dump({"tiers": report.tiers, "average": report.average, "counts": report.counts}, fh,
                          indent=2, sort_keys=True)
            paths = [table_path, json_path]
        return report, paths

    def post(self, shared, prep_res, exec_res):
        report, paths = exec_res
        shared["report"] = report
        shared["outputs"].extend(paths)
        shared["summary_text"] = report.format_table()
