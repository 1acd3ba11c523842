"""
Gradcheck Node: finite-difference check of every registered differentiable op.
"""
import json
import os

from src.nodes.base_node import BaseNode
from src.utils.gradcheck import DEFAULT_TOLERANCE, run_suite


class GradCheckNode(BaseNode):
    def prep(self, shared):
        args = shared["args"]
        return int(args.get("seeds") or 10), float(args.get("tolerance") or DEFAULT_TOLERANCE), shared.get("out_dir")

    def exec(self, prep_res):
        n_seeds, tolerance, out_dir = prep_res
        worst = run_suite(seeds=range(n_seeds), tolerance=tolerance)
        path = None
        if out_dir:
            path = os.path.join(out_dir, "gradcheck.json")
            with open(path, "w") as fh:
                json.dump({"tolerance": tolerance, "seeds": n_seeds, "worst": worst}, fh, indent=2, sort_keys=True)
        return worst, tolerance, path

    def post(self, shared, prep_res, exec_res):
        worst, tolerance, path = exec_res
        shared["gradcheck"] = worst
        if path:
            shared["outputs"].append(path)
        failing = sorted(name for name, err in worst.items() if not err < tolerance)
        if failing:
            shared["error"] = f"gradient check failed for {', '.join(failing)}"
        else:
            shared["summary_text"] = f"All {len(worst)} ops within {tolerance:g}"
