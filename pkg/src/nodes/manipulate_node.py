"""
Manipulate Node: runs the single- or dual-arm episode harness over seeded
initial states and tabulates the metric per episode.
"""
import concurrent.futures
import json
import os

from src.nodes.base_node import BaseNode
from src.utils.actions import TIERS, gen_tier
from src.utils.errors import ConfigError, PolicyError
from src.utils.logger import logger
from src.utils.policy import (EpisodeTrace, MeshSource, format_summary, load_query_list, make_target,
                              run_dual_arm_episode, run_single_arm_episode, summarize)
from src.utils.training import PixelScorer


def run_trial(tier, seed, arms, target, query_list, source_kind, model, template, config, tta):
    """One seeded initial state taken through the full episode budget."""
    _, state = gen_tier(tier, seed, template, config.sim, config.action)
    scorer = PixelScorer(template, config.loss, config.obs, seed=seed) if source_kind == "recon" else None
    source = MeshSource(source_kind, config.obs, model=model, scorer=scorer, tta=tta)
    if arms == 2:
        trace = EpisodeTrace(seed=seed, tier=tier, policy="dual", target=target.name, mesh_source=source_kind)
        return run_dual_arm_episode(state, target, query_list, source, config.obs, config.policy.block_size,
                                    flip_params=config.flip, action_params=config.action, trace=trace)
    trace = EpisodeTrace(seed=seed, tier=tier, policy="single", target="flat", mesh_source=source_kind)
    return run_single_arm_episode(state, source, config.obs, config.policy.block_size,
                                  episodes=config.policy.episodes_single, action_params=config.action, trace=trace)


class ManipulateNode(BaseNode):
    """
    Reads the target, arm count and mesh source from shared["args"]. The
    dual-arm policy uses shared["query_list"] when a previous node built
    one, else the list given by --query.
    """

    def prep(self, shared):
        args = shared["args"]
        config = shared["config"]
        tier = args.get("tier", "fold")
        if tier not in TIERS:
            raise ConfigError(f"unknown tier {tier!r}; expected one of {TIERS}")
        arms = int(args.get("arms", 2))
        if arms not in (1, 2):
            raise ConfigError(f"--arms must be 1 or 2, got {arms}")
        target_name = args.get("target") or config.policy.target
        if arms == 1 and target_name != "flat":
            raise ConfigError("the single-arm policy only flattens; use --target flat")
        query_list = shared.get("query_list")
        if arms == 2 and query_list is None:
            if not args.get("query"):
                raise ConfigError("dual-arm manipulation needs --query or a query list built in this run")
            query_list = load_query_list(args["query"])
        return {
            "tier": tier, "count": int(args.get("count", 1)), "seed": int(args.get("seed", 0)),
            "arms": arms, "target": target_name, "query_list": query_list,
            "source": args.get("mesh_source", "gt"), "tta": not args.get("no_tta"),
            "model": shared.get("model"), "config": config, "template": shared["template"],
            "workers": shared["workers"], "out": shared["out_dir"],
        }

    def exec(self, prep_res):
        config, template = prep_res["config"], prep_res["template"]
        target = None
        query_list = prep_res["query_list"]
        if prep_res["arms"] == 2:
            target = make_target(prep_res["target"], template, config.sim, config.obs)
            if query_list.target != target.name:
                raise PolicyError(f"query list was built for {query_list.target!r}, not {target.name!r}")
            if query_list.block_size != config.policy.block_size:
                raise PolicyError(f"query list uses {query_list.block_size}-vertex blocks, "
                                  f"configuration uses {config.policy.block_size}")

        seeds = [prep_res["seed"] + i for i in range(prep_res["count"])]
        common = (prep_res["arms"], target, query_list, prep_res["source"], prep_res["model"], template, config,
                  prep_res["tta"])
        traces = [None] * len(seeds)
        logger.info(f"Running {len(seeds)} {prep_res['tier']} trials, {prep_res['arms']} arm(s), "
                    f"mesh source {prep_res['source']}")
        if prep_res["workers"] > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=prep_res["workers"]) as executor:
                future_to_seed = {executor.submit(run_trial, prep_res["tier"], seed, *common): k
                                  for k, seed in enumerate(seeds)}
                for future in concurrent.futures.as_completed(future_to_seed):
                    traces[future_to_seed[future]] = future.result()
        else:
            for k, seed in enumerate(seeds):
                traces[k] = run_trial(prep_res["tier"], seed, *common)
                logger.info(f"Trial {k + 1}/{len(seeds)} (seed {seed}): metric {traces[k].metrics[-1]:.4f}")

        summary = summarize(traces)
        metric = "coverage" if prep_res["target"] == "flat" else "similarity"
        paths = []
        if prep_res["out"]:
            trace_path = os.path.join(prep_res["out"], "traces.jsonl")
            with open(trace_path, "w") as fh:
                for trace in traces:
                    fh.write(json.dumps(trace.to_record(), sort_keys=True) + "\n")
            summary_path = os.path.join(prep_res["out"], "summary.json")
            with open(summary_path, "w") as fh:
                json.dump({"metric": metric, "summary": summary}, fh, indent=2, sort_keys=True)
            paths = [trace_path, summary_path]
        return traces, summary, format_summary(summary, metric), paths

    def post(self, shared, prep_res, exec_res):
        traces, summary, text, paths = exec_res
        shared["traces"] = traces
        shared["summary"] = summary
        shared["outputs"].extend(paths)
        failed = sum(t.failed for t in traces)
        if failed:
            logger.warning(f"{failed} trial(s) ended early on an unstable simulation")
        shared["summary_text"] = text
