"""
Generate Data Node: seeded dragged / folded / dropped samples written as
one record per file plus a manifest.
"""
import concurrent.futures
import os

from src.nodes.base_node import BaseNode
from src.utils.actions import TIERS, gen_tier
from src.utils.config import config_items
from src.utils.dataset_io import DatasetRecord, record_filename, write_manifest, write_record
from src.utils.errors import ConfigError
from src.utils.logger import logger
from src.utils.mesh import keypoint_indices
from src.utils.observation import observe


def generate_record(tier, seed, template, sim_params, action_params, obs_config):
    """
    Simulate one sample and render its observation.

    Returns:
        tuple: (DatasetRecord in the centered frame, action history)
    """
    world, state = gen_tier(tier, seed, template, sim_params, action_params)
    obs, centered = observe(world, obs_config, template.canonical_extent)
    record = DatasetRecord(
        n_rows=template.n_rows,
        n_cols=template.n_cols,
        tier=tier,
        seed=seed,
        positions=centered.positions.astype("<f4"),
        flags=centered.flags.copy(),
        image=obs.image.astype("<f4"),
        keypoints=keypoint_indices(template).astype("<u4"),
    )
    return record, state.history


def tier_for(tier, index):
    """`mixed` cycles through the three tiers by sample index."""
    return TIERS[index % len(TIERS)] if tier == "mixed" else tier


class GenerateDataNode(BaseNode):
    """
    Fans generation out over worker processes by seed; every record goes
    to its own file, so completion order never changes the output.
    """

    def prep(self, shared):
        args = shared["args"]
        tier = args.get("tier", "mixed")
        if tier != "mixed" and tier not in TIERS:
            raise ConfigError(f"unknown tier {tier!r}; expected one of {TIERS + ('mixed',)}")
        if args.get("count", 0) < 1:
            raise ConfigError("--count must be at least 1")
        return {
            "tier": tier,
            "count": args["count"],
            "seed": args.get("seed", 0),
            "out": shared["out_dir"],
            "config": shared["config"],
            "template": shared["template"],
            "workers": shared["workers"],
        }

    def exec(self, prep_res):
        config = prep_res["config"]
        jobs = [(tier_for(prep_res["tier"], i), prep_res["seed"] + i) for i in range(prep_res["count"])]
        common = (prep_res["template"], config.sim, config.action, config.obs)
        results = [None] * len(jobs)
        logger.info(f"Generating {len(jobs)} samples with {prep_res['workers']} worker(s)")
        if prep_res["workers"] > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=prep_res["workers"]) as executor:
                future_to_job = {executor.submit(generate_record, tier, seed, *common): k
                                 for k, (tier, seed) in enumerate(jobs)}
                for future in concurrent.futures.as_completed(future_to_job):
                    results[future_to_job[future]] = future.result()
        else:
            for k, (tier, seed) in enumerate(jobs):
                results[k] = generate_record(tier, seed, *common)

        entries = []
        for record, history in results:
            name = record_filename(record.tier, record.seed)
            write_record(os.path.join(prep_res["out"], name), record)
            entries.append({"file": name, "tier": record.tier, "seed": record.seed, "history": history})
        lowest = min(float(r.positions[:, 2].min()) for r, _ in results)
        logger.info(f"Lowest vertex height across the dataset: {lowest * 1000:.2f} mm")
        manifest = write_manifest(prep_res["out"], entries, {"config": dict(config_items(config))})
        return entries, manifest

    def post(self, shared, prep_res, exec_res):
        entries, manifest = exec_res
        shared["manifest"] = manifest
        shared["outputs"].append(manifest)
        shared["summary_text"] = f"Wrote {len(entries)} records and {manifest}"
