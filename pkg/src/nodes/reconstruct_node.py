"""
Reconstruct Node: single-observation inference with optional test-time
rotation and pixel-wise refinement, plus silhouette overlays.
"""
import os

import numpy as np

from src.nodes.base_node import BaseNode
from src.utils.dataset_io import DatasetRecord, read_record, silhouette_overlay, write_pgm, write_record
from src.utils.errors import FormatError
from src.utils.gnn import reconstruct_with_tta
from src.utils.logger import logger
from src.utils.mesh import keypoint_indices
from src.utils.observation import DepthObservation, normalize_image, pixel_pitch, render_depth
from src.utils.training import PixelScorer, optimize_mesh


def load_observation(path, template, obs_config):
    """
    A normalized observation from a dataset record (.rec) or a raw top-view
    height map in meters sampled at the canonical pitch (.npy).
    """
    if path.endswith(".npy"):
        raw = np.load(path)
        if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
            raise FormatError(f"{path}: expected a square height map, got shape {raw.shape}")
        pitch = pixel_pitch(template.canonical_extent, raw.shape[0])
        return normalize_image(raw, pitch, obs_config.depth_scale)
    if path.endswith(".rec"):
        record = read_record(path)
        image = record.image.astype(np.float64)
        return DepthObservation(image=image, pixel_pitch=pixel_pitch(template.canonical_extent, image.shape[0]),
                                depth_scale=obs_config.depth_scale, center_xy=np.zeros(2))
    raise FormatError(f"{path}: unsupported depth file; expected .npy or .rec")


class ReconstructNode(BaseNode):
    def prep(self, shared):
        args = shared["args"]
        return {
            "path": args["depth_file"],
            "tta": bool(args.get("tta")),
            "refine": args.get("refine") or 0,
            "model": shared["model"],
            "config": shared["config"],
            "template": shared["template"],
            "out": shared["out_dir"],
        }

    def exec(self, prep_res):
        config, template, model = prep_res["config"], prep_res["template"], prep_res["model"]
        obs = load_observation(prep_res["path"], template, config.obs)
        scorer = PixelScorer(template, config.loss, config.obs, seed=config.seed)
        if prep_res["tta"]:
            mesh, k, _ = reconstruct_with_tta(model, obs, scorer)
            logger.info(f"Test-time rotation picked {k * 45} degrees")
        else:
            mesh = model.reconstruct(obs)
        if prep_res["refine"]:
            mesh, trace = optimize_mesh(mesh, obs, prep_res["refine"], config.loss, config.obs, seed=config.seed)
            logger.info(f"Refined over {prep_res['refine']} iterations: pixel loss {trace[0]:.5f} -> {trace[-1]:.5f}")

        out = prep_res["out"]
        record = DatasetRecord(
            n_rows=template.n_rows, n_cols=template.n_cols, tier="reconstructed", seed=config.seed,
            positions=mesh.positions.astype("<f4"), flags=mesh.flags.copy(), image=obs.image.astype("<f4"),
            keypoints=keypoint_indices(template).astype("<u4"),
        )
        mesh_path = os.path.join(out, "reconstruction.rec")
        write_record(mesh_path, record)

        predicted, _ = render_depth(mesh, obs.resolution, obs.pixel_pitch)
        observed_path = os.path.join(out, "observed.pgm")
        predicted_path = os.path.join(out, "predicted.pgm")
        overlay_path = os.path.join(out, "overlay.pgm")
        peak = max(float(obs.image.max()), 1e-12)
        write_pgm(observed_path, obs.image / peak)
        write_pgm(predicted_path, predicted / (obs.depth_scale * peak))
        write_pgm(overlay_path, silhouette_overlay(predicted > 0, obs.silhouette))
        agreement = float(np.mean((predicted > 0) == (obs.image > 0)))
        return [mesh_path, observed_path, predicted_path, overlay_path], agreement

    def post(self, shared, prep_res, exec_res):
        paths, agreement = exec_res
        shared["outputs"].extend(paths)
        shared["summary_text"] = f"Silhouette pixel agreement {agreement:.1%}; wrote {paths[0]}"
