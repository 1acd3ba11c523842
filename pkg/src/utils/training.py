"""
Supervised training of the reconstruction network, per-tier evaluation
and the two pixel-wise tuning strategies (network fine-tuning and direct
mesh optimization).
"""
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from src.utils.autodiff import Tape, Tensor, backward
from src.utils.checkpoint import save_checkpoint
from src.utils.errors import TrainingDiverged
from src.utils.gnn import GnnModel, init_params, params_to_arrays, reconstruct_with_tta
from src.utils.logger import logger
from src.utils.losses import (
    LossWeights, SpatialHashGrid, loss_cham, loss_key, loss_regu, loss_total, loss_vtx,
    pixel_loss, pixel_target, silhouette_term,
)
from src.utils.mesh import compute_visibility, flag_error, keypoint_indices, rotation_z
from src.utils.observation import (
    DepthObservation, ObservationConfig, add_noise, depth_to_pointcloud, pixel_pitch, render_depth,
    rotate_image,
)
from src.utils.optim import AdamState, adam_step, cosine_lr


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 3e-4
    min_learning_rate: float = 0.0
    seed: int = 0
    noise: bool = True
    rotation: bool = True
    train_fraction: float = 0.9
    val_fraction: float = 0.1
    max_iterations: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("TrainConfig needs epochs >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not math.isclose(self.train_fraction + self.val_fraction, 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must sum to 1, got {self.train_fraction} + {self.val_fraction}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")


@dataclass(frozen=True, eq=False)
class Sample:
    """One supervised example: normalized image and centered ground-truth mesh (meters)."""
    image: np.ndarray
    positions: np.ndarray
    flags: np.ndarray
    tier: str
    seed: int = 0


def sample_observation(sample, mesh, depth_scale):
    pitch = pixel_pitch(mesh.canonical_extent, sample.image.shape[0])
    return DepthObservation(image=sample.image, pixel_pitch=pitch, depth_scale=depth_scale,
                            center_xy=np.zeros(2))


def split_dataset(samples, val_fraction, seed):
    """Seeded shuffle into (train, validation); validation gets round(n * fraction) samples."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    if len(samples) > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), len(samples) - 1)
    else:
        n_val = 0
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


def augment(sample, rng, obs_config, rotation, noise):
    """
    One random rotation applied to image and ground truth together, then
    fresh camera noise on the image.
    """
    image, positions = sample.image, sample.positions
    if rotation:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        image = rotate_image(image, angle)
        positions = positions @ rotation_z(angle).T
    if noise:
        image = add_noise(image, obs_config.noise_sigma / obs_config.depth_scale, int(rng.integers(2 ** 32)),
                          obs_config.noise_floor)
    return image, positions


def supervised_terms(model, image, truth, obs, obs_config, seed):
    """Forward pass plus all five loss terms on the active tape (normalized frame)."""
    mesh = model.mesh
    pred = model.forward(image)
    truth_n = truth / model.extent
    target = pixel_target(obs, mesh, obs_config.silhouette_resolution, obs_config.max_points, seed)
    terms = {
        "vtx": loss_vtx(pred, truth_n),
        "key": loss_key(pred, truth_n, keypoint_indices(mesh)),
        "sil": silhouette_term(pred, mesh, target, obs_config.sharpness),
        "cham": loss_cham(target.points, pred, target.cell_size),
        "regu": loss_regu(pred, mesh),
    }
    return pred, terms


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = math.inf


def _mean_gradients(model, grad_sums, count):
    return {name: grad_sums[name] / count for name in model.params}


def train(samples, mesh, gnn_config, train_config, weights=LossWeights(), obs_config=None,
          out_dir=None, params=None):
    """
    Minimize the five-term loss with Adam and a cosine schedule.

    Args:
        samples (list): Sample records with ground truth
        mesh (ClothMesh): Template the network deforms
        gnn_config (GnnConfig): Network shape
        train_config (TrainConfig): Optimization settings
        weights (LossWeights): Loss ratios
        obs_config (ObservationConfig): Noise, silhouette and point-cloud settings
        out_dir (str): Optional directory for checkpoints and the metrics log
        params (dict): Optional starting parameters

    Returns:
        TrainResult: best parameters by validation T_loss (last epoch when there is no validation split)
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    obs_config = obs_config or ObservationConfig()
    tc = train_config
    train_set, val_set = split_dataset(samples, tc.val_fraction, tc.seed)
    params = params if params is not None else init_params(gnn_config, tc.seed)
    model = GnnModel(gnn_config, params, mesh)
    state = AdamState()

    steps_per_epoch = math.ceil(len(train_set) / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    if tc.max_iterations:
        total_steps = min(total_steps, tc.max_iterations) if tc.epochs else tc.max_iterations
    epochs = math.ceil(total_steps / steps_per_epoch) if total_steps else 0

    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    last_good = None
    result = TrainResult(params=params)
    global_step = 0
    logger.info(f"Training on {len(train_set)} samples ({len(val_set)} validation), {total_steps} steps")

    for epoch in range(epochs):
        started = time.time()
        rng = np.random.default_rng([tc.seed, epoch])
        order = rng.permutation(len(train_set))
        sums = {}
        seen = 0
        for start in range(0, len(order), tc.batch_size):
            if global_step >= total_steps:
                break
            batch = order[start:start + tc.batch_size]
            grad_sums = {name: np.zeros_like(t.data) for name, t in params.items()}
            for index in batch:
                sample = train_set[index]
                sample_rng = np.random.default_rng([tc.seed, epoch, int(index)])
                image, truth = augment(sample, sample_rng, obs_config, tc.rotation, tc.noise)
                obs = sample_observation(Sample(image, truth, sample.flags, sample.tier), mesh,
                                         obs_config.depth_scale)
                with Tape() as tape:
                    _, terms = supervised_terms(model, image, truth, obs, obs_config, int(index))
                    loss = loss_total(terms, weights)
                value = loss.item()
                if not math.isfinite(value):
                    logger.error(f"Loss became {value} at epoch {epoch} step {global_step}")
                    raise TrainingDiverged(epoch, global_step, last_good)
                grads = backward(tape, loss)
                for name, tensor in params.items():
                    grad_sums[name] += grads.get(tensor, 0.0)
                for key, term in terms.items():
                    sums[key] = sums.get(key, 0.0) + term.item()
                sums["total"] = sums.get("total", 0.0) + value
                seen += 1
            lr = cosine_lr(tc.learning_rate, global_step, total_steps, tc.min_learning_rate)
            adam_step(params, _mean_gradients(model, grad_sums, len(batch)), state, lr)
            global_step += 1

        record = {"epoch": epoch, "step": global_step, "lr": lr}
        record.update({f"train_{k}": v / max(seen, 1) for k, v in sums.items()})
        if val_set:
            report = evaluate(model, val_set, weights, obs_config)
            score = report.average["T_loss"]
            record["val_T_loss"] = score
            record["val_vtx_p"] = report.average["L_vtx_p"]
        else:
            score = record.get("train_total", math.inf)
        record["wall_time"] = time.time() - started

        if out_dir:
            last_good = os.path.join(out_dir, "last.ckpt")
            save_checkpoint(last_good, params_to_arrays(params))
        if score <= result.best_score or result.best_epoch < 0:
            result.best_score = score
            result.best_epoch = epoch
            result.params = {name: Tensor(t.data.copy(), requires_grad=True, name=name)
                             for name, t in params.items()}
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), params_to_arrays(params))
        result.history.append(record)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        logger.info(f"Epoch {epoch + 1}/{epochs}: train loss {record.get('train_total', float('nan')):.5f}, "
                    f"selection score {score:.4f}")
    if epochs == 0:
        result.params = params
    return result


METRICS = ("L_vtx_p", "L_vtx_f", "L_key_p", "L_key_f", "L_sil", "L_cham", "T_loss")


@dataclass
class ReconReport:
    """Per-tier mean metrics (mm for positions and chamfer, percent for flags and silhouette)."""
    tiers: dict
    average: dict
    counts: dict

    def format_table(self):
        names = list(self.tiers) + ["average"]
        header = f"{'metric':<10}" + "".join(f"{n:>12}" for n in names)
        lines = [header, "-" * len(header)]
        for metric in METRICS:
            row = [self.tiers[n][metric] for n in self.tiers] + [self.average[metric]]
            lines.append(f"{metric:<10}" + "".join(f"{v:>12.3f}" for v in row))
        lines.append(f"{'samples':<10}" + "".join(f"{self.counts[n]:>12d}" for n in self.tiers)
                     + f"{sum(self.counts.values()):>12d}")
        return "\n".join(lines)


def sample_metrics(pred_positions, pred_flags, sample, mesh, weights, depth_scale):
    """
    Evaluation metrics of one prediction against its ground truth. The
    chamfer row measures observed depth points against the rendered
    surface of the prediction.
    """
    keypoints = keypoint_indices(mesh)
    truth = sample.positions
    per_vertex = np.sum(np.abs(pred_positions - truth), axis=1)
    resolution = sample.image.shape[0]
    pitch = pixel_pitch(mesh.canonical_extent, resolution)
    pred_depth, _ = render_depth(mesh, resolution, pitch, positions=pred_positions)
    obs = DepthObservation(sample.image, pitch, depth_scale, np.zeros(2))
    pred_obs = DepthObservation(pred_depth / depth_scale, pitch, depth_scale, np.zeros(2))
    truth_sil = obs.silhouette.reshape(-1)
    sil = float(np.sum((pred_obs.silhouette.reshape(-1) - truth_sil) ** 2) / max(np.sum(truth_sil), 1.0))
    observed = depth_to_pointcloud(obs)
    rendered = depth_to_pointcloud(pred_obs)
    if observed.shape[0] and rendered.shape[0]:
        _, d2 = SpatialHashGrid(rendered, 2.0 * mesh.axis_rest_length).nearest(observed)
        cham = float(np.sqrt(np.mean(d2))) * 1000.0
    else:
        cham = 0.0 if observed.shape[0] == rendered.shape[0] else math.inf
    out = {
        "L_vtx_p": float(per_vertex.mean()) * 1000.0,
        "L_vtx_f": flag_error(pred_flags, sample.flags) * 100.0,
        "L_key_p": float(per_vertex[keypoints].mean()) * 1000.0,
        "L_key_f": flag_error(pred_flags, sample.flags, keypoints) * 100.0,
        "L_sil": sil * 100.0,
        "L_cham": cham,
    }
    out["T_loss"] = out["L_key_p"] + weights.silhouette * out["L_sil"] + weights.chamfer * out["L_cham"]
    return out


def evaluate(model, samples, weights=LossWeights(), obs_config=None, predictions=None, mesh=None):
    """
    Mean metrics per tier and averaged over tiers.

    Args:
        model (GnnModel): Network to evaluate (unused when `predictions` given)
        samples (list): Samples with ground truth
        predictions (list): Optional (positions, flags) per sample in place of the network
        mesh (ClothMesh): Template; defaults to the model's

    Returns:
        ReconReport
    """
    obs_config = obs_config or ObservationConfig()
    mesh = mesh if mesh is not None else model.mesh
    per_tier = {}
    for i, sample in enumerate(samples):
        if predictions is None:
            obs = sample_observation(sample, mesh, obs_config.depth_scale)
            positions = model.predict(obs.image)
            flags = compute_visibility(mesh, positions=positions)
        else:
            positions, flags = predictions[i]
        per_tier.setdefault(sample.tier, []).append(
            sample_metrics(positions, flags, sample, mesh, weights, obs_config.depth_scale))
    tiers = {tier: {m: float(np.mean([row[m] for row in rows])) for m in METRICS}
             for tier, rows in per_tier.items()}
    average = {m: float(np.mean([tiers[t][m] for t in tiers])) for m in METRICS}
    counts = {tier: len(rows) for tier, rows in per_tier.items()}
    return ReconReport(tiers=tiers, average=average, counts=counts)


class PixelScorer:
    """Self-supervised pixel loss of a centered mesh against an observation (for TTA selection)."""

    def __init__(self, mesh, weights, obs_config, seed=0):
        self.mesh = mesh
        self.weights = weights
        self.obs_config = obs_config
        self.seed = seed
        # (observation, target), matched by identity
        self._cached = (None, None)

    def target(self, obs):
        cached_obs, cached_target = self._cached
        if cached_obs is not obs:
            cached_target = pixel_target(obs, self.mesh, self.obs_config.silhouette_resolution,
                                         self.obs_config.max_points, self.seed)
            self._cached = (obs, cached_target)
        return cached_target

    def __call__(self, candidate, obs):
        positions = candidate.positions / self.mesh.canonical_extent
        total, _ = pixel_loss(positions, self.mesh, self.target(obs), self.weights, self.obs_config.sharpness)
        return total.item()


def finetune_pixelwise(model, observations, epochs, train_config, weights=LossWeights(), obs_config=None):
    """
    Continue training on observations without ground truth using only
    ls L_sil + lc L_cham + lr L_regu.

    Returns:
        tuple: (params, per-epoch mean pixel loss)
    """
    obs_config = obs_config or ObservationConfig()
    params = model.params
    curve = []
    if epochs <= 0 or not observations:
        return params, curve
    state = AdamState()
    mesh = model.mesh
    targets = [pixel_target(obs, mesh, obs_config.silhouette_resolution, obs_config.max_points, i)
               for i, obs in enumerate(observations)]
    total_steps = epochs * math.ceil(len(observations) / train_config.batch_size)
    step_index = 0
    for epoch in range(epochs):
        order = np.random.default_rng([train_config.seed, epoch]).permutation(len(observations))
        losses = []
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            grad_sums = {name: np.zeros_like(t.data) for name, t in params.items()}
            for index in batch:
                with Tape() as tape:
                    pred = model.forward(observations[index].image)
                    loss, _ = pixel_loss(pred, mesh, targets[index], weights, obs_config.sharpness,
                                         regularize=True)
                grads = backward(tape, loss)
                for name, tensor in params.items():
                    grad_sums[name] += grads.get(tensor, 0.0)
                losses.append(loss.item())
            lr = cosine_lr(train_config.learning_rate, step_index, total_steps, train_config.min_learning_rate)
            adam_step(params, _mean_gradients(model, grad_sums, len(batch)), state, lr)
            step_index += 1
        curve.append(float(np.mean(losses)))
        logger.info(f"Pixel-wise tuning epoch {epoch + 1}/{epochs}: loss {curve[-1]:.5f}")
    return params, curve


def optimize_mesh(mesh, obs, iterations, weights=LossWeights(), obs_config=None, step_size=0.005, seed=0):
    """
    Backtracking gradient descent on vertex positions minimizing
    ls L_sil + lc L_cham + lr L_regu. A step is accepted only when the
    objective decreases; visibility flags are recomputed at the end.

    Args:
        mesh (ClothMesh): Centered-frame reconstruction
        obs (DepthObservation): Observation it should explain
        iterations (int): Gradient evaluations
        step_size (float): Initial largest vertex move, normalized units

    Returns:
        tuple: (ClothMesh, objective per accepted step)
    """
    obs_config = obs_config or ObservationConfig()
    extent = mesh.canonical_extent
    target = pixel_target(obs, mesh, obs_config.silhouette_resolution, obs_config.max_points, seed)

    def objective(x, record=False):
        pred = Tensor(x, requires_grad=record)
        if not record:
            return pixel_loss(pred, mesh, target, weights, obs_config.sharpness, regularize=True)[0].item(), None
        with Tape() as tape:
            loss, _ = pixel_loss(pred, mesh, target, weights, obs_config.sharpness, regularize=True)
        return loss.item(), backward(tape, loss)[pred]

    x = mesh.positions / extent
    current, grad = objective(x, record=True)
    trace = [current]
    alpha = step_size
    for _ in range(iterations):
        peak = float(np.max(np.abs(grad)))
        if peak == 0 or alpha < 1e-7:
            break
        candidate = x - alpha * grad / peak
        value, _ = objective(candidate)
        if value < current:
            x = candidate
            current, grad = objective(x, record=True)
            trace.append(current)
            alpha *= 1.2
        else:
            alpha *= 0.5
    positions = x * extent
    return mesh.with_positions(positions, compute_visibility(mesh, positions=positions)), trace


def tta_predictions(model, samples, weights=LossWeights(), obs_config=None, rotations=8):
    """(positions, flags) per sample from rotation test-time augmentation, for `evaluate(predictions=...)`."""
    obs_config = obs_config or ObservationConfig()
    scorer = PixelScorer(model.mesh, weights, obs_config)
    predictions = []
    for sample in samples:
        obs = sample_observation(sample, model.mesh, obs_config.depth_scale)
        candidate, _, _ = reconstruct_with_tta(model, obs, scorer, rotations)
        predictions.append((candidate.positions, candidate.flags))
    return predictions


@dataclass
class AblationResult:
    reports: dict
    steps: dict

    def format_table(self):
        names = list(self.reports)
        header = f"{'metric':<10}" + "".join(f"{n:>15}" for n in names)
        lines = [header, "-" * len(header)]
        for metric in METRICS:
            lines.append(f"{metric:<10}" + "".join(f"{self.reports[n].average[metric]:>15.3f}" for n in names))
        lines.append(f"{'steps':<10}" + "".join(f"{self.steps[n]:>15d}" for n in names))
        return "\n".join(lines)


def ablation_study(train_samples, eval_samples, mesh, gnn_config, train_config, weights=LossWeights(),
                   obs_config=None):
    """
    Train the attention and mean-pooling networks with the same data, seed
    and step budget, then evaluate both; the attention network is also
    evaluated with rotation TTA.

    Returns:
        AblationResult: reports keyed "attention", "mean_pool" and "attention_tta"
    """
    obs_config = obs_config or ObservationConfig()
    reports, steps = {}, {}
    for name, attention in (("attention", True), ("mean_pool", False)):
        config = replace(gnn_config, attention=attention)
        result = train(train_samples, mesh, config, train_config, weights, obs_config)
        model = GnnModel(config, result.params, mesh)
        reports[name] = evaluate(model, eval_samples, weights, obs_config)
        steps[name] = result.history[-1]["step"] if result.history else 0
        if attention:
            reports["attention_tta"] = evaluate(model, eval_samples, weights, obs_config,
                                                predictions=tta_predictions(model, eval_samples, weights, obs_config))
            steps["attention_tta"] = steps[name]
        logger.info(f"Ablation {name}: L_vtx_p {reports[name].average['L_vtx_p']:.3f} mm")
    return AblationResult(reports=reports, steps=steps)


def overfit_error(model, sample):
    """Mean per-vertex L1 error (meters) of the model on one sample."""
    return float(np.mean(np.sum(np.abs(model.predict(sample.image) - sample.positions), axis=1)))
