"""
Template-based reconstruction network.

A small strided CNN turns the normalized depth image into a global feature
I_f. Every template vertex gets v = MLP_V([p, I_f]); every directed edge
gets e = MLP_E([p_j - p_i, |p_j - p_i|]). L attention message-passing
rounds update both, and MLP_D decodes each vertex to a 3-D position.

All network quantities live in the normalized cloth frame: positions are
divided by the canonical extent of the template.
"""
from dataclasses import dataclass

import numpy as np

from src.utils.autodiff import (
    Tensor, add_bias, concat, conv2d, gather_rows, matmul, mean, relu, reshape,
    segment_softmax, segment_weighted_sum,
)
from src.utils.errors import ConfigError
from src.utils.logger import logger
from src.utils.mesh import compute_visibility, translate_mesh
from src.utils.observation import rotate_obs, unrotate_mesh


@dataclass(frozen=True)
class GnnConfig:
    encoder_channels: tuple = (16, 32, 64, 128)
    vertex_dim: int = 64
    edge_dim: int = 64
    hidden_dim: int = 64
    iterations: int = 8
    shared_updaters: bool = False
    attention: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"GnnConfig.iterations must be >= 1, got {self.iterations}")
        dims = (self.vertex_dim, self.edge_dim, self.hidden_dim) + tuple(self.encoder_channels)
        if not self.encoder_channels or min(dims) <= 0:
            raise ValueError(f"GnnConfig dimensions must be positive, got {dims}")

    @property
    def image_feature_dim(self):
        return self.encoder_channels[-1]

    @property
    def n_updaters(self):
        return 1 if self.shared_updaters else self.iterations


@dataclass
class GraphFeatures:
    """Latent vertex and edge matrices, plus the last attention weights (None before any update)."""
    vertices: Tensor
    edges: Tensor
    attention: Tensor = None


class GraphTopology:
    """Constant per-template arrays the network consumes."""

    def __init__(self, mesh, dtype=np.float32):
        self.mesh = mesh
        self.extent = mesh.canonical_extent
        self.n_vertices = mesh.n_vertices
        self.src = mesh.edges[:, 0].copy()
        self.dst = mesh.edges[:, 1].copy()
        template = mesh.template / self.extent
        rel = template[self.dst] - template[self.src]
        self.template = Tensor(template, dtype=dtype)
        self.edge_input = Tensor(np.concatenate([rel, np.linalg.norm(rel, axis=1, keepdims=True)], axis=1),
                                 dtype=dtype)
        degree = np.bincount(self.src, minlength=self.n_vertices)
        self.mean_weights = Tensor((1.0 / degree[self.src]).reshape(-1, 1), dtype=dtype)
        self.broadcast_index = np.zeros(self.n_vertices, dtype=np.int64)


def _mlp_shapes(prefix, sizes):
    return [(f"{prefix}.{k}.w", (a, b)) for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]


def param_shapes(config):
    """Ordered name -> shape of every trainable tensor (biases included)."""
    shapes = []
    in_ch = 1
    for k, out_ch in enumerate(config.encoder_channels):
        shapes.append((f"enc.{k}.w", (out_ch, in_ch, 3, 3)))
        shapes.append((f"enc.{k}.b", (out_ch,)))
        in_ch = out_ch
    h, dv, de = config.hidden_dim, config.vertex_dim, config.edge_dim
    mlps = [
        ("mlp_v", (3 + config.image_feature_dim, h, dv)),
        ("mlp_e", (4, h, de)),
        ("mlp_d", (dv, h, 3)),
    ]
    for t in range(config.n_updaters):
        mlps += [
            (f"upd.{t}.edge", (de + 2 * dv, h, de)),
            (f"upd.{t}.attn", (de, h, 1)),
            (f"upd.{t}.vertex", (dv + de, h, dv)),
        ]
    for prefix, sizes in mlps:
        for name, shape in _mlp_shapes(prefix, sizes):
            shapes.append((name, shape))
            shapes.append((name[:-2] + ".b", (shape[1],)))
    return shapes


def init_params(config, seed, dtype=np.float32):
    """
    Seeded He-normal weights and zero biases.

    Returns:
        dict: name -> Tensor with requires_grad=True
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        if name.endswith(".b"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name, dtype=dtype)
    return params


def params_from_arrays(config, arrays, dtype=np.float32):
    """Rebuild trainable tensors from checkpoint arrays, checking names and shapes."""
    params = {}
    for name, shape in param_shapes(config):
        if name not in arrays:
            raise ConfigError(f"checkpoint lacks tensor {name!r}; was it trained with another GnnConfig?")
        if tuple(arrays[name].shape) != shape:
            raise ConfigError(f"checkpoint tensor {name!r} has shape {arrays[name].shape}, expected {shape}")
        params[name] = Tensor(arrays[name], requires_grad=True, name=name, dtype=dtype)
    return params


def params_to_arrays(params):
    return {name: tensor.data.copy() for name, tensor in params.items()}


def mlp(params, prefix, x):
    """Two-layer perceptron with a ReLU hidden layer."""
    h = relu(add_bias(matmul(x, params[f"{prefix}.0.w"]), params[f"{prefix}.0.b"]))
    return add_bias(matmul(h, params[f"{prefix}.1.w"]), params[f"{prefix}.1.b"])


def encode_image(params, config, image):
    """Strided conv blocks and global average pooling: (H, W) image -> (|I_f|,) feature."""
    x = reshape(image, (1,) + tuple(image.shape))
    for k in range(len(config.encoder_channels)):
        x = relu(conv2d(x, params[f"enc.{k}.w"], params[f"enc.{k}.b"], stride=2, padding=1))
    return mean(x, axis=(1, 2))


def encode(params, config, topology, image):
    """Initial graph features G0 from the image feature and the canonical template."""
    feature = encode_image(params, config, image)
    tiled = gather_rows(reshape(feature, (1, config.image_feature_dim)), topology.broadcast_index)
    vertices = mlp(params, "mlp_v", concat(topology.template, tiled))
    edges = mlp(params, "mlp_e", topology.edge_input)
    return GraphFeatures(vertices=vertices, edges=edges)


def update_step(params, config, topology, features, t):
    """
    One message-passing round: edge update from both endpoints, attention
    over each vertex's outgoing-edge segment, vertex update from the
    weighted edge sum. With attention off every neighbor weighs 1/degree.
    """
    slot = 0 if config.shared_updaters else t
    v, e = features.vertices, features.edges
    e_next = mlp(params, f"upd.{slot}.edge",
                 concat(e, gather_rows(v, topology.src), gather_rows(v, topology.dst)))
    if config.attention:
        logits = mlp(params, f"upd.{slot}.attn", e_next)
        weights = segment_softmax(logits, topology.src, topology.n_vertices)
    else:
        weights = topology.mean_weights
    pooled = segment_weighted_sum(e_next, weights, topology.src, topology.n_vertices)
    v_next = mlp(params, f"upd.{slot}.vertex", concat(v, pooled))
    return GraphFeatures(vertices=v_next, edges=e_next, attention=weights)


def decode(params, features):
    """(N, 3) vertex positions in the normalized cloth frame."""
    return mlp(params, "mlp_d", features.vertices)


class GnnModel:
    """
    Reconstruction network bound to one template topology.

    `forward` records on the active tape when parameters require gradients;
    outside a tape it is plain inference.
    """

    def __init__(self, config, params, mesh):
        self.config = config
        self.params = params
        self.mesh = mesh
        self.dtype = next(iter(params.values())).dtype
        self.topology = GraphTopology(mesh, dtype=self.dtype)

    @property
    def extent(self):
        return self.topology.extent

    def features(self, image):
        """All graph features G0..GL for an (H, W) image."""
        _warn_if_unnormalized(image)
        image = image if isinstance(image, Tensor) else Tensor(image, dtype=self.dtype)
        trace = [encode(self.params, self.config, self.topology, image)]
        for t in range(self.config.iterations):
            trace.append(update_step(self.params, self.config, self.topology, trace[-1], t))
        return trace

    def forward(self, image):
        return decode(self.params, self.features(image)[-1])

    def predict(self, image):
        """Vertex positions in meters, centered cloth frame."""
        return np.asarray(self.forward(image).data, dtype=np.float64) * self.extent

    def reconstruct(self, obs):
        """Centered-frame ClothMesh with visibility flags for one observation."""
        positions = self.predict(obs.image)
        return self.mesh.with_positions(positions, compute_visibility(self.mesh, positions=positions))


def _warn_if_unnormalized(image, border=2, limit=0.1):
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    ring = np.concatenate([data[:border].ravel(), data[-border:].ravel(),
                           data[:, :border].ravel(), data[:, -border:].ravel()])
    fraction = float(np.mean(ring != 0))
    if fraction > limit:
        logger.warning(f"Observation looks unnormalized: {fraction:.0%} of border pixels are nonzero")


def reconstruct_with_tta(model, obs, scorer, rotations=8):
    """
    Reconstruct at k x 45 degrees for k < `rotations`, undo each rotation and
    keep the candidate with the lowest `scorer(mesh, obs)`; ties keep the
    smallest k.

    Returns:
        tuple: (ClothMesh, chosen k, list of per-k scores)
    """
    best, best_k, scores = None, 0, []
    for k in range(rotations):
        candidate = model.reconstruct(rotate_obs(obs, k)) if k else model.reconstruct(obs)
        if k:
            candidate = unrotate_mesh(candidate, k)
        score = float(scorer(candidate, obs))
        scores.append(score)
        if best is None or score < scores[best_k]:
            best, best_k = candidate, k
    logger.debug(f"TTA scores {[round(s, 5) for s in scores]} -> k={best_k}")
    return best, best_k, scores


def to_world(mesh, obs):
    """Move a centered-frame reconstruction back to the table frame of its observation."""
    return translate_mesh(mesh, obs.center_xy)
