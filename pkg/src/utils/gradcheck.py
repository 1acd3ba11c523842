"""
Central finite-difference checks for every registered op.

`grad_check` contracts the op output with a fixed random projection so
each op reduces to a scalar, then compares the analytic gradient of every
differentiable input against central differences at 64-bit precision.
"""
import numpy as np

from src.utils.autodiff import OPS, Context, Tape, Tensor
from src.utils.errors import GradientError
from src.utils.logger import logger
from src.utils.mesh import make_template
from src.utils.observation import edge_distances, pixel_centers

DEFAULT_TOLERANCE = 1e-4


def grad_check(op_name, inputs, epsilon=1e-5, seed=0, **kwargs):
    """
    Max relative gradient error of one registered op.

    Args:
        op_name (str): Name in the op registry
        inputs (list): Arrays; every input is differentiated
        epsilon (float): Central-difference step, in (0, 1e-2]
        seed (int): Seed of the output projection
        **kwargs: Non-differentiable op arguments

    Returns:
        float: max over components of |analytic - numeric| / max(1, |numeric|)
    """
    if op_name not in OPS:
        raise GradientError(f"op {op_name!r} is not registered; known ops: {sorted(OPS)}")
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    op = OPS[op_name]
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    reference = op.forward(Context(), *[a.copy() for a in arrays], **kwargs)
    projection = np.random.default_rng(seed).standard_normal(np.shape(reference))

    def scalar(values):
        return float(np.sum(op.forward(Context(), *values, **kwargs) * projection))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op.apply(*leaves, **kwargs)
    upstream = projection.reshape(out.shape)
    analytic = op.backward(tape.records[-1].ctx, upstream)

    worst = 0.0
    for index, array in enumerate(arrays):
        grad = analytic[index]
        grad = np.zeros_like(array) if grad is None else np.asarray(grad).reshape(array.shape)
        flat = array.reshape(-1)
        for k in range(flat.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[index].reshape(-1)[k] += epsilon
            minus[index].reshape(-1)[k] -= epsilon
            numeric = (scalar(plus) - scalar(minus)) / (2.0 * epsilon)
            err = abs(grad.reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    """Values with |x| >= margin so kinks stay outside the difference stencil."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _silhouette_case(rng, min_gap=2e-3):
    """
    Jittered 3x3 mesh on an 8x8 pixel grid. Pixels whose two nearest edge
    lines are within `min_gap` of each other for some face are dropped, so
    the finite-difference stencil never crosses an edge switch.
    """
    mesh = make_template(3, 3, 0.1)
    positions = mesh.template + rng.normal(0.0, 0.004, size=mesh.template.shape)
    resolution = 8
    pitch = 0.2 / resolution
    extent = resolution * pitch
    pixels = pixel_centers(resolution, pitch) + 1e-3
    d_all = np.sort(edge_distances(positions[:, :2] / extent, mesh.faces, pixels / extent), axis=1)
    clear = np.all(d_all[:, 1, :] - d_all[:, 0, :] > min_gap, axis=0)
    return [positions], {"faces": mesh.faces, "pixels": pixels[clear], "sharpness": 8.0, "extent": extent}


def gradcheck_cases(rng):
    """One (op name, inputs, kwargs) case per registered op, drawn from `rng`."""
    segments = np.repeat(np.arange(8), 3)
    cases = [
        ("matmul", [rng.standard_normal((4, 3)), rng.standard_normal((3, 2))], {}),
        ("add", [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], {}),
        ("sub", [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], {}),
        ("mul", [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], {}),
        ("add_bias", [rng.standard_normal((5, 3)), rng.standard_normal(3)], {}),
        ("scale", [rng.standard_normal((2, 3))], {"factor": 1.7}),
        ("relu", [_away_from_zero(rng, (4, 5))], {}),
        ("sigmoid", [rng.standard_normal((3, 3))], {}),
        ("concat", [rng.standard_normal((4, 2)), rng.standard_normal((4, 3))], {}),
        ("reshape", [rng.standard_normal((2, 6))], {"shape": (3, 4)}),
        ("gather_rows", [rng.standard_normal((5, 3))], {"index": np.array([0, 2, 2, 4, 1])}),
        ("segment_softmax", [rng.standard_normal((24, 1))], {"segment_ids": segments, "num_segments": 8}),
        ("segment_weighted_sum", [rng.standard_normal((24, 3)), rng.uniform(0.1, 1.0, size=(24, 1))],
         {"segment_ids": segments, "num_segments": 8}),
        ("sum", [rng.standard_normal((3, 4))], {"axis": 0}),
        ("mean", [rng.standard_normal((3, 4))], {"axis": None}),
        ("l1_distance", [_away_from_zero(rng, (5, 3)), np.zeros((5, 3))], {}),
        ("sq_l2_distance", [rng.standard_normal((5, 3)), rng.standard_normal((5, 3))], {}),
        ("row_norm", [_away_from_zero(rng, (4, 3), margin=0.3)], {}),
        ("conv2d", [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)],
         {"stride": 2, "padding": 1}),
    ]
    positions, kwargs = _silhouette_case(rng)
    cases.append(("soft_silhouette", positions, kwargs))
    return cases


def run_suite(seeds=range(10), epsilon=1e-5, tolerance=DEFAULT_TOLERANCE):
    """
    Check every registered op over `seeds`.

    Returns:
        dict: op name -> worst relative error across seeds; ops above `tolerance` are logged as failures
    """
    worst = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, inputs, kwargs in gradcheck_cases(rng):
            err = grad_check(name, inputs, epsilon=epsilon, seed=seed, **kwargs)
            worst[name] = max(worst.get(name, 0.0), err)
    missing = sorted(set(OPS) - set(worst))
    if missing:
        raise GradientError(f"no gradcheck case for registered ops: {missing}")
    for name, err in sorted(worst.items()):
        status = "ok" if err < tolerance else "FAIL"
        logger.info(f"gradcheck {name:<22} max rel err {err:.2e} {status}")
    return worst
