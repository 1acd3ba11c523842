"""
Exception hierarchy shared by every stage of the pipeline.
"""


class ClothError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ClothError, ValueError):
    """Operands of a tensor op are not conformable."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        shape_text = " vs ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: shape mismatch {shape_text}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class GradientError(ClothError):
    """Backward pass or gradient check was requested on invalid input."""


class MeshError(ClothError, ValueError):
    """Invalid mesh dimensions or mesh query."""


class SimulationUnstable(ClothError):
    """Non-finite state produced by the integrator."""

    def __init__(self, step_index, vertex, detail=""):
        self.step_index = step_index
        self.vertex = vertex
        super().__init__(
            f"simulation became non-finite at step {step_index} (vertex {vertex}){': ' + detail if detail else ''}"
        )


class ConfigError(ClothError, ValueError):
    """Unknown configuration key or uncoercible value."""


class FormatError(ClothError):
    """Binary file has a wrong magic, version or is truncated."""


class TrainingDiverged(ClothError):
    """Loss became NaN or infinite during training."""

    def __init__(self, epoch, step, checkpoint_path=None):
        self.epoch = epoch
        self.step = step
        self.checkpoint_path = checkpoint_path
        super().__init__(
            f"training diverged at epoch {epoch} step {step}; last good checkpoint: {checkpoint_path or 'none'}"
        )


class PolicyError(ClothError):
    """The manipulation policy cannot produce an action."""
