"""
Run configuration: one typed dataclass per section, loaded from a
key=value file with dotted keys (``sim.timestep=0.01``) and written back
in full as the resolved configuration of every command.
"""
import os
import typing
from dataclasses import dataclass, field, fields, replace

from dotenv import dotenv_values

from src.utils.actions import ActionParams, FlipParams
from src.utils.errors import ConfigError
from src.utils.gnn import GnnConfig
from src.utils.logger import logger
from src.utils.losses import LossWeights
from src.utils.mesh import make_template
from src.utils.observation import ObservationConfig
from src.utils.policy import PolicyConfig
from src.utils.sim import SimParams
from src.utils.training import TrainConfig

RESOLVED_NAME = "resolved_config.env"


@dataclass(frozen=True)
class MeshConfig:
    rows: int = 9
    cols: int = 9
    side_length: float = 0.3
    height: float = 0.0

    def build(self):
        """Template mesh; a zero height means a square cloth."""
        return make_template(self.rows, self.cols, self.side_length, self.height or None)


@dataclass(frozen=True)
class RunConfig:
    sim: SimParams = field(default_factory=SimParams)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    obs: ObservationConfig = field(default_factory=ObservationConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    action: ActionParams = field(default_factory=ActionParams)
    flip: FlipParams = field(default_factory=FlipParams)
    seed: int = 0


SECTIONS = ("sim", "mesh", "obs", "gnn", "train", "loss", "policy", "action", "flip")


def _preset_desk():
    return RunConfig()


def _preset_full():
    return RunConfig(
        sim=SimParams(vertex_mass=6.8e-5, repulsion_distance=0.011, substeps=50),
        mesh=MeshConfig(rows=21, cols=21),
        obs=ObservationConfig(resolution=224, silhouette_resolution=112),
        gnn=GnnConfig(iterations=15),
        policy=PolicyConfig(block_size=3),
    )


PRESETS = {"desk": _preset_desk, "full": _preset_full}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[name]()


def _coerce(key, raw, kind):
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(part) for part in text.split(",") if part.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def apply_overrides(config, values):
    """
    Return `config` with dotted-key overrides applied.

    Raises:
        ConfigError: unknown section or key, unparsable value, or a value
            the section's own validation rejects
    """
    updates = {}
    seed = config.seed
    for key, raw in values.items():
        if raw is None:
            raise ConfigError(f"{key}: missing value")
        if key == "seed":
            seed = _coerce(key, raw, int)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown configuration key {key!r}")
        types = _field_types(type(getattr(config, section)))
        if name not in types:
            raise ConfigError(f"unknown configuration key {key!r}; {section} accepts {sorted(types)}")
        updates.setdefault(section, {})[name] = _coerce(key, raw, types[name])

    sections = {}
    for section, changes in updates.items():
        try:
            sections[section] = replace(getattr(config, section), **changes)
        except ValueError as exc:
            raise ConfigError(f"invalid {section} settings: {exc}") from exc
    return replace(config, seed=seed, **sections)


def load_config(path=None, preset_name="desk", overrides=None):
    """
    Build a RunConfig from a preset, an optional key=value file and
    explicit overrides (applied in that order).
    """
    config = preset(preset_name)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"configuration file {path} does not exist")
        config = apply_overrides(config, dotenv_values(path))
        logger.debug(f"Loaded configuration from {path}")
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_items(config):
    """Every key with its resolved value, in section order."""
    items = []
    for section in SECTIONS:
        values = getattr(config, section)
        for f in fields(values):
            items.append((f"{section}.{f.name}", _format(getattr(values, f.name))))
    items.append(("seed", str(config.seed)))
    return items


def save_config(path, config):
    """Write the complete resolved configuration; `load_config(path)` reproduces it."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("# Resolved run configuration; every default is listed.\n")
        current = None
        for key, value in config_items(config):
            section = key.partition(".")[0]
            if section != current:
                fh.write(f"\n# [{section}]\n")
                current = section
            fh.write(f"{key}={value}\n")
    return path


def env_workers(default=1):
    """Worker count from CLOTH_WORKERS, falling back to `default`."""
    raw = os.getenv("CLOTH_WORKERS")
    if not raw:
        return default
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"CLOTH_WORKERS must be an integer, got {raw!r}") from None
    if workers < 1:
        raise ConfigError(f"CLOTH_WORKERS must be >= 1, got {workers}")
    return workers
