"""Small mesh and sample builders shared by the tests."""
from src.utils.mesh import compute_visibility
from src.utils.observation import observe
from src.utils.sim import SimParams, canonical_state
from src.utils.training import Sample


def resting(mesh, params=None):
    """Flat mesh lying on the table at rest height."""
    return canonical_state(mesh, params or SimParams()).to_mesh()


def bumped(mesh, lift=0.02, params=None):
    """Resting mesh with its center vertex raised by `lift`."""
    positions = resting(mesh, params).positions.copy()
    positions[mesh.n_vertices // 2, 2] += lift
    return mesh.with_positions(positions, compute_visibility(mesh, positions=positions))


def make_sample(mesh, world, obs_config, tier="drag", seed=0):
    """Sample and observation of a world-frame mesh."""
    obs, centered = observe(world, obs_config, mesh.canonical_extent)
    return Sample(image=obs.image, positions=centered.positions, flags=centered.flags, tier=tier, seed=seed), obs
