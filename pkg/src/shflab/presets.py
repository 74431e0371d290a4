"""Named experiment presets.

``GROWTH_FULL`` is the headline second-moment growth experiment: the
finest lattice the library targets by default, with the epsilon ladder
chosen so the macroscopic balls hold 8 to 64 lattice sites across.
Runs are deterministic in (seed, replicas), so results are cacheable.
"""

from .dpre_simulator import BERNOULLI, PolymerConfig

GROWTH_FULL = {
    "n_horizon": 16384,
    "theta": 0.0,
    "disorder_law": BERNOULLI,
    "replicas": 4096,
    "seed": 7,
    "dtype": "float32",
}

#: ball radii of 8, 16, 32, 64 lattice sites at n_horizon = 16384
GROWTH_EPSILONS = (0.0625, 0.125, 0.25, 0.5)

GROWTH_SMALL = {
    "n_horizon": 1024,
    "theta": 0.0,
    "disorder_law": BERNOULLI,
    "replicas": 256,
    "seed": 7,
    "dtype": "float32",
}


def growth_config(full: bool = True) -> PolymerConfig:
    params = GROWTH_FULL if full else GROWTH_SMALL
    return PolymerConfig.at_criticality(**params)
