"""Reproducible random number streams.

One stream per experimental unit plus one "common" stream for shared
parameter updates. Unit-level updates always draw from the unit's own
stream, so results are identical no matter how units are scheduled
across workers.
"""

from __future__ import annotations

import numpy as np


class RngHub:
    """Per-unit independent PCG64 streams derived from a single seed.

    Stream 0 is reserved for common (cross-unit) updates; stream i+1
    belongs to unit i in canonical dataset order.
    """

    def __init__(self, seed: int, n_units: int):
        self.seed = int(seed)
        self.n_units = int(n_units)
        children = np.random.SeedSequence(self.seed).spawn(self.n_units + 1)
        self.common = np.random.default_rng(children[0])
        self.units = [np.random.default_rng(c) for c in children[1:]]

    def unit(self, i: int) -> np.random.Generator:
        return self.units[i]

    def unit_normals(self, shape_per_unit: tuple[int, ...]) -> np.ndarray:
        """Draw normals for every unit from its own stream.

        Returns an array of shape (n_units, *shape_per_unit). Unit i's
        slice depends only on unit i's stream state, never on the other
        units, which keeps vectorised updates scheduling-independent.
        """
        out = np.empty((self.n_units,) + tuple(shape_per_unit))
        for i, g in enumerate(self.units):
            out[i] = g.standard_normal(shape_per_unit)
        return out

    def unit_uniforms(self, shape_per_unit: tuple[int, ...] = ()) -> np.ndarray:
        out = np.empty((self.n_units,) + tuple(shape_per_unit))
        for i, g in enumerate(self.units):
            out[i] = g.uniform(size=shape_per_unit)
        return out
