from dataclasses import dataclass, field

import numpy as np


class SimulatorFailure(RuntimeError):
    """Recoverable signal that a simulator could not produce data at a given theta."""


@dataclass
class PolicyGrid:
    """Solved decision rule tabulated on a (K, Z) grid.

    ``policy[i, j]`` is the decision at ``k_grid[i]`` and ``z_grid[j]``
    (consumption for the RBC model, next-period capital index for VFI).
    """

    k_grid: np.ndarray
    z_grid: np.ndarray
    policy: np.ndarray
    transition: np.ndarray
    value: np.ndarray | None = None
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    info: dict = field(default_factory=dict)


def interp_extrap(x, xp, fp):
    """Piecewise-linear interpolation with linear extrapolation beyond the ends.

    ``xp`` must be strictly increasing.
    """
    x = np.asarray(x, dtype=float)
    idx = np.clip(np.searchsorted(xp, x) - 1, 0, len(xp) - 2)
    x0 = xp[idx]
    x1 = xp[idx + 1]
    w = (x - x0) / (x1 - x0)
    return fp[idx] + w * (fp[idx + 1] - fp[idx])
