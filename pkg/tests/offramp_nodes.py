"""Random offramp node problems shared by the calibration and acceptance tests.

Inputs: GP, managed, optionally an onramp. Outputs: GP, managed, offramp.
Full-access nodes solve one ratio for the GP and managed inputs; gated nodes
solve it for the GP input only, with destination classes fixed.
"""

import numpy as np

from mlfreeway.calibration import OfframpProblem
from mlfreeway.node_model import NodeInputs

GP, ML, OFF = 0, 1, 2


def offramp_problem(rng, gated=None):
    gated = bool(rng.random() < 0.5) if gated is None else gated
    onramp = bool(rng.random() < 0.5)
    m = 3 if onramp else 2
    c = int(rng.integers(1, 4)) + (1 if gated else 0)  # gated: last class is a destination class
    caps = np.array([7600.0, 1800.0, 1500.0])[:m]
    S = rng.uniform(0.0, 1.0, (m, c)) * caps[:, None] / c * rng.uniform(0.3, 1.4, (m, 1))
    R = np.array([rng.uniform(0, 7600), rng.uniform(0, 1800), rng.uniform(0, 1500)])
    beta = np.zeros((m, 3, c))
    for i in range(m):
        x = rng.random(c)
        beta[i, GP], beta[i, ML] = x, 1.0 - x
    controlled = np.zeros((m, c), dtype=bool)
    controlled[0] = True
    if gated:
        controlled[0, -1] = False
        exits = bool(rng.random() < 0.5)  # the destination class targets this offramp or a later one
        beta[0, :, -1] = [0.0, 0.0, 1.0] if exits else [1.0, 0.0, 0.0]
        beta[1, :, -1] = [0.0, 0.0, 1.0] if exits else [0.0, 1.0, 0.0]
    else:
        controlled[1] = True
    beta[:, OFF][controlled] = 0.0
    p = caps / caps.sum()
    eta = float(rng.choice([1.0, 0.0, rng.random()]))
    inputs = NodeInputs(S, R, beta, p, eta)
    return OfframpProblem.from_node_inputs(inputs, OFF, controlled, fallback=np.array([GP, ML, GP][:m])), gated
