"""Deterministic random streams.

All randomness in the engine flows through counter-based Philox generators
derived from one integer seed plus a short role label. The same
(seed, role) always yields the same stream, on any machine, so multi-seed
sweeps are reproducible and independent streams can safely run in parallel.
"""

import numpy as np

# Recorded in run manifests so results can be tied to the exact bit stream.
RNG_ALGORITHM = "philox4x64-10/numpy"

# Fixed role labels; hashed into the stream key so streams never collide.
ROLE_INIT_FORWARD = "init_forward"
ROLE_INIT_BACKWARD = "init_backward"
ROLE_BATCH_FORWARD = "batch_forward"
ROLE_BATCH_BACKWARD = "batch_backward"
ROLE_PHANTOM = "phantom"


def make_rng(seed: int, role: str = "") -> np.random.Generator:
    """Return an independent Philox stream for (seed, role)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if role:
        entropy.extend(role.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
