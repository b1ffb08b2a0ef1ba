"""Counter-based random streams.

Every random draw made for one agent at one simulation step comes from its
own generator keyed by (seed, step, agent id, purpose). Results therefore do
not depend on agent order, worker count or how many other agents exist.
"""

from __future__ import annotations

import zlib
from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    """What a stream is drawn for; part of the stream key."""

    ORIGIN_PERTURBATION = 0
    ACTION_SAMPLE = 1
    AUGMENT_LATENT = 2
    ROLLOUT_START = 3
    BATCH = 4
    INIT = 5


def agent_key(agent_id: str) -> int:
    """Stable 32-bit key of an agent id."""
    return zlib.crc32(agent_id.encode("utf-8"))


def counter_stream(seed: int, step: int, agent_id: str, purpose: Purpose) -> np.random.Generator:
    """Return the generator for one (seed, step, agent, purpose) key.

    Args:
        seed: Run seed
        step: Simulation or training step
        agent_id: Agent identifier ("" for draws not tied to an agent)
        purpose: Draw purpose

    Returns:
        Philox-backed generator
    """
    entropy = [int(seed) & 0xFFFFFFFF, int(step) & 0xFFFFFFFF, agent_key(agent_id), int(purpose)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def step_stream(seed: int, step: int, purpose: Purpose) -> np.random.Generator:
    """Return a generator for draws shared by a whole step."""
    return counter_stream(seed, step, "", purpose)


def derive_seed(seed: int, *keys: int) -> int:
    """Return a 32-bit seed for an independent sub-run keyed by integers."""
    entropy = [int(seed) & 0xFFFFFFFF, *(int(key) & 0xFFFFFFFF for key in keys)]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
