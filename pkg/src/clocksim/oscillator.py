"""Local oscillator frequency-error synthesis.

The servo samples the oscillator once per side interrogation, so the noise
is generated on that grid and held constant within each step. Two stochastic
components are modeled, white frequency noise and random-walk frequency
noise, both specified as fractional-frequency Allan deviations at 1 s, plus
a deterministic linear drift and static offset in absolute hertz.

Scaling of the per-step draws follows from the Allan relations: white FM
with per-step sigma = white_fm / sqrt(step) gives ADEV(tau) =
white_fm / sqrt(tau), and random-walk increments with
sigma = random_walk_fm * sqrt(3 * step) give ADEV(tau) =
random_walk_fm * sqrt(tau).

Flicker frequency noise is not modeled; the white and random-walk terms are
what the two integrator orders exist to track. Generation is lazy in blocks
so long runs stay cheap, and the draw for grid index k never depends on the
order in which indices are queried.
"""

from __future__ import annotations

import math

import numpy as np

from clocksim.config import NoiseSpec
from clocksim.streams import STREAMS

BLOCK = 65536


class LocalOscillator:
    """Deterministic, seeded noise series on a fixed time grid.

    Parameters
    ----------
    spec : NoiseSpec
    seed : master seed; the oscillator uses its own named substream
    step : s, grid spacing (the servo's side interrogation time)
    ref_frequency : Hz, converts the fractional noise components to
        absolute frequency error. Use 1.0 to work in fractional units.
    """

    def __init__(self, spec, seed, step, ref_frequency=1.0):
        if step <= 0:
            raise ValueError("step must be > 0")
        self.spec = spec
        self.seed = int(seed)
        self.step = float(step)
        self.ref_frequency = float(ref_frequency)
        self._white_sigma = spec.white_fm / math.sqrt(step)
        self._rw_sigma = spec.random_walk_fm * math.sqrt(3.0 * step)
        self._stochastic = spec.white_fm > 0.0 or spec.random_walk_fm > 0.0
        self._blocks = {}
        self._rw_tail = 0.0
        self._n_blocks = 0

    def _block_rng(self, index):
        return np.random.default_rng([self.seed, STREAMS["lo"], index])

    def _ensure_block(self, index):
        while self._n_blocks <= index:
            rng = self._block_rng(self._n_blocks)
            white = rng.normal(0.0, self._white_sigma, BLOCK) if self.spec.white_fm else 0.0
            if self.spec.random_walk_fm:
                rw = self._rw_tail + np.cumsum(rng.normal(0.0, self._rw_sigma, BLOCK))
                self._rw_tail = rw[-1]
            else:
                rw = 0.0
            self._blocks[self._n_blocks] = white + rw
            self._n_blocks += 1

    def fractional_noise_at(self, index):
        """Stochastic fractional-frequency noise at grid index k."""
        if not self._stochastic:
            return 0.0
        if index < 0:
            raise ValueError("grid index must be >= 0")
        block, i = divmod(int(index), BLOCK)
        self._ensure_block(block)
        return float(self._blocks[block][i])

    def offset_at(self, index, t=None):
        """Frequency error in Hz at grid index k and time t.

        The stochastic components are scaled by the reference frequency;
        drift is evaluated at continuous time t (defaulting to k * step).
        """
        if t is None:
            t = index * self.step
        noise = self.fractional_noise_at(index) * self.ref_frequency
        return noise + self.spec.linear_drift * t + self.spec.deterministic_offset

    def offset(self, t):
        """Frequency error in Hz at time t >= 0."""
        if t < 0:
            raise ValueError("t must be >= 0")
        return self.offset_at(int(t / self.step), t)

    def series(self, n):
        """First n grid values of the frequency error in Hz."""
        if n <= 0:
            return np.zeros(0)
        last_block = (n - 1) // BLOCK
        if self._stochastic:
            self._ensure_block(last_block)
            noise = np.concatenate(
                [np.broadcast_to(self._blocks[b], (BLOCK,)) for b in range(last_block + 1)]
            )[:n]
        else:
            noise = np.zeros(n)
        t = np.arange(n) * self.step
        return (
            noise * self.ref_frequency
            + self.spec.linear_drift * t
            + self.spec.deterministic_offset
        )


def lo_offset(t, spec, seed, step=1.0, ref_frequency=1.0):
    """Frequency error in Hz at time t for the given noise spec and seed.

    Convenience wrapper constructing a LocalOscillator per call; for long
    runs keep an instance instead.
    """
    return LocalOscillator(spec, seed, step, ref_frequency).offset(t)
