"""
Opsense — Reconnection backoff
Exponential backoff with jitter for coordinator registration, push delivery
retries and persistent stream reconnects.

Default policy: 250 ms doubling up to an 8 s cap, jittered ±20%, retried
forever. reset() after any success.
"""

from __future__ import annotations

import random

from . import config


class ExponentialBackoff:
    def __init__(
        self,
        base_delay: float = config.BACKOFF_BASE_S,
        max_delay: float = config.BACKOFF_MAX_S,
        multiplier: float = 2.0,
        jitter_range: float = config.BACKOFF_JITTER,
        rng: random.Random | None = None,
    ):
        self.base_delay = base_delay
        self.max_delay = max_delay
        self.multiplier = multiplier
        self.jitter_range = jitter_range
        self._rng = rng or random.Random()
        self._attempt = 0

    @property
    def attempt(self) -> int:
        """Failed attempts since the last reset."""
        return self._attempt

    def next_delay(self) -> float:
        """Next delay in seconds; increments the attempt counter."""
        delay = min(self.base_delay * (self.multiplier**self._attempt), self.max_delay)
        delay *= 1 + self._rng.uniform(-self.jitter_range, self.jitter_range)
        self._attempt += 1
        return max(0.0, delay)

    def reset(self) -> None:
        self._attempt = 0
