"""Injectable clocks.

Every component takes a clock so tests can pin time. Timestamps are
unix-epoch microseconds; components running on one host therefore share a
timeline, which is what the desk-scale benchmark assumes.
"""

from __future__ import annotations

import asyncio
import time


class SystemClock:
    def now_us(self) -> int:
        return time.time_ns() // 1000

    async def sleep(self, seconds: float) -> None:
        if seconds > 0:
            await asyncio.sleep(seconds)


class ManualClock:
    """Test clock: time only moves when told to (sleep() advances instantly)."""

    def __init__(self, start_us: int = 0):
        self._now_us = start_us

    def now_us(self) -> int:
        return self._now_us

    def advance_us(self, delta_us: int) -> None:
        self._now_us += delta_us

    def advance_ms(self, delta_ms: float) -> None:
        self._now_us += int(delta_ms * 1000)

    async def sleep(self, seconds: float) -> None:
        self._now_us += int(seconds * 1_000_000)
        await asyncio.sleep(0)


SYSTEM_CLOCK = SystemClock()
