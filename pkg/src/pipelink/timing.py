"""Monotonic-clock helpers shared by the simulator and the measurement code."""

import time

# Below this remainder we spin instead of sleeping; time.sleep() here
# overshoots by 60-280us, which is too coarse for shaping. The window must
# stay small: many threads sleep concurrently, and long spins would fight
# for the CPU and the interpreter lock.
_SPIN_WINDOW = 0.0003


def now() -> float:
    """Single-host monotonic clock used for every timestamp in this package."""
    return time.perf_counter()


def precise_sleep(duration: float) -> None:
    """Sleep for `duration` seconds with sub-millisecond error.

    Coarse sleep first, then a short spin on the monotonic clock for the
    remainder. Negative or zero durations return immediately.
    """
    if duration <= 0.0:
        return
    deadline = time.perf_counter() + duration
    coarse = duration - _SPIN_WINDOW
    if coarse > 0.0:
        time.sleep(coarse)
    while time.perf_counter() < deadline:
        time.sleep(0)  # yield, so concurrent timed threads are not starved


def sleep_until(deadline: float) -> None:
    """Sleep until the monotonic clock reaches `deadline`."""
    precise_sleep(deadline - time.perf_counter())
