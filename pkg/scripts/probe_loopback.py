#!/usr/bin/env python
"""Measure loopback link characteristics with the bandwidth probe.

Starts a receiver, pushes a few sized transfers through it, and prints the
per-round and median bandwidth. Useful for sanity-checking that the traffic
shaping budget (simulated bytes over simulated bandwidth) dwarfs the real
cost of moving frames through the kernel.
"""

import argparse
import sys

from pipelink.fleet import ProbeServer, measure_link


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--chunk-mb", type=float, default=4.0, help="transfer size per round"
    )
    parser.add_argument("--rounds", type=int, default=5)
    parser.add_argument("--warmup", type=int, default=3)
    args = parser.parse_args()

    chunk = int(args.chunk_mb * 1e6)
    server = ProbeServer()
    try:
        median_bps, samples = measure_link(
            server.endpoint(0),
            server.endpoint(1),
            chunk_bytes=chunk,
            warmup=args.warmup,
            rounds=args.rounds,
        )
    finally:
        server.close()

    for i, s in enumerate(samples):
        print(
            f"round {i}: {s.bytes_sent} bytes in {s.elapsed_sec * 1000:.2f} ms "
            f"= {s.bandwidth_bps / 1e6:.1f} MB/s"
        )
    print(f"median: {median_bps / 1e6:.1f} MB/s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
