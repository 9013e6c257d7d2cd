"""Command-line entry point.

``MIXSEG_THREADS`` is applied to the native BLAS/OpenMP pools here, before
numpy is first imported.
"""

from __future__ import annotations

import os
from collections.abc import Sequence

NATIVE_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def cap_native_threads() -> None:
    threads = os.getenv("MIXSEG_THREADS")
    if threads and threads.isdigit() and int(threads) > 0:
        for name in NATIVE_THREAD_VARS:
            os.environ.setdefault(name, threads)


def main(argv: Sequence[str] | None = None) -> int:
    cap_native_threads()
    from .app import main as run

    return run(argv)


__all__ = ["main"]
