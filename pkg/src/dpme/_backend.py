"""Kernel backend selection: compiled extension when built, pure Python otherwise.

Set DPME_BACKEND=python to force the fallback (used by the benchmark and the
backend-agreement tests).
"""

import os

if os.environ.get("DPME_BACKEND", "").lower() == "python":
    from ._cd_py import cd_sweeps, cd_sweeps_gram

    BACKEND = "python"
else:
    try:
        from ._cd_fast import cd_sweeps, cd_sweeps_gram

        BACKEND = "compiled"
    except ImportError:  # extension not built on this install
        from ._cd_py import cd_sweeps, cd_sweeps_gram

        BACKEND = "python"

__all__ = ["cd_sweeps", "cd_sweeps_gram", "BACKEND"]
