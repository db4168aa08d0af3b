"""Kernel backend selection.

The compiled extension (``ida._kernels``, Cython) is preferred when it
imports cleanly; otherwise the NumPy fallback (``ida._kernels_py``) backs
the autodiff layer. Set ``IDA_BACKEND=py`` or ``IDA_BACKEND=ext`` to force
one side; forcing the extension raises if it was not built.

Both backends are deterministic run-to-run, but their floating-point
results may differ in the last bits (BLAS vs. loop summation order), so
reproducibility guarantees hold per backend. The active backend name is
recorded in experiment manifests.
"""

import os

_choice = os.environ.get("IDA_BACKEND", "auto").strip().lower() or "auto"

if _choice in ("auto", "ext", "compiled"):
    try:
        from . import _kernels as kernels
        BACKEND = "ext"
    except ImportError:
        if _choice != "auto":
            raise ImportError(
                "IDA_BACKEND=ext requested but the compiled kernel module "
                "is not built; run `pip install -e .` with a C compiler"
            ) from None
        from . import _kernels_py as kernels
        BACKEND = "py"
elif _choice in ("py", "python", "numpy"):
    from . import _kernels_py as kernels
    BACKEND = "py"
else:
    raise ValueError(f"unrecognized IDA_BACKEND value: {_choice!r}")
