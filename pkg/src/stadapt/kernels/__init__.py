"""Hot kernels: quadtree point location and CSR block scatter.

A compiled Cython backend is used when the extension built; otherwise the
numpy fallback takes over. STADAPT_BACKEND=py|cy forces the choice (cy
raises if the extension is missing).
"""

import os

_choice = os.environ.get("STADAPT_BACKEND", "").strip().lower()
if _choice not in ("", "py", "cy"):
    raise RuntimeError(f"STADAPT_BACKEND must be 'py' or 'cy', got {_choice!r}")

if _choice == "py":
    from . import _py_kernels as _impl

    BACKEND = "py"
else:
    try:
        from . import _cy_kernels as _impl

        BACKEND = "cy"
    except ImportError:
        if _choice == "cy":
            raise
        from . import _py_kernels as _impl

        BACKEND = "py"

locate_points = _impl.locate_points
csr_block_scatter = _impl.csr_block_scatter
