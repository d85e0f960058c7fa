"""Hot-loop kernels: compiled extension when available, pure Python otherwise.

Set ``MASKFUSE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels as python

cython = None
if os.environ.get("MASKFUSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as cython
    except ImportError:
        cython = None

_active = cython if cython is not None else python

BACKEND = _active.BACKEND
KeyIndex = _active.KeyIndex
IdMap = _active.IdMap
IdChains = _active.IdChains
RewriteLabels = _active.RewriteLabels


def backends():
    """Importable kernel modules by name, active one first."""
    found = {BACKEND: _active}
    for mod in (cython, python):
        if mod is not None:
            found.setdefault(mod.BACKEND, mod)
    return found
