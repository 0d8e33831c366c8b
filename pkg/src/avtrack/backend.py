"""Kernel backend selection.

The fixed-order forward kernels (conv1d, conv3d, bilinear score) come from
the compiled extension ``avtrack._kernels`` when it is importable, otherwise
from the pure-numpy module ``avtrack._fallback``.  Both accumulate every
output element in the same documented order:

* conv1d: ``acc = 0``; for tap ``k`` ascending, for input channel ``ci``
  ascending: ``acc += x[b, t+k-pad, ci] * w[k, ci, co]`` (taps that fall in
  the zero padding are skipped); finally ``out = acc + bias[co]``.
* conv3d: the same with taps ordered ``(kt, kh, kw)`` row-major and the input
  channel innermost.
* bilinear: ``proj[k, j, l] = sum_m W[l, m] * V[k, j, m]`` with ``m``
  ascending, then ``S[i, j, k] = sum_l Q[i, j, l] * proj[k, j, l]`` with ``l``
  ascending.

Set ``AVTRACK_BACKEND=python`` to force the fallback, ``compiled`` to require
the extension.
"""

import os

from avtrack import _fallback as fallback

try:
    from avtrack import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def _select():
    choice = os.environ.get("AVTRACK_BACKEND", "auto").lower()
    if choice == "python":
        return fallback
    if choice == "compiled":
        if compiled is None:
            raise ImportError("AVTRACK_BACKEND=compiled but avtrack._kernels is not built")
        return compiled
    if choice != "auto":
        raise ValueError(f"unknown AVTRACK_BACKEND {choice!r}")
    return compiled if compiled is not None else fallback


active = _select()
NAME = active.NAME


def available():
    """Backends importable in this environment, fallback first."""
    return [fallback] + ([compiled] if compiled is not None else [])
