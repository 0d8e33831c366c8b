import os
import subprocess
import sys

import numpy as np
import pytest

from avtrack import backend


def _active_name(choice):
    env = dict(os.environ, AVTRACK_BACKEND=choice)
    return subprocess.run([sys.executable, "-c", "from avtrack import backend; print(backend.NAME)"],
                          env=env, capture_output=True, text=True)


def test_python_backend_can_be_forced():
    res = _active_name("python")
    assert res.returncode == 0 and res.stdout.strip() == "python"


def test_unknown_backend_rejected():
    res = _active_name("fortran")
    assert res.returncode != 0 and "AVTRACK_BACKEND" in res.stderr


@pytest.mark.skipif(backend.compiled is None, reason="extension not built")
def test_compiled_is_default_when_built():
    assert _active_name("auto").stdout.strip() == "compiled"
    assert _active_name("compiled").stdout.strip() == "compiled"


def test_fallback_always_available():
    assert backend.available()[0] is backend.fallback


@pytest.mark.skipif(backend.compiled is None, reason="extension not built")
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_backends_agree_bitwise_on_full_sized_layers(dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 9, 240)).astype(dtype)
    w = rng.standard_normal((5, 240, 64)).astype(dtype)
    b = rng.standard_normal(64).astype(dtype)
    outs = []
    for mod in backend.available():
        out = np.empty((2, 9, 64), dtype)
        mod.conv1d_forward(x, w, b, out)
        outs.append(out)
    assert np.array_equal(outs[0], outs[1])

    q = rng.standard_normal((3, 4, 16)).astype(dtype)
    wt = rng.standard_normal((12, 16)).astype(dtype)
    v = rng.standard_normal((5, 4, 12)).astype(dtype)
    res = []
    for mod in backend.available():
        proj, S = np.empty((5, 4, 16), dtype), np.empty((3, 4, 5), dtype)
        mod.bilinear_forward(q, wt, v, proj, S)
        res.append(S)
    assert np.array_equal(res[0], res[1])
