import contextlib

from avtrack import backend

BACKENDS = [m.NAME for m in backend.available()]


@contextlib.contextmanager
def using(name):
    """Temporarily make backend ``name`` the active one."""
    saved = backend.active
    backend.active = {m.NAME: m for m in backend.available()}[name]
    try:
        yield backend.active
    finally:
        backend.active = saved
