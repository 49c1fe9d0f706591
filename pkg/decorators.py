# decorators.py — Dash-cam velocity estimation
# encoding: utf-8

import time
from functools import wraps

from config import get_logger
from geometry import VelocityError

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2


def exit_gate(tag):
    """Run a sub-command and turn its outcome into an exit status.
    VelocityError → 1, OSError → 2, anything returned → 0."""
    log = get_logger(tag)

    def wrap(f):
        @wraps(f)
        def decorated(*args, **kwargs):
            try:
                f(*args, **kwargs)
                return EXIT_OK
            except VelocityError as e:
                log.error(str(e))
                return EXIT_INVALID
            except OSError as e:
                where = f' ({e.filename})' if getattr(e, 'filename', None) else ''
                log.error(f'{e.strerror or e}{where}')
                return EXIT_IO
        return decorated
    return wrap


def timed(tag):
    """Log wall time of the wrapped call at debug level."""
    log = get_logger(tag)

    def wrap(f):
        @wraps(f)
        def decorated(*args, **kwargs):
            start = time.perf_counter()
            try:
                return f(*args, **kwargs)
            finally:
                log.debug(f'{f.__name__} took {(time.perf_counter() - start) * 1000:.1f} ms')
        return decorated
    return wrap
