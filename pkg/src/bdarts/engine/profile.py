"""Per-primitive records used by the cost estimators and model summaries."""

import contextlib

_scope = []
_records = None


@contextlib.contextmanager
def scope(name):
    _scope.append(name)
    try:
        yield
    finally:
        _scope.pop()


@contextlib.contextmanager
def recording():
    """Collect one record per primitive executed inside the block."""
    global _records
    prev, _records = _records, []
    try:
        yield _records
    finally:
        _records = prev


def record(op, out_shape, mult_adds=0, params=0):
    if _records is None:
        return
    _records.append({
        "layer": ".".join(s for s in _scope if s),
        "op": op,
        "shape": tuple(int(d) for d in out_shape),
        "mult_adds": int(mult_adds),
        "params": int(params),
    })
