"""Named seed derivation so every random stream hangs off one root seed."""

from __future__ import annotations

import hashlib


def derive_seed(root_seed: int, *names) -> int:
    """Derive a child seed from ``root_seed`` and a sequence of names.

    Stable across runs and platforms; distinct name tuples give independent
    streams for all practical purposes.
    """
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") % (2**32)
