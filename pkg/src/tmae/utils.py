"""Small shared helpers: seeding, rounding, atomic file writes."""

from __future__ import annotations

import hashlib
import math
import os
import tempfile
from pathlib import Path


def round_half_up(x: float) -> int:
    """Round with halves away from zero (for x >= 0), e.g. 12.5 -> 13.

    Python's builtin round() uses banker's rounding, which would map
    12.5 -> 12; frame-index arithmetic here needs the conventional rule.
    """
    return int(math.floor(x + 0.5))


def derive_seed(root_seed: int, *labels) -> int:
    """Derive an independent 63-bit seed from a root seed and labels.

    Each subsystem (data, mask, init, shuffle, ...) draws its stream from
    its own label so one subsystem's seed can vary without disturbing the
    others.
    """
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def atomic_write_bytes(path: Path | str, payload: bytes) -> None:
    """Write via a temp file + rename so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path | str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
