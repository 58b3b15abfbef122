"""Named seed derivation so every random stream is reproducible from one root."""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *names) -> int:
    """Deterministic 63-bit seed for a named sub-stream of ``root``."""
    text = str(root) + "/" + "/".join(str(n) for n in names)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
