"""Named sub-seed derivation so every stage reruns independently yet reproducibly."""

import hashlib


def sub_seed(seed: int, name: str) -> int:
    """Derive a stable 32-bit sub-seed from a master seed and a stage name."""
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")
