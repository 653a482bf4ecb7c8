"""File formats, hashing, and seed derivation.

All binary artifacts are raw little-endian arrays with JSON sidecars so
they can be read from any language without a dependency on this package.
Content hashes are SHA-256 over the exact bytes written to disk; JSON is
hashed in canonical form (sorted keys, no whitespace).
"""

import hashlib
import json
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# Canonical JSON + hashing
# ---------------------------------------------------------------------------


def canonical_json(obj) -> str:
    """Serialize to a canonical JSON string (sorted keys, compact)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def json_hash(obj) -> str:
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def file_hash(path) -> str:
    """SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Seed derivation
# ---------------------------------------------------------------------------


def derive_seed(master_seed: int, *parts) -> int:
    """Derive a stable 63-bit child seed from a master seed and labels.

    SHA-256 based, so results are identical across platforms, Python
    versions, and worker schedules.  ``parts`` may mix strings and ints.
    """
    text = ":".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_from(seed: int, *parts) -> np.random.Generator:
    """Generator seeded by :func:`derive_seed` of ``seed`` and ``parts``."""
    if parts:
        seed = derive_seed(seed, *parts)
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# Raw array files
# ---------------------------------------------------------------------------


def write_raw_array(path, array: np.ndarray, dtype) -> str:
    """Write ``array`` row-major as raw little-endian ``dtype``; returns hash."""
    data = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    payload = data.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return sha256_hex(payload)


def read_raw_array(path, shape, dtype) -> np.ndarray:
    """Read a raw little-endian array written by :func:`write_raw_array`."""
    data = np.fromfile(path, dtype=np.dtype(dtype).newbyteorder("<"))
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(
            f"{path}: expected {expected} elements for shape {tuple(shape)}, "
            f"found {data.size}"
        )
    return data.reshape(shape).astype(dtype)


def write_json(path, obj) -> str:
    """Write ``obj`` as indented JSON; returns hash of the canonical form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return json_hash(obj)


def read_json(path):
    return json.loads(Path(path).read_text())
