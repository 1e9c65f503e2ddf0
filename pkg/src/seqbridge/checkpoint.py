"""Checkpoint container: one-line JSON header plus raw float64 blobs.

The header carries a format version, a model kind tag, arbitrary metadata,
a tokenizer digest, and a manifest mapping parameter name -> shape -> byte
offset. Blobs follow in manifest order, little-endian float64. The whole
parameter section is digested with 64-bit FNV-1a and the digest stored in
the header, so a corrupted or truncated file fails loudly at load time.
"""

import json
import os

import numpy as np

from .errors import IntegrityError
from .rng import hash_bytes, hash_string
from .tensor import Tensor

FORMAT_VERSION = 1


def _blob(t: Tensor) -> bytes:
    return np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def params_digest(params: dict[str, Tensor], names=None) -> int:
    """FNV-1a over parameter bytes in sorted-name order.

    `names` restricts the digest to a subgroup (still sorted), which is how
    per-group freeze checks are expressed.
    """
    order = sorted(params if names is None else names)
    missing = [n for n in order if n not in params]
    if missing:
        raise IntegrityError(f"digest refers to unknown parameters {missing}")
    return hash_bytes(b"".join(_blob(params[n]) for n in order))


def tokenizer_digest(tok) -> int:
    """Stable digest of a tokenizer's defining fields."""
    if hasattr(tok, "merges"):
        payload = {"kind": "lm", "V": tok.V, "merges": [list(m) for m in tok.merges]}
    else:
        payload = {"kind": "enc", "V": tok.V, "n_languages": tok.n_languages}
    return hash_string(json.dumps(payload, sort_keys=True))


def save_checkpoint(
    path: str,
    kind: str,
    meta: dict,
    params: dict[str, Tensor],
    tok_digest: int = 0,
) -> int:
    """Write atomically (temp file, then rename). Returns the digest."""
    order = sorted(params)
    manifest = []
    offset = 0
    blobs = []
    for name in order:
        b = _blob(params[name])
        manifest.append([name, list(params[name].shape), offset])
        blobs.append(b)
        offset += len(b)
    digest = hash_bytes(b"".join(blobs))
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tokenizer_digest": f"{tok_digest:016x}",
        "manifest": manifest,
        "digest": f"{digest:016x}",
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)
    return digest


def load_checkpoint(path: str) -> tuple[dict, dict[str, Tensor]]:
    """Read and verify a container; parameters come back frozen."""
    with open(path, "rb") as f:
        header_line = f.readline()
        body = f.read()
    try:
        header = json.loads(header_line)
    except ValueError as e:
        raise IntegrityError(f"unreadable checkpoint header in {path}: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {header.get('version')}")
    if hash_bytes(body) != int(header["digest"], 16):
        raise IntegrityError(f"parameter digest mismatch in {path}")
    params: dict[str, Tensor] = {}
    for name, shape, offset in header["manifest"]:
        r, c = shape
        nbytes = r * c * 8
        if offset + nbytes > len(body):
            raise IntegrityError(f"manifest overruns blob section for {name}")
        arr = np.frombuffer(body, dtype="<f8", count=r * c, offset=offset)
        params[name] = Tensor(arr.reshape(r, c).copy())
    return header, params
