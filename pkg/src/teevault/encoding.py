"""Canonical serialization helpers.

Canonical JSON here means: keys sorted, no insignificant whitespace,
non-ASCII preserved. Two semantically equal dicts always serialize to
identical bytes, which is what certificate hashing and program
measurement rely on.
"""

import base64
import json


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_bytes(obj) -> bytes:
    return canonical_dumps(obj).encode("utf-8")


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)
