"""Request/response message schema.

Every message is UTF-8 JSON. Requests: {"type", "path", "data" (base64),
"auth" (base64, optional)}. Responses: {"status", "data" (base64),
"detail"}. The 4-byte big-endian length prefix lives one layer down, in
the transport session framing; this module only maps dicts to bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

from .encoding import b64, unb64
from .errors import BadFrame

REQUEST_TYPES = ("quote", "upload", "download", "remove", "client_get")

SUCCESS = "SUCCESS"
FAILURE = "FAILURE"
STALE_WARNING = "STALE_WARNING"
_STATUSES = (SUCCESS, FAILURE, STALE_WARNING)


@dataclass(frozen=True)
class Request:
    type: str
    path: str = ""
    data: bytes = b""
    auth: Optional[bytes] = None


@dataclass(frozen=True)
class Response:
    status: str
    data: bytes = b""
    detail: str = ""


def encode_request(req: Request) -> bytes:
    body = {"type": req.type, "path": req.path, "data": b64(req.data)}
    if req.auth is not None:
        body["auth"] = b64(req.auth)
    return json.dumps(body).encode("utf-8")


def decode_request(raw: bytes) -> Request:
    body = _load_object(raw)
    rtype = body.get("type")
    if rtype not in REQUEST_TYPES:
        raise BadFrame(f"unknown request type: {rtype!r}")
    path = body.get("path", "")
    if not isinstance(path, str):
        raise BadFrame("path must be a string")
    auth = None
    if "auth" in body and body["auth"] is not None:
        auth = _b64_field(body, "auth")
    return Request(type=rtype, path=path, data=_b64_field(body, "data"), auth=auth)


def encode_response(resp: Response) -> bytes:
    return json.dumps(
        {"status": resp.status, "data": b64(resp.data), "detail": resp.detail}
    ).encode("utf-8")


def decode_response(raw: bytes) -> Response:
    body = _load_object(raw)
    status = body.get("status")
    if status not in _STATUSES:
        raise BadFrame(f"unknown status: {status!r}")
    detail = body.get("detail", "")
    if not isinstance(detail, str):
        raise BadFrame("detail must be a string")
    return Response(status=status, data=_b64_field(body, "data"), detail=detail)


def _load_object(raw: bytes) -> dict:
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadFrame(f"frame is not JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise BadFrame("frame must be a JSON object")
    return body


def _b64_field(body: dict, key: str) -> bytes:
    value = body.get(key, "")
    if not isinstance(value, str):
        raise BadFrame(f"{key} must be base64 text")
    try:
        return unb64(value)
    except Exception as exc:
        raise BadFrame(f"{key} is not valid base64") from exc
