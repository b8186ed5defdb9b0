"""Canonical encoding of TPM command and response payloads.

Payloads are compact, key-sorted JSON. ``bytes`` travel as ``{"b": hex}``
and registered dataclasses as ``{"t": name, "v": fields}`` so both channel
endpoints can rebuild typed values.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Any

_TYPES: dict[str, type] = {}


def register(cls: type) -> type:
    _TYPES[cls.__name__] = cls
    return cls


def _enc(obj: Any) -> Any:
    if isinstance(obj, (bytes, bytearray)):
        return {"b": bytes(obj).hex()}
    if dataclasses.is_dataclass(obj) and type(obj).__name__ in _TYPES:
        return {
            "t": type(obj).__name__,
            "v": {f.name: _enc(getattr(obj, f.name)) for f in dataclasses.fields(obj)},
        }
    if isinstance(obj, (list, tuple)):
        return [_enc(x) for x in obj]
    if isinstance(obj, (frozenset, set)):
        return {"s": sorted(obj)}
    if isinstance(obj, dict):
        return {"d": {str(k): _enc(v) for k, v in obj.items()}}
    if obj is None or isinstance(obj, (bool, int, str)):
        return obj
    raise TypeError(f"cannot encode {type(obj).__name__}")


def _dec(obj: Any) -> Any:
    if isinstance(obj, list):
        return tuple(_dec(x) for x in obj)
    if isinstance(obj, dict):
        if "b" in obj:
            return bytes.fromhex(obj["b"])
        if "s" in obj:
            return frozenset(obj["s"])
        if "d" in obj:
            return {k: _dec(v) for k, v in obj["d"].items()}
        if "t" in obj:
            cls = _TYPES[obj["t"]]
            return cls(**{k: _dec(v) for k, v in obj["v"].items()})
        raise ValueError("unknown encoded object")
    return obj


def pack(obj: Any) -> bytes:
    return json.dumps(_enc(obj), sort_keys=True, separators=(",", ":")).encode()


def unpack(data: bytes) -> Any:
    return _dec(json.loads(data.decode()))
