"""Versioned JSON checkpoint container.

Layout::

    {"format": "hprosody-checkpoint", "version": 1,
     "sections": {"<tag>": {...}, ...}}

Arrays anywhere inside a section are stored as
``{"__array__": dtype, "shape": [...], "data": base64(little-endian bytes)}``.
Serialization uses sorted keys and no timestamps, so identical state gives
byte-identical files.
"""
from __future__ import annotations

import base64
import json

import numpy as np

from ..errors import FormatError

FORMAT = "hprosody-checkpoint"
VERSION = 1


def _encode(obj):
    if isinstance(obj, np.ndarray):
        arr = np.ascontiguousarray(obj)
        dt = arr.dtype.newbyteorder("<")
        return {"__array__": dt.str, "shape": list(arr.shape),
                "data": base64.b64encode(arr.astype(dt).tobytes()).decode("ascii")}
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            raw = base64.b64decode(obj["data"])
            return np.frombuffer(raw, dtype=np.dtype(obj["__array__"])).reshape(obj["shape"]).copy()
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def dumps(sections: dict) -> str:
    doc = {"format": FORMAT, "version": VERSION, "sections": _encode(sections)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def loads(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise FormatError("not an hprosody checkpoint")
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')}")
    return _decode(doc["sections"])


def save(path, sections: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(sections))
        fh.write("\n")


def load(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def network_state(net, optimizer_state=None, step=0, seed=0) -> dict:
    """Section payload for one :class:`~hprosody.nn.layers.Sequential`."""
    state = {"layers": net.specs(), "params": net.named_params(),
             "dropout_calls": net.rng_state(), "step": int(step), "seed": int(seed)}
    if optimizer_state is not None:
        state["optimizer"] = optimizer_state
    return state


def restore_network(state: dict):
    from .layers import Sequential, build_layer

    try:
        net = Sequential([build_layer(s) for s in state["layers"]])
        net.load_params(state["params"])
        net.set_rng_state(state.get("dropout_calls"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad network section: {exc}") from exc
    return net
