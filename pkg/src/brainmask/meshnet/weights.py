"""Weight containers and the ``model.json`` + ``model.bin`` format.

The manifest lists every tensor (name, layer, kind, shape, byte offset,
dtype) in blob order.  The blob is the concatenation of little-endian float32
tensors, each row-major in ``[out][in][kx][ky][kz]`` order.  The manifest
also embeds the architecture and its fingerprint, so a blob can never be
bound to a different network.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import (
    FingerprintMismatch,
    MissingStats,
    NetworkError,
    OffsetOverlap,
    TruncatedBlob,
    UnknownDtype,
    WeightShapeMismatch,
)
from .spec import NetworkSpec

FORMAT = "brainmask-weights"
DTYPE_TAG = "f32le"
BN_KEYS = ("mean", "var", "scale", "shift")


@dataclass
class LayerWeights:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    bn: Optional[Dict[str, np.ndarray]] = None


@dataclass
class WeightStore:
    spec: NetworkSpec
    layers: List[LayerWeights] = field(default_factory=list)

    def __post_init__(self):
        validate(self.spec, self.layers)

    def tensors(self):
        """Yield ``(name, layer_index, kind, array)`` in blob order."""
        for i, lw in enumerate(self.layers):
            yield f"layer{i}.weight", i, "weight", lw.weight
            if lw.bias is not None:
                yield f"layer{i}.bias", i, "bias", lw.bias
            if lw.bn is not None:
                for key in BN_KEYS:
                    yield f"layer{i}.bn_{key}", i, "bn_" + key, lw.bn[key]

    @property
    def nbytes(self) -> int:
        return sum(a.size * 4 for *_, a in self.tensors())

    def copy(self) -> "WeightStore":
        return WeightStore(self.spec, [
            LayerWeights(lw.weight.copy(),
                         None if lw.bias is None else lw.bias.copy(),
                         None if lw.bn is None else {k: v.copy() for k, v in lw.bn.items()})
            for lw in self.layers])


def validate(spec: NetworkSpec, layers) -> None:
    if len(layers) != len(spec.layers):
        raise WeightShapeMismatch(f"{len(layers)} weight layers for a {len(spec.layers)}-layer spec")
    for i, (ls, lw) in enumerate(zip(spec.layers, layers)):
        if tuple(lw.weight.shape) != ls.weight_shape:
            raise WeightShapeMismatch(f"layer {i}: weight {lw.weight.shape} != {ls.weight_shape}")
        if ls.has_bias != (lw.bias is not None):
            raise WeightShapeMismatch(f"layer {i}: bias presence disagrees with spec")
        if lw.bias is not None and tuple(lw.bias.shape) != (ls.out_channels,):
            raise WeightShapeMismatch(f"layer {i}: bias {lw.bias.shape} != ({ls.out_channels},)")
        if ls.norm == "batchnorm_stats":
            if lw.bn is None or any(k not in lw.bn for k in BN_KEYS):
                raise MissingStats(f"layer {i}: batchnorm statistics missing")
            for k in BN_KEYS:
                if tuple(np.shape(lw.bn[k])) != (ls.out_channels,):
                    raise WeightShapeMismatch(f"layer {i}: bn_{k} has shape {np.shape(lw.bn[k])}")
        elif lw.bn is not None:
            raise WeightShapeMismatch(f"layer {i}: statistics given for a non-batchnorm layer")


def init_weights(spec: NetworkSpec, seed: int = 0) -> WeightStore:
    """He-normal kernels, zero biases, identity batchnorm statistics."""
    rng = np.random.default_rng(seed)
    layers = []
    for ls in spec.layers:
        fan_in = ls.in_channels * ls.kernel_size ** 3
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), ls.weight_shape).astype(np.float32)
        b = np.zeros(ls.out_channels, np.float32) if ls.has_bias else None
        bn = None
        if ls.norm == "batchnorm_stats":
            c = ls.out_channels
            bn = {"mean": np.zeros(c, np.float32), "var": np.ones(c, np.float32),
                  "scale": np.ones(c, np.float32), "shift": np.zeros(c, np.float32)}
        layers.append(LayerWeights(w, b, bn))
    return WeightStore(spec, layers)


def save_weights(store: WeightStore) -> Tuple[dict, bytes]:
    entries, chunks, offset = [], [], 0
    for name, layer, kind, arr in store.tensors():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C")
        entries.append({"name": name, "layer": layer, "kind": kind, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data), "dtype": DTYPE_TAG})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format": FORMAT,
        "version": 1,
        "spec": store.spec.to_dict(),
        "fingerprint": store.spec.fingerprint(),
        "tensors": entries,
    }
    return manifest, b"".join(chunks)


def load_weights(manifest: dict, blob: bytes, spec: Optional[NetworkSpec] = None) -> WeightStore:
    """Rebuild a :class:`WeightStore`, validating everything before returning.

    When ``spec`` is given, the manifest's architecture must match it exactly.
    """
    manifest_spec = NetworkSpec.from_dict(manifest["spec"])
    if manifest.get("fingerprint") != manifest_spec.fingerprint():
        raise FingerprintMismatch("manifest fingerprint does not match its own spec")
    if spec is not None and spec.fingerprint() != manifest_spec.fingerprint():
        raise FingerprintMismatch(f"weights are for {manifest_spec.name!r}, not {spec.name!r}")
    spec = manifest_spec

    entries = manifest.get("tensors", [])
    for e in entries:
        if e.get("dtype") != DTYPE_TAG:
            raise UnknownDtype(f"{e.get('name')}: dtype {e.get('dtype')!r}")
    spans = sorted((int(e["offset"]), int(e["offset"]) + 4 * int(np.prod(e["shape"])), e["name"])
                   for e in entries)
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise OffsetOverlap(f"{an} [{a0}, {a1}) overlaps {bn} at {b0}")
    if spans and spans[-1][1] > len(blob):
        raise TruncatedBlob(f"blob has {len(blob)} bytes, manifest needs {spans[-1][1]}")

    per_layer: List[dict] = [{} for _ in spec.layers]
    for e in entries:
        layer = int(e["layer"])
        if not 0 <= layer < len(spec.layers):
            raise WeightShapeMismatch(f"{e['name']}: layer index {layer} out of range")
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=int(e["offset"]))
        per_layer[layer][e["kind"]] = arr.reshape(e["shape"]).astype(np.float32)

    layers = []
    for i, (ls, got) in enumerate(zip(spec.layers, per_layer)):
        if "weight" not in got:
            raise WeightShapeMismatch(f"layer {i}: no weight tensor")
        bn = None
        if any(k.startswith("bn_") for k in got):
            bn = {k: got.get("bn_" + k) for k in BN_KEYS}
            if any(v is None for v in bn.values()):
                raise MissingStats(f"layer {i}: incomplete batchnorm statistics")
        layers.append(LayerWeights(got["weight"], got.get("bias"), bn))
    return WeightStore(spec, layers)


def _bin_path(json_path: str) -> str:
    root, _ = os.path.splitext(json_path)
    return root + ".bin"


def write_model(store: WeightStore, json_path) -> Tuple[str, str]:
    """Write ``<stem>.json`` and ``<stem>.bin``; returns both paths."""
    json_path = os.fspath(json_path)
    if not json_path.endswith(".json"):
        json_path += ".json"
    manifest, blob = save_weights(store)
    with open(json_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    bin_path = _bin_path(json_path)
    with open(bin_path, "wb") as fh:
        fh.write(blob)
    return json_path, bin_path


def read_model(json_path, spec: Optional[NetworkSpec] = None) -> WeightStore:
    json_path = os.fspath(json_path)
    with open(json_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise NetworkError(f"{json_path} is not a {FORMAT} manifest")
    with open(_bin_path(json_path), "rb") as fh:
        blob = fh.read()
    return load_weights(manifest, blob, spec)
