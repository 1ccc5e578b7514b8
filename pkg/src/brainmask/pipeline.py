"""End-to-end skull stripping and benchmarking.

read -> conform -> normalise -> [crop] -> forward -> argmax -> [embed]
-> back to native grid -> write.  Outputs always share the input's grid and
header geometry, whichever path is taken.
"""

from __future__ import annotations

import csv
import errno
import io
import os
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import niftio
from .meshnet import AllocationLedger, argmax_mask, forward, read_model
from .meshnet.spec import build_network
from .meshnet.weights import LayerWeights, WeightStore
from .volume import (
    CONFORMED_SHAPE,
    Mask,
    NormalizationSpec,
    Volume,
    apply_mask,
    compute_crop_bbox,
    conform,
    crop,
    embed,
    mask_to_native,
    normalize_percentile,
)


@dataclass
class StripRequest:
    input: str
    output: str
    weights: str
    mask_only: bool = False
    mask_output: Optional[str] = None
    crop: bool = False
    crop_threshold: float = 0.05
    crop_margin: int = 8
    threads: Optional[int] = None
    nonzero_percentiles: bool = False

    def __post_init__(self):
        if os.path.abspath(self.input) == os.path.abspath(self.output):
            raise ValueError("input and output paths must differ")
        if not 0 < self.crop_threshold < 1:
            raise ValueError("crop threshold must lie in (0, 1)")
        if self.crop_margin < 0:
            raise ValueError("crop margin must be non-negative")

    def mask_path(self) -> str:
        if self.mask_only:
            return self.output
        if self.mask_output:
            return self.mask_output
        out = self.output
        for ext in (".nii.gz", ".nii"):
            if out.endswith(ext):
                return out[: -len(ext)] + "_mask" + ext
        return out + "_mask.nii.gz"


@dataclass
class StripResult:
    mask: Mask
    ledger: AllocationLedger
    bbox: Optional[tuple] = None
    timings: dict = field(default_factory=dict)


def strip_volume(volume: Volume, weights: WeightStore, *, use_crop: bool = False,
                 crop_threshold: float = 0.05, crop_margin: int = 8,
                 threads: Optional[int] = None,
                 norm_spec: NormalizationSpec = NormalizationSpec()) -> StripResult:
    """Brain mask of ``volume`` on its own native grid."""
    timings = {}
    t0 = time.perf_counter()
    conformed, transform = conform(volume)
    normed = normalize_percentile(conformed, norm_spec)
    timings["preprocess"] = time.perf_counter() - t0

    bbox = None
    net_input = normed
    if use_crop:
        bbox = compute_crop_bbox(normed, crop_threshold, crop_margin)
        net_input = crop(normed, bbox)
        transform.crop_bbox = bbox

    ledger = AllocationLedger()
    t0 = time.perf_counter()
    logits = forward(weights.spec, weights, net_input.data, threads=threads, ledger=ledger)
    mask = Mask(argmax_mask(logits), net_input.affine)
    del logits
    timings["forward"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if bbox is not None:
        mask = embed(mask, bbox, transform.conformed_shape, transform.conformed_affine)
    native = mask_to_native(mask, transform)
    timings["postprocess"] = time.perf_counter() - t0
    return StripResult(native, ledger, bbox, timings)


def run_strip(request: StripRequest) -> StripResult:
    """File-level strip: reads the input and weights, writes mask (and brain image)."""
    if not os.path.exists(request.weights):
        raise FileNotFoundError(errno.ENOENT, "weights file not found", request.weights)
    weights = read_model(request.weights)
    raw = niftio.read_nifti(request.input)
    volume = raw.to_volume()
    result = strip_volume(
        volume, weights, use_crop=request.crop, crop_threshold=request.crop_threshold,
        crop_margin=request.crop_margin, threads=request.threads,
        norm_spec=NormalizationSpec(nonzero_only=request.nonzero_percentiles))
    t0 = time.perf_counter()
    niftio.write_nifti(result.mask, request.mask_path(), "uint8", template=raw.header)
    if not request.mask_only:
        niftio.write_nifti(apply_mask(volume, result.mask), request.output, "float32",
                           template=raw.header)
    result.timings["write"] = time.perf_counter() - t0
    return result


def threshold_weights(level: float = 0.5) -> WeightStore:
    """One-layer network labelling voxels brighter than ``level`` (after normalisation)."""
    spec = build_network((), 1, name="threshold")
    w = np.array([-1.0, 1.0], np.float32).reshape(2, 1, 1, 1, 1)
    b = np.array([level, -level], np.float32)
    return WeightStore(spec, [LayerWeights(w, b)])


# --- benchmarking ----------------------------------------------------------

@dataclass
class BenchRecord:
    dataset: str
    mode: str
    wall_seconds: float
    peak_activation_bytes: int
    peak_rss_bytes: int
    activation_bound_bytes: int
    shape: str


class _RssSampler:
    """Best-effort peak resident set size of this process while active."""

    def __init__(self, interval: float = 0.005):
        self.interval = interval
        self.peak = 0
        self._stop = threading.Event()
        self._thread = None
        try:
            import psutil
            self._proc = psutil.Process()
        except Exception:  # pragma: no cover - psutil missing or restricted
            self._proc = None

    def _sample(self):
        if self._proc is not None:
            try:
                self.peak = max(self.peak, self._proc.memory_info().rss)
            except Exception:  # pragma: no cover
                pass

    def _run(self):
        while not self._stop.wait(self.interval):
            self._sample()

    def __enter__(self):
        self._sample()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self._sample()


def bench(inputs: Sequence[str], weights_path: str, *, compare_crop: bool = False,
          use_crop: bool = False, crop_threshold: float = 0.05, crop_margin: int = 8,
          threads: Optional[int] = None, workdir: Optional[str] = None) -> List[BenchRecord]:
    """Time the full file-to-file strip pipeline for every input.

    Runs are serialised.  With ``compare_crop`` each input is run both
    uncropped and cropped.
    """
    if not inputs:
        raise ValueError("bench needs at least one input")
    modes = ["full", "crop"] if compare_crop else ["crop" if use_crop else "full"]
    weights = read_model(weights_path)
    records = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for path in inputs:
            for mode in modes:
                out = os.path.join(tmp, f"{mode}_{os.path.basename(path)}")
                if not out.endswith((".nii", ".nii.gz")):
                    out += ".nii.gz"
                req = StripRequest(path, out, weights_path, mask_only=True, crop=mode == "crop",
                                   crop_threshold=crop_threshold, crop_margin=crop_margin,
                                   threads=threads)
                with _RssSampler() as rss:
                    t0 = time.perf_counter()
                    result = run_strip(req)
                    wall = time.perf_counter() - t0
                if result.bbox is None:
                    grid = CONFORMED_SHAPE
                else:
                    grid = tuple(hi - lo for lo, hi in result.bbox)
                bound = (2 * weights.spec.max_channels * int(np.prod(grid)) * 4) + weights.nbytes
                records.append(BenchRecord(
                    dataset=os.path.basename(path), mode=mode, wall_seconds=wall,
                    peak_activation_bytes=result.ledger.peak_bytes, peak_rss_bytes=rss.peak,
                    activation_bound_bytes=bound, shape="x".join(map(str, grid))))
    return records


def bench_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    names = list(BenchRecord.__dataclass_fields__)
    w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    w.writeheader()
    for r in records:
        row = asdict(r)
        row["wall_seconds"] = f"{r.wall_seconds:.4f}"
        w.writerow(row)
    return buf.getvalue()
