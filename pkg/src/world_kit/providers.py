"""File-based contracts for external detection, segmentation and completion models.

A provider receives a request directory holding ``request.json`` plus input
rasters and must fill a response directory with ``response.json`` and its
outputs::

    request.json   {"op": "complete"|"detect"|"segment",
                    "image": "in.png", "mask": "mask.png",
                    "labels": [...], "boxes": [[u0, v0, u1, v1], ...]}
    response.json  {"status": "ok", "masks": ["masks/000.png", ...]}
    out.png        completed image            (op=complete)
    boxes.json     [{"box": [u0, v0, u1, v1], "label": str, "score": float}]
                                              (op=detect)
    masks/*.png    one mask per request box   (op=segment)

Images are exchanged as 16-bit sRGB PNGs, masks as 8-bit PNGs. Every raster
in a response must match the request dimensions.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import imageio
from .errors import ProtocolError, ProviderTimeout


class Provider(Protocol):
    def __call__(self, request_dir: Path, response_dir: Path) -> None: ...


class CommandProvider:
    """Runs ``argv + [request_dir, response_dir]`` as a subprocess."""

    def __init__(self, argv, timeout: float | None = 600.0):
        self.argv = [str(a) for a in argv]
        self.timeout = timeout

    def __call__(self, request_dir: Path, response_dir: Path) -> None:
        try:
            proc = subprocess.run(self.argv + [str(request_dir), str(response_dir)],
                                  capture_output=True, timeout=self.timeout)
        except subprocess.TimeoutExpired as exc:
            raise ProviderTimeout(f"provider {self.argv[0]} timed out after {self.timeout}s") from exc
        if proc.returncode != 0:
            raise ProtocolError(f"provider exited with {proc.returncode}: "
                                f"{proc.stderr.decode(errors='replace')[-400:]}")


class CallableProvider:
    """In-process provider: ``fn(request_dir, response_dir)``."""

    def __init__(self, fn: Callable[[Path, Path], None]):
        self.fn = fn

    def __call__(self, request_dir: Path, response_dir: Path) -> None:
        self.fn(Path(request_dir), Path(response_dir))


def provider_from_config(cfg) -> Provider | None:
    if not cfg:
        return None
    if isinstance(cfg, (list, tuple)):
        return CommandProvider(cfg)
    return CommandProvider(cfg["command"], cfg.get("timeout", 600.0))


def _exchange(provider: Provider, request: dict, inputs: dict, workdir=None):
    tmp = tempfile.TemporaryDirectory(dir=workdir)
    root = Path(tmp.name)
    req, resp = root / "request", root / "response"
    req.mkdir()
    resp.mkdir()
    for name, writer in inputs.items():
        writer(req / name)
    (req / "request.json").write_text(json.dumps(request, sort_keys=True))
    provider(req, resp)
    meta_path = resp / "response.json"
    if not meta_path.exists():
        tmp.cleanup()
        raise ProtocolError("provider wrote no response.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        tmp.cleanup()
        raise ProtocolError(f"malformed response.json: {exc}") from exc
    if meta.get("status", "ok") != "ok":
        tmp.cleanup()
        raise ProtocolError(f"provider reported status {meta.get('status')!r}")
    return tmp, resp, meta


def _read_checked(reader, path, shape):
    if not Path(path).exists():
        raise ProtocolError(f"missing provider output {Path(path).name}")
    arr = reader(path)
    if arr.shape[:2] != tuple(shape):
        raise ProtocolError(f"{Path(path).name}: expected {shape[1]}x{shape[0]}, "
                            f"got {arr.shape[1]}x{arr.shape[0]}")
    return arr


def request_completion(provider: Provider, image: np.ndarray, hole: np.ndarray, workdir=None) -> np.ndarray:
    """Ask the provider to inpaint ``hole`` (bool) in ``image``; returns its full output."""
    shape = image.shape[:2]
    masked = np.where(hole[..., None], 0.0, image[..., :3])
    tmp, resp, _ = _exchange(
        provider, {"op": "complete", "image": "in.png", "mask": "mask.png", "labels": []},
        {"in.png": lambda p: imageio.write_color(p, masked, bits=16),
         "mask.png": lambda p: imageio.write_mask(p, hole.astype(np.float64))},
        workdir)
    try:
        return _read_checked(imageio.read_color, resp / "out.png", shape)[..., :3]
    finally:
        tmp.cleanup()


def request_detection(provider: Provider, image: np.ndarray, labels, workdir=None):
    tmp, resp, _ = _exchange(
        provider, {"op": "detect", "image": "in.png", "labels": list(labels)},
        {"in.png": lambda p: imageio.write_color(p, image[..., :3], bits=16)}, workdir)
    try:
        path = resp / "boxes.json"
        if not path.exists():
            raise ProtocolError("missing provider output boxes.json")
        try:
            boxes = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed boxes.json: {exc}") from exc
        h, w = image.shape[:2]
        out = []
        for item in boxes:
            try:
                u0, v0, u1, v1 = (float(t) for t in item["box"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"bad box entry {item!r}") from exc
            if not (0 <= u0 < u1 <= w and 0 <= v0 < v1 <= h):
                raise ProtocolError(f"box {item['box']} outside the {w}x{h} request image")
            out.append({"box": [u0, v0, u1, v1], "label": str(item.get("label", "")),
                        "score": float(item.get("score", 1.0))})
        return out
    finally:
        tmp.cleanup()


def request_segmentation(provider: Provider, image: np.ndarray, boxes, workdir=None):
    """One soft mask per box, each on the request image lattice."""
    shape = image.shape[:2]
    tmp, resp, meta = _exchange(
        provider, {"op": "segment", "image": "in.png", "boxes": [list(b) for b in boxes]},
        {"in.png": lambda p: imageio.write_color(p, image[..., :3], bits=16)}, workdir)
    try:
        files = meta.get("masks")
        if files is None:
            files = [f"masks/{i:03d}.png" for i in range(len(boxes))]
        if len(files) != len(boxes):
            raise ProtocolError(f"expected {len(boxes)} masks, got {len(files)}")
        return [_read_checked(imageio.read_mask, resp / f, shape) for f in files]
    finally:
        tmp.cleanup()
