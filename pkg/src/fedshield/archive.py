"""Deterministic named-tensor checkpoint archive.

A checkpoint is a zip file (STORED, fixed timestamps so rewrites are
byte-identical) containing:

  manifest.json   tensor table {name: {shape, dtype, file}} plus caller
                  metadata (e.g. parameter group membership)
  data/NNNN.bin   raw little-endian tensor bytes, one file per tensor,
                  ordered by sorted tensor name

dtype strings are numpy little-endian codes ("<f4", "<i8", ...).
"""

import io
import json
import zipfile
from collections import OrderedDict

import numpy as np
import torch

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)  # zip format's minimum timestamp


def _to_le_array(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def write_archive(path, tensors: dict, metadata: dict = None):
    """Write tensors plus metadata; identical inputs give identical bytes."""
    names = sorted(tensors.keys())
    table = OrderedDict()
    blobs = []
    for i, name in enumerate(names):
        arr = _to_le_array(tensors[name])
        fname = f"data/{i:04d}.bin"
        table[name] = {
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "file": fname,
        }
        blobs.append((fname, arr.tobytes()))
    manifest = {
        "format": FORMAT_VERSION,
        "tensors": table,
        "metadata": metadata or {},
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, payload)
        for fname, blob in blobs:
            info = zipfile.ZipInfo(fname, date_time=_EPOCH)
            zf.writestr(info, blob)


def read_archive(path) -> tuple:
    """Read back (tensors: dict[str, Tensor], metadata: dict)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported archive format {manifest.get('format')}")
        tensors = OrderedDict()
        for name, entry in manifest["tensors"].items():
            raw = zf.read(entry["file"])
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
            arr = arr.reshape(entry["shape"]).copy()
            tensors[name] = torch.from_numpy(arr)
    return tensors, manifest.get("metadata", {})


def write_params(path, params, extra_metadata: dict = None):
    """Checkpoint a ModelParameters map with its group partition recorded."""
    meta = {"groups": params.groups()}
    if extra_metadata:
        meta.update(extra_metadata)
    write_archive(path, dict(params.tensors), meta)


def read_params(path):
    from .models import ModelParameters

    tensors, meta = read_archive(path)
    return ModelParameters(OrderedDict(tensors)), meta


def write_noise(path, spec, extra_metadata: dict = None):
    """Persist a NoiseSpec (mu/rho tensors plus mode and shape metadata)."""
    snap = spec.snapshot()
    meta = {
        "mode": snap["mode"],
        "latent_shape": list(snap["latent_shape"]) if snap["latent_shape"] else None,
        "init": list(snap["init"]),
    }
    if extra_metadata:
        meta.update(extra_metadata)
    write_archive(path, {"mu": snap["mu"], "rho": snap["rho"]}, meta)


def read_noise(path):
    from .models import NoiseSpec

    tensors, meta = read_archive(path)
    snap = {
        "mode": meta["mode"],
        "latent_shape": tuple(meta["latent_shape"]) if meta["latent_shape"] else None,
        "init": tuple(meta["init"]),
        "mu": tensors["mu"],
        "rho": tensors["rho"],
    }
    return NoiseSpec.from_snapshot(snap), meta


def save_image_grid(path, images: torch.Tensor, stats=None, pad: int = 2):
    """Write a batch as an 8-bit PNG grid (denormalized when stats given)."""
    from PIL import Image

    imgs = images.detach().cpu()
    if stats is not None:
        imgs = stats.denormalize(imgs)
    imgs = imgs.clamp(0.0, 1.0)
    n, c, h, w = imgs.shape
    cols = min(n, 8)
    rows = (n + cols - 1) // cols
    grid = torch.zeros(c, rows * (h + pad) + pad, cols * (w + pad) + pad)
    for i in range(n):
        r, col = divmod(i, cols)
        top = pad + r * (h + pad)
        left = pad + col * (w + pad)
        grid[:, top:top + h, left:left + w] = imgs[i]
    arr = (grid * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    if c == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")
