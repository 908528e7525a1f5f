"""Raw ``.vol`` + JSON sidecar volumes, and a minimal NIfTI-1 reader."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .volume import BinaryMask, Volume
from .wavelet import BAND_NAMES, WaveletCoeffs

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_raw(path, v: Volume | BinaryMask, dtype: str = "f32le") -> Path:
    """Write ``<name>.vol`` and its ``<name>.json`` sidecar; returns the data path."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = v.data
    if dtype == "u8":
        if not np.all((data >= 0) & (data <= 255) & (data == np.round(data))):
            raise ValueError("u8 volumes must hold integers in [0, 255]")
    np.ascontiguousarray(data.astype(_DTYPES[dtype])).tofile(path)
    meta = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "dtype": dtype,
        "order": "x-fastest",
    }
    sidecar_path(path).write_text(json.dumps(meta))
    return path


def load_raw(path) -> Volume:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    try:
        nx, ny, nz = (int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        dtype = meta.get("dtype", "f32le")
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed sidecar for {path}: {exc}") from exc
    if meta.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"unsupported order {meta['order']!r}")
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    raw = np.fromfile(path, dtype=_DTYPES[dtype])
    if raw.size != nx * ny * nz:
        raise VolumeFormatError(
            f"{path}: sidecar declares {nx}x{ny}x{nz}={nx * ny * nz} values, file holds {raw.size}"
        )
    data = raw.reshape(nz, ny, nx).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: non-finite values")
    return Volume(data, spacing)


def load_mask(path) -> BinaryMask:
    return BinaryMask.from_volume(load_raw(path))


# NIfTI-1 header field offsets (348-byte header)
_NIFTI_DTYPES = {4: np.dtype("i2"), 16: np.dtype("f4")}


def load_nifti1(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 (``n+1``) volume of int16 or float32."""
    blob = Path(path).read_bytes()
    if len(blob) < 348:
        raise VolumeFormatError("file too short for a NIfTI-1 header")
    if struct.unpack("<i", blob[:4])[0] == 348:
        endian = "<"
    elif struct.unpack(">i", blob[:4])[0] == 348:
        endian = ">"
    else:
        raise VolumeFormatError("sizeof_hdr is not 348")
    magic = blob[344:348]
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"bad magic {magic!r}; only single-file n+1 is supported")

    dim = struct.unpack(endian + "8h", blob[40:56])
    datatype = struct.unpack(endian + "h", blob[70:72])[0]
    pixdim = struct.unpack(endian + "8f", blob[76:108])
    vox_offset = struct.unpack(endian + "f", blob[108:112])[0]
    scl_slope, scl_inter = struct.unpack(endian + "2f", blob[112:120])

    if dim[0] != 3:
        raise VolumeFormatError(f"expected a 3D volume, dim[0] = {dim[0]}")
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"unsupported NIfTI datatype code {datatype}")
    nx, ny, nz = dim[1:4]
    dt = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    offset = int(vox_offset)
    count = nx * ny * nz
    if len(blob) < offset + count * dt.itemsize:
        raise VolumeFormatError("voxel data truncated")
    data = np.frombuffer(blob, dtype=dt, count=count, offset=offset).astype(np.float64)
    if scl_slope != 0 and np.isfinite(scl_slope):
        data = data * scl_slope + scl_inter
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    data = data.reshape(nz, ny, nx).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError("non-finite voxel values")
    return Volume(data, spacing)


def load_any(path) -> Volume:
    path = Path(path)
    if path.suffix == ".nii":
        return load_nifti1(path)
    return load_raw(path)


def save_coeffs(directory, stem: str, c: WaveletCoeffs) -> list[Path]:
    """Write each band as ``<stem>_<band>.vol`` (band spacing is twice the source spacing)."""
    directory = Path(directory)
    band_spacing = tuple(2.0 * s for s in c.spacing)
    return [
        save_raw(directory / f"{stem}_{name}.vol", Volume(c[name].astype(np.float32), band_spacing))
        for name in BAND_NAMES
    ]


def load_coeffs(directory, stem: str) -> WaveletCoeffs:
    vols = [load_raw(Path(directory) / f"{stem}_{name}.vol") for name in BAND_NAMES]
    shapes = {v.data.shape for v in vols}
    if len(shapes) != 1:
        raise VolumeFormatError(f"band shapes disagree: {shapes}")
    spacing = tuple(s / 2.0 for s in vols[0].spacing)
    return WaveletCoeffs(np.stack([v.data.astype(np.float64) for v in vols]), spacing)
