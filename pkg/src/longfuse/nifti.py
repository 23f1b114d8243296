"""Minimal NIfTI-1 single-file reader/writer.

Only the header fields the fusion pipeline needs are honored: dim,
pixdim, datatype/bitpix, scl_slope/scl_inter, and vox_offset. Orientation
fields are accepted on read and a diagonal sform is emitted on write, but
all volumes entering fusion are assumed to share one grid. Little-endian
single-file images (.nii / .nii.gz) only.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .errors import NiftiError

HEADER_SIZE = 348

# Field layout of the 348-byte NIfTI-1 header, little-endian.
_HDR_DTYPE = np.dtype([
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
])
assert _HDR_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy dtype (little-endian).
DTYPE_BY_CODE = {
    2: np.dtype("<u1"),     # uint8
    4: np.dtype("<i2"),     # int16
    8: np.dtype("<i4"),     # int32
    16: np.dtype("<f4"),    # float32
    64: np.dtype("<f8"),    # float64
    256: np.dtype("<i1"),   # int8
    512: np.dtype("<u2"),   # uint16
    768: np.dtype("<u4"),   # uint32
}
CODE_INT16 = 4
CODE_FLOAT32 = 16


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise NiftiError(f"{path}: cannot read file: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise NiftiError(f"{path}: corrupt gzip stream: {exc}") from exc
    return raw


def read(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read one 3D image; returns (data with shape (nx, ny, nz), spacing).

    Integer images come back with their stored integer dtype; scaled or
    floating images come back as float32. Raises NiftiError naming the
    path and the offending header field otherwise.
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} < {HEADER_SIZE} bytes)")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_HDR_DTYPE)[0]

    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        if int(hdr["sizeof_hdr"].byteswap()) == HEADER_SIZE:
            raise NiftiError(f"{path}: big-endian NIfTI is not supported")
        raise NiftiError(f"{path}: malformed header (sizeof_hdr={int(hdr['sizeof_hdr'])})")
    magic = bytes(hdr["magic"])
    if magic[:3] == b"ni1":
        raise NiftiError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic[:3] != b"n+1":
        raise NiftiError(f"{path}: malformed header (magic={magic!r})")

    dim = np.asarray(hdr["dim"], dtype=np.int64)
    ndim = int(dim[0])
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: malformed header (dim[0]={ndim})")
    for ax in range(4, ndim + 1):
        if dim[ax] > 1:
            raise NiftiError(
                f"{path}: {ndim}-D image with non-singleton axis {ax} "
                f"(dim[{ax}]={int(dim[ax])}) is not supported")
    spatial = min(ndim, 3)
    dims = [1, 1, 1]
    for ax in range(spatial):
        extent = int(dim[ax + 1])
        if extent < 1:
            raise NiftiError(f"{path}: malformed header (dim[{ax + 1}]={extent})")
        dims[ax] = extent

    code = int(hdr["datatype"])
    if code not in DTYPE_BY_CODE:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    dtype = DTYPE_BY_CODE[code]

    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spacing = [1.0, 1.0, 1.0]
    for ax in range(spatial):
        step = float(pixdim[ax + 1])
        if not step > 0.0:
            raise NiftiError(f"{path}: malformed header (pixdim[{ax + 1}]={step})")
        spacing[ax] = step

    offset = int(round(float(hdr["vox_offset"])))
    if offset < HEADER_SIZE:
        raise NiftiError(f"{path}: malformed header (vox_offset={offset})")

    count = dims[0] * dims[1] * dims[2]
    need = count * dtype.itemsize
    payload = raw[offset:offset + need]
    if len(payload) < need:
        raise NiftiError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {need})")
    flat = np.frombuffer(payload, dtype=dtype)
    # File order is x-fastest; keep [x, y, z] indexing, C-contiguous memory.
    data = np.ascontiguousarray(flat.reshape(tuple(dims), order="F"))

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if np.isnan(slope):
        slope = 0.0
    if np.isnan(inter):
        inter = 0.0
    if (slope not in (0.0, 1.0)) or inter != 0.0:
        scale = slope if slope != 0.0 else 1.0
        data = (data.astype(np.float64) * scale + inter).astype(np.float32)
    return data, (spacing[0], spacing[1], spacing[2])


def write(path, data: np.ndarray, spacing, datatype_code: int) -> None:
    """Write one 3D image as single-file NIfTI-1, gzipped when the path
    ends in .gz. vox_offset is 352 (348-byte header + 4 pad bytes)."""
    path = Path(path)
    if data.ndim != 3:
        raise NiftiError(f"{path}: expected 3D data, got shape {data.shape}")
    if datatype_code not in DTYPE_BY_CODE:
        raise NiftiError(f"{path}: unsupported datatype code {datatype_code}")
    dtype = DTYPE_BY_CODE[datatype_code]

    hdr = np.zeros((), dtype=_HDR_DTYPE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1]
    hdr["datatype"] = datatype_code
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["pixdim"] = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["sform_code"] = 1
    hdr["srow_x"] = [spacing[0], 0.0, 0.0, 0.0]
    hdr["srow_y"] = [0.0, spacing[1], 0.0, 0.0]
    hdr["srow_z"] = [0.0, 0.0, spacing[2], 0.0]
    hdr["magic"] = b"n+1"

    payload = np.ascontiguousarray(data).astype(dtype, copy=False).ravel(order="F")
    blob = hdr.tobytes() + b"\x00\x00\x00\x00" + payload.tobytes()
    try:
        if path.suffix == ".gz":
            # mtime pinned to zero so identical volumes produce identical bytes
            with open(path, "wb") as fh:
                with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                    gz.write(blob)
        else:
            path.write_bytes(blob)
    except OSError as exc:
        raise NiftiError(f"{path}: cannot write file: {exc}") from exc
