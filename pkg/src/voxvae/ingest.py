"""Loading, normalizing and temporally compressing 4D volume series.

Arrays are held as (T, X, Y, Z) float32, time slowest. NIfTI-1 single-file
images (.nii / .nii.gz) are read and written directly; the ``ni1`` pair
format is read when the matching ``.img`` file sits next to the header.
"""
import csv
import gzip
import io
import logging
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .containers import atomic_write_bytes
from .errors import DataError, FormatError, ShapeError, UnsupportedError

log = logging.getLogger(__name__)

THRESHOLD = 0.05

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == 348

# NIfTI datatype code -> numpy type
DATATYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
    1024: "i8",
    1280: "u8",
}


@dataclass
class VolumeSeries:
    subject_id: str
    data: np.ndarray
    tr_seconds: float = 1.0
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ShapeError(f"volume series must be (T, X, Y, Z) with all dims >= 1, got {data.shape}")
        if self.tr_seconds <= 0:
            raise ValueError(f"tr_seconds must be positive, got {self.tr_seconds}")
        self.data = data

    @property
    def n_timepoints(self):
        return self.data.shape[0]

    @property
    def spatial_shape(self):
        return tuple(self.data.shape[1:])


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_header(raw):
    if len(raw) < 348:
        raise FormatError("file is shorter than a NIfTI-1 header")
    for order in ("<", ">"):
        dt = HEADER_DTYPE.newbyteorder(order)
        hdr = np.frombuffer(raw[:348], dtype=dt)[0]
        if int(hdr["sizeof_hdr"]) == 348:
            break
    else:
        raise FormatError("sizeof_hdr is not 348 in either byte order")
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic not in (b"n+1", b"ni1"):
        raise FormatError(f"bad NIfTI-1 magic {magic!r}")
    return hdr, order, magic


def load_nifti(path, subject_id=None):
    """Read a 3D or 4D NIfTI-1 image into a VolumeSeries (3D becomes T=1)."""
    path = os.fspath(path)
    raw = _open_maybe_gzip(path)
    hdr, order, magic = read_header(raw)
    ndim = int(hdr["dim"][0])
    if ndim > 4:
        raise UnsupportedError(f"{ndim}-D images are not supported (max 4)")
    if ndim < 1:
        raise FormatError(f"invalid dim[0] = {ndim}")
    shape = [int(d) for d in hdr["dim"][1 : ndim + 1]]
    shape += [1] * (4 - ndim)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedError(f"NIfTI datatype code {code} is not supported")
    dtype = np.dtype(DATATYPES[code]).newbyteorder(order)
    count = int(np.prod(shape))
    if magic == b"n+1":
        payload = raw[int(hdr["vox_offset"]) :]
    else:
        img = os.path.splitext(path[:-3] if path.endswith(".gz") else path)[0] + ".img"
        payload = _open_maybe_gzip(img)
    nbytes = count * dtype.itemsize
    if len(payload) < nbytes:
        raise FormatError(f"data segment holds {len(payload)} bytes, expected {nbytes}")
    # On disk x varies fastest: Fortran order over (X, Y, Z, T).
    arr = np.frombuffer(payload[:nbytes], dtype=dtype).reshape(shape[::-1])
    arr = arr.transpose(0, 3, 2, 1)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and (slope != 1 or inter != 0):
        arr = arr.astype(np.float64) * slope + inter
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    bad = ~np.isfinite(arr)
    if bad.any():
        t, x, y, z = (int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"non-finite value at voxel (x={x}, y={y}, z={z}) timepoint {t} in {path}")
    tr = float(hdr["pixdim"][4]) if ndim == 4 else 0.0
    if not tr > 0:
        tr = 1.0
    if subject_id is None:
        subject_id = os.path.basename(path).split(".")[0]
    return VolumeSeries(subject_id=subject_id, data=arr, tr_seconds=tr)


def nifti_bytes(data, tr_seconds=1.0, voxel_size=(1.0, 1.0, 1.0), description=""):
    """Encode a (T, X, Y, Z) or (X, Y, Z) float array as NIfTI-1 single-file bytes."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 3:
        spatial, t = arr.shape, 1
        arr4 = arr[None]
        ndim = 3
    elif arr.ndim == 4:
        t, spatial = arr.shape[0], arr.shape[1:]
        arr4 = arr
        ndim = 4
    else:
        raise ShapeError(f"can only write 3D or 4D data, got {arr.shape}")
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dims = [ndim, *spatial, t, 1, 1, 1]
    hdr["dim"] = dims[:8]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, *voxel_size, tr_seconds, 0, 0, 0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2 | 8  # millimetres, seconds
    hdr["descrip"] = description.encode("ascii", "replace")[:79]
    hdr["sform_code"] = 1
    hdr["srow_x"] = [voxel_size[0], 0, 0, 0]
    hdr["srow_y"] = [0, voxel_size[1], 0, 0]
    hdr["srow_z"] = [0, 0, voxel_size[2], 0]
    hdr["magic"] = b"n+1"
    body = np.ascontiguousarray(arr4.transpose(0, 3, 2, 1), dtype="<f4").tobytes()
    return hdr.tobytes() + b"\x00" * 4 + body


def save_nifti(path, data, tr_seconds=1.0, description=""):
    """Write float32 NIfTI-1; ``.gz`` paths are gzipped with a zeroed timestamp."""
    if isinstance(data, VolumeSeries):
        tr_seconds = data.tr_seconds
        data = data.data
    blob = nifti_bytes(data, tr_seconds=tr_seconds, description=description)
    path = os.fspath(path)
    if path.endswith(".gz"):
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(blob)
        blob = buf.getvalue()
    atomic_write_bytes(path, blob)


def rescale_and_threshold(v, threshold=THRESHOLD):
    """Min-max rescale each timepoint to [0, 1], then zero values below ``threshold``.

    A constant timepoint has no range to rescale; it becomes all zeros.
    """
    data = v.data.astype(np.float64)
    flat = data.reshape(data.shape[0], -1)
    lo = flat.min(axis=1)
    hi = flat.max(axis=1)
    span = hi - lo
    out = np.zeros_like(flat)
    ok = span > 0
    if not ok.all():
        warnings.warn(
            f"{v.subject_id}: {int((~ok).sum())} constant timepoint(s) set to zero",
            RuntimeWarning,
            stacklevel=2,
        )
    out[ok] = (flat[ok] - lo[ok, None]) / span[ok, None]
    out = out.astype(np.float32)
    out[out < np.float32(threshold)] = 0.0
    return replace(v, data=out.reshape(data.shape), normalized=True)


def paa(v, window):
    """Piecewise aggregate approximation along time.

    Output point k averages input timepoints [k*window, min((k+1)*window, T));
    a trailing partial window averages whatever points remain.
    """
    if not isinstance(window, (int, np.integer)) or window < 1:
        raise ValueError(f"window must be a positive integer, got {window!r}")
    t = v.n_timepoints
    if window > t:
        raise ValueError(f"window {window} exceeds series length {t}")
    n_out = math.ceil(t / window)
    data = v.data.astype(np.float64)
    out = np.empty((n_out,) + v.spatial_shape, dtype=np.float64)
    for k in range(n_out):
        out[k] = data[k * window : min((k + 1) * window, t)].mean(axis=0)
    return replace(v, data=out.astype(np.float32), tr_seconds=v.tr_seconds * window)


def prepare(v, window=1):
    """Pipeline order used everywhere: PAA on raw intensities, then normalize."""
    if window > 1:
        v = paa(v, window)
    return rescale_and_threshold(v)


# --- manifest ---------------------------------------------------------------

MANIFEST_COLUMNS = ["subject_id", "path", "age", "sex", "diagnosis", "fold"]
SPLITS = ("train", "val", "test")


@dataclass
class SubjectRecord:
    subject_id: str
    path: str
    age: float = None
    sex: int = None
    diagnosis: int = None
    fold: object = None  # int 0-4 or one of SPLITS


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    root: str = "."

    def __post_init__(self):
        ids = [r.subject_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate subject ids: {dup}")
        for r in self.records:
            if isinstance(r.fold, (int, np.integer)) and not 0 <= r.fold <= 4:
                raise ValueError(f"{r.subject_id}: fold {r.fold} outside [0, 4]")
            if isinstance(r.fold, str) and r.fold not in SPLITS:
                raise ValueError(f"{r.subject_id}: unknown split {r.fold!r}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record):
        return record.path if os.path.isabs(record.path) else os.path.join(self.root, record.path)

    def labels(self, column):
        values = [getattr(r, column) for r in self.records]
        present = [v is not None for v in values]
        if any(present) and not all(present):
            missing = [r.subject_id for r, p in zip(self.records, present) if not p]
            raise ValueError(f"label {column!r} missing for {missing[:5]}")
        return None if not any(present) else np.asarray(values, dtype=float)

    def subset(self, predicate):
        return DatasetManifest([r for r in self.records if predicate(r)], root=self.root)

    def with_folds(self, folds):
        recs = [replace(r, fold=f) for r, f in zip(self.records, folds)]
        return DatasetManifest(recs, root=self.root)


def _parse_cell(value, kind):
    value = value.strip()
    if value == "":
        return None
    if kind == "float":
        return float(value)
    if kind == "binary":
        out = int(float(value))
        if out not in (0, 1):
            raise ValueError(f"binary label must be 0 or 1, got {value!r}")
        return out
    if kind == "fold":
        return value if value in SPLITS else int(value)
    return value


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("subject_id", "path") if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"manifest lacks columns {missing}")
        records = []
        for row in reader:
            records.append(
                SubjectRecord(
                    subject_id=row["subject_id"].strip(),
                    path=row["path"].strip(),
                    age=_parse_cell(row.get("age", "") or "", "float"),
                    sex=_parse_cell(row.get("sex", "") or "", "binary"),
                    diagnosis=_parse_cell(row.get("diagnosis", "") or "", "binary"),
                    fold=_parse_cell(row.get("fold", "") or "", "fold"),
                )
            )
    return DatasetManifest(records, root=os.path.dirname(os.path.abspath(path)))


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(path, manifest):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in manifest.records:
        writer.writerow([r.subject_id, r.path, _fmt(r.age), _fmt(r.sex), _fmt(r.diagnosis), _fmt(r.fold)])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def load_subject(manifest, record, window=1):
    v = load_nifti(manifest.resolve(record), subject_id=record.subject_id)
    return prepare(v, window)
