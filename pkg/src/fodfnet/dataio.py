"""File formats and dataset assembly.

* a NIfTI-1 subset: single-file ``.nii``, uncompressed, float32/float64, no extensions
* FSL-style ``bvals`` / ``bvecs`` text tables
* a raw dataset cache: ``manifest.json`` + little-endian float32 payloads
* b0 normalization, shell selection and voxel/patch sample assembly
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sh_basis import SH_CONVENTION, n_coeffs

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"
DT_FLOAT32 = 16
DT_FLOAT64 = 64
_DTYPES = {DT_FLOAT32: "f4", DT_FLOAT64: "f8"}

DEFAULT_SHELL_TOLERANCE = 50.0
B0_EPS = 1e-6


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class DataError(ValueError):
    """Inputs that are well-formed but inconsistent (dims, shells, b0s)."""


@dataclass
class Volume4D:
    """A 4D image; ``data`` has shape ``(nx, ny, nz, nv)``."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise DataError(f"Volume4D needs 4 positive dims, got shape {data.shape}")
        self.data = data
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def spatial(self) -> tuple[int, int, int]:
        return self.dims[:3]


# ---------------------------------------------------------------- NIfTI-1

def write_nifti(vol: Volume4D) -> bytes:
    data = vol.data
    if data.dtype == np.float64:
        code, bitpix = DT_FLOAT64, 64
    else:
        data = data.astype(np.float32)
        code, bitpix = DT_FLOAT32, 32
    nx, ny, nz, nv = vol.dims
    ndim = 3 if nv == 1 else 4
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")  # regular
    struct.pack_into("<8h", hdr, 40, ndim, nx, ny, nz, nv, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.voxel_size, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<B", hdr, 123, 2 | 8)  # xyzt_units: mm, s
    struct.pack_into("<h", hdr, 254, 2)  # sform_code aligned
    # diagonal sform from voxel size
    sx, sy, sz = vol.voxel_size
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0)
    hdr[344:348] = NIFTI_MAGIC
    payload = np.asarray(data, dtype="<" + _DTYPES[code]).ravel(order="F").tobytes()
    return bytes(hdr) + b"\x00" * (NIFTI_VOX_OFFSET - NIFTI_HEADER_SIZE) + payload


def read_nifti(raw: bytes) -> Volume4D:
    if len(raw) < NIFTI_HEADER_SIZE:
        raise FormatError(f"header: file has {len(raw)} bytes, a NIfTI-1 header needs 348")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == NIFTI_HEADER_SIZE:
            break
    else:
        raise FormatError(
            f"sizeof_hdr: expected 348 at offset 0, got {struct.unpack_from('<i', raw, 0)[0]}"
        )
    magic = bytes(raw[344:348])
    if magic != NIFTI_MAGIC:
        raise FormatError(f"magic: expected b'n+1\\x00' at offset 344, got {magic!r}")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 4:
        raise FormatError(f"dim: only 1-4 dimensional images are supported, dim[0] = {ndim}")
    shape = [max(1, d) for d in dim[1 : ndim + 1]] + [1] * (4 - ndim)
    if any(d < 1 for d in dim[1 : ndim + 1]):
        raise FormatError(f"dim: nonpositive extent in {dim[1:ndim + 1]}")
    code = struct.unpack_from(endian + "h", raw, 70)[0]
    if code not in _DTYPES:
        raise FormatError(f"datatype: code {code} unsupported (only float32=16, float64=64)")
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    if vox_offset < NIFTI_HEADER_SIZE:
        raise FormatError(f"vox_offset: {vox_offset} points inside the header")
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    dtype = np.dtype(endian + _DTYPES[code])
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(raw) - vox_offset
    if actual < expected:
        raise FormatError(
            f"payload: dims {tuple(shape)} imply {expected} bytes of data, file holds {actual}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=vox_offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    return Volume4D(data, tuple(abs(p) if p else 1.0 for p in pixdim[1:4]))


def save_nifti(path, vol: Volume4D) -> None:
    Path(path).write_bytes(write_nifti(vol))


def load_nifti(path) -> Volume4D:
    return read_nifti(Path(path).read_bytes())


# ---------------------------------------------------------------- gradients

@dataclass
class GradientScheme:
    bvals: np.ndarray
    bvecs: np.ndarray  # (n, 3)
    shell_tolerance: float = DEFAULT_SHELL_TOLERANCE

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=float).ravel()
        self.bvecs = np.asarray(self.bvecs, dtype=float).reshape(-1, 3)
        if len(self.bvals) != len(self.bvecs):
            raise FormatError(f"{len(self.bvals)} bvals but {len(self.bvecs)} bvecs")

    def __len__(self) -> int:
        return len(self.bvals)

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals <= self.shell_tolerance

    def shells(self) -> list[float]:
        """Representative b-value of each distinct nonzero shell, ascending."""
        out: list[float] = []
        for b in np.sort(self.bvals[~self.b0_mask]):
            if not out or b - out[-1] > self.shell_tolerance:
                out.append(float(b))
        return out


def parse_gradient_table(bval_text: str, bvec_text: str, shell_tolerance: float = DEFAULT_SHELL_TOLERANCE) -> GradientScheme:
    try:
        bvals = np.array([float(t) for t in bval_text.split()])
        rows = [[float(t) for t in line.split()] for line in bvec_text.strip().splitlines() if line.strip()]
    except ValueError as exc:
        raise FormatError(f"gradient table: non-numeric entry ({exc})") from None
    if len(rows) != 3:
        raise FormatError(f"bvecs: expected 3 rows, got {len(rows)}")
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise FormatError(f"bvecs: rows have unequal lengths {sorted(len(r) for r in rows)}")
    n = lengths.pop()
    if n != len(bvals):
        raise FormatError(f"gradient table: {len(bvals)} bvals but {n} bvec columns")
    bvecs = np.array(rows).T
    norms = np.linalg.norm(bvecs, axis=1)
    dw = bvals > shell_tolerance
    if np.any(norms[dw] == 0):
        raise FormatError(f"bvecs: zero vector at diffusion-weighted entries {np.flatnonzero(dw & (norms == 0)).tolist()}")
    bvecs[dw] /= norms[dw, None]
    return GradientScheme(bvals, bvecs, shell_tolerance)


def format_gradient_table(scheme: GradientScheme) -> tuple[str, str]:
    bval = " ".join(f"{b:g}" for b in scheme.bvals) + "\n"
    bvec = "\n".join(" ".join(f"{v:.10g}" for v in row) for row in scheme.bvecs.T) + "\n"
    return bval, bvec


def extract_shell(scheme: GradientScheme, target_b: float) -> np.ndarray:
    idx = np.flatnonzero(np.abs(scheme.bvals - target_b) <= scheme.shell_tolerance)
    if idx.size == 0:
        raise DataError(f"no shell at b={target_b:g}; available shells: {[round(b) for b in scheme.shells()]}")
    return idx


def normalize_by_b0(dwi: Volume4D, scheme: GradientScheme, eps: float = B0_EPS) -> tuple[Volume4D, np.ndarray]:
    """Divide DW volumes by the voxelwise mean b0 and drop the b0 volumes.

    Returns the normalized volume and a boolean mask of voxels whose mean b0
    exceeds ``eps``; other voxels are zeroed.
    """
    if dwi.dims[3] != len(scheme):
        raise DataError(f"dwi has {dwi.dims[3]} volumes, gradient table has {len(scheme)}")
    b0 = scheme.b0_mask
    if not b0.any():
        raise DataError("no b0 volumes: cannot normalize")
    data = np.asarray(dwi.data, dtype=float)
    mean_b0 = data[..., b0].mean(axis=-1)
    valid = mean_b0 > eps
    out = np.zeros(data.shape[:3] + (int((~b0).sum()),))
    out[valid] = data[valid][:, ~b0] / mean_b0[valid][:, None]
    return Volume4D(out, dwi.voxel_size), valid


def dw_scheme(scheme: GradientScheme) -> GradientScheme:
    """The scheme with b0 rows removed, matching the output of ``normalize_by_b0``."""
    keep = ~scheme.b0_mask
    return GradientScheme(scheme.bvals[keep], scheme.bvecs[keep], scheme.shell_tolerance)


# ---------------------------------------------------------------- samples

@dataclass
class VoxelSample:
    input_sh: np.ndarray
    target_sh: np.ndarray
    target_fractions: np.ndarray
    index: tuple[int, int, int]


@dataclass
class PatchSample:
    input_patch: np.ndarray  # (3, 3, 3, 45)
    target_sh: np.ndarray
    target_fractions: np.ndarray
    index: tuple[int, int, int]


def _check_dims(*arrays) -> tuple[int, int, int]:
    spatial = {tuple(a.shape[:3]) for a in arrays}
    if len(spatial) != 1:
        raise DataError(f"spatial dims differ: {sorted(spatial)}")
    return spatial.pop()


def masked_indices(mask: np.ndarray) -> np.ndarray:
    """(n, 3) voxel indices of the mask ordered by (k, j, i), i fastest."""
    ijk = np.argwhere(np.asarray(mask, dtype=bool))
    order = np.lexsort((ijk[:, 0], ijk[:, 1], ijk[:, 2]))
    return ijk[order]


def extract_patches(volume: np.ndarray, indices: np.ndarray, radius: int = 1) -> np.ndarray:
    """Cubic neighbourhoods around ``indices`` with nearest-edge replication."""
    padded = np.pad(volume, [(radius, radius)] * 3 + [(0, 0)] * (volume.ndim - 3), mode="edge")
    w = 2 * radius + 1
    offs = np.arange(w)
    i = indices[:, 0][:, None, None, None] + offs[None, :, None, None]
    j = indices[:, 1][:, None, None, None] + offs[None, None, :, None]
    k = indices[:, 2][:, None, None, None] + offs[None, None, None, :]
    return padded[i, j, k]


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Volume4D) else np.asarray(v)


def dataset_arrays(input_sh, target_sh, fractions, mask, patches: bool = False):
    """Stacked arrays ``(inputs, target_sh, target_fractions, indices)``."""
    x, y, p = (np.asarray(_as_array(v), dtype=float) for v in (input_sh, target_sh, fractions))
    m = _as_array(mask)
    if m.ndim == 4:
        m = m[..., 0]
    _check_dims(x, y, p, m)
    idx = masked_indices(m)
    sel = (idx[:, 0], idx[:, 1], idx[:, 2])
    inputs = extract_patches(x, idx) if patches else x[sel]
    return inputs, y[sel], p[sel], idx


def assemble_dataset(input_sh, target_sh, fractions, mask) -> list[VoxelSample]:
    x, y, p, idx = dataset_arrays(input_sh, target_sh, fractions, mask)
    return [VoxelSample(x[n], y[n], p[n], tuple(int(v) for v in idx[n])) for n in range(len(idx))]


def assemble_patches(input_sh, target_sh, fractions, mask) -> list[PatchSample]:
    x, y, p, idx = dataset_arrays(input_sh, target_sh, fractions, mask, patches=True)
    return [PatchSample(x[n], y[n], p[n], tuple(int(v) for v in idx[n])) for n in range(len(idx))]


# ---------------------------------------------------------------- dataset cache

@dataclass
class DatasetCache:
    arrays: dict[str, np.ndarray]
    order: int = 8
    seed: int | None = None
    extra: dict = field(default_factory=dict)


def write_dataset_cache(directory, cache: DatasetCache) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in sorted(cache.arrays.items()):
        fname = f"{name}.f32le"
        (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "format": "fodfnet-dataset-cache/1",
        "sh_order": cache.order,
        "n_coeffs": n_coeffs(cache.order),
        "sh_convention": SH_CONVENTION,
        "seed": cache.seed,
        "arrays": entries,
        "extra": cache.extra,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset_cache(directory) -> DatasetCache:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"dataset manifest: {exc}") from None
    arrays = {}
    for name, entry in manifest["arrays"].items():
        raw = (directory / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        if len(raw) != 4 * int(np.prod(shape)):
            raise FormatError(f"{entry['file']}: expected {4 * int(np.prod(shape))} bytes, got {len(raw)}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return DatasetCache(arrays, manifest["sh_order"], manifest.get("seed"), manifest.get("extra", {}))
