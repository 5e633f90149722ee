"""Synthetic phantoms with known deformations, VOL1 files and manifests.

The generated ground-truth field doubles as the teacher deformation: warping
the moving phantom by it reproduces the fixed phantom exactly, so it is the
best teacher any registration network could distil from.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .deformation import _interp_matrix, folding_count, warp
from .engine import DTYPE

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """The splitmix64 generator; identical streams in any language."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    @staticmethod
    def _mix(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
        return z ^ (z >> 31)

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return self._mix(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        """Next n outputs, vectorised; equivalent to n calls of next_u64."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def uniform(self, n: int | None = None):
        """Doubles in [0, 1) from the top 53 bits."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0 ** -53
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def randrange(self, n: int) -> int:
        return int(self.uniform() * n)

    def nth(self, i: int) -> int:
        """The i-th output (0-based) of a stream seeded like this one, without advancing."""
        return self._mix((self.state + (i + 1) * GAMMA) & MASK64)


def splitmix_stream(seed: int) -> SplitMix64:
    return SplitMix64(seed)


# -- phantoms and fields -------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    extent: int = 32
    blobs: int = 6
    blob_amplitude: tuple[float, float] = (0.2, 0.6)
    blob_width: tuple[float, float] = (0.08, 0.2)  # fraction of extent
    organ_axes: tuple[float, float] = (0.18, 0.3)  # semi-axes, fraction of extent
    organ_intensity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        e = self.extent
        if e < 16 or e & (e - 1):
            raise ValueError(f"phantom extent must be a power of two >= 16, got {e}")


@dataclass(frozen=True)
class FieldSpec:
    control: int = 4
    amplitude: float = 3.0
    max_derivative: float = 0.4
    max_row_sum: float = 0.95

    def __post_init__(self):
        if self.control < 2 or self.amplitude < 0:
            raise ValueError(f"invalid field spec {self}")


def gen_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Blobs plus a soft-edged ellipsoid organ; returns ([1,E,E,E] volume, mask)."""
    e = spec.extent
    rng = SplitMix64(spec.seed)
    z, y, x = np.meshgrid(*(np.arange(e, dtype=np.float64),) * 3, indexing="ij")
    vol = np.zeros((e, e, e))
    for _ in range(spec.blobs):
        c = [e * (0.15 + 0.7 * rng.uniform()) for _ in range(3)]
        lo, hi = spec.blob_width
        sigma = e * (lo + (hi - lo) * rng.uniform())
        lo, hi = spec.blob_amplitude
        amp = lo + (hi - lo) * rng.uniform()
        vol += amp * np.exp(-((z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2) / (2 * sigma ** 2))
    centre = [e * (0.4 + 0.2 * rng.uniform()) for _ in range(3)]
    lo, hi = spec.organ_axes
    axes = [e * (lo + (hi - lo) * rng.uniform()) for _ in range(3)]
    r = np.sqrt(((z - centre[0]) / axes[0]) ** 2 + ((y - centre[1]) / axes[1]) ** 2 + ((x - centre[2]) / axes[2]) ** 2)
    mask = r <= 1.0
    # ~1 voxel soft edge
    edge = min(axes)
    vol += spec.organ_intensity / (1.0 + np.exp(np.clip((r - 1.0) * edge * 2.0, -50, 50)))
    span = vol.max() - vol.min()
    if span <= 0 or not mask.any():
        raise ValueError(f"degenerate phantom for spec {spec}")
    vol = (vol - vol.min()) / span
    return vol[None].astype(DTYPE), mask[None].astype(DTYPE)


def _upsample(ctrl: np.ndarray, extent: int) -> np.ndarray:
    m = _interp_matrix(extent, ctrl.shape[-1])
    out = np.tensordot(m, ctrl, axes=([1], [1]))  # z
    out = np.moveaxis(out, 0, 1)
    out = np.moveaxis(np.tensordot(m, out, axes=([1], [2])), 0, 2)  # y
    out = np.moveaxis(np.tensordot(m, out, axes=([1], [3])), 0, 3)  # x
    return out


def _derivatives(u: np.ndarray) -> np.ndarray:
    """|d u_i / d x_j| on the same stencil jacobian_det_map uses, shape [3,3,...]."""
    return np.abs(np.stack([np.stack([np.gradient(u[i], axis=a) for a in (2, 1, 0)]) for i in range(3)]))


def gen_smooth_field(spec: FieldSpec, extent: int, stream: SplitMix64) -> np.ndarray:
    """Fold-free random field [3,E,E,E] from an upsampled control grid.

    The field is shrunk until |u| <= amplitude, every derivative entry is
    <= max_derivative, and each Jacobian row's absolute sum stays below
    max_row_sum < 1, which keeps det(I + grad u) positive.
    """
    g = spec.control
    ctrl = (stream.uniform(3 * g ** 3).reshape(3, g, g, g) * 2.0 - 1.0) * spec.amplitude
    u = _upsample(ctrl, extent)
    peak = np.abs(u).max()
    if peak == 0:
        return np.zeros((3, extent, extent, extent), DTYPE)
    der = _derivatives(u)
    s = min(1.0, spec.amplitude / peak,
            spec.max_derivative / max(der.max(), 1e-12),
            spec.max_row_sum / max(der.sum(axis=1).max(), 1e-12))
    u = (u * s).astype(DTYPE)
    folds = folding_count(u)
    assert folds == 0, f"generated field folds at {folds} voxels"
    return u


@dataclass
class PairRecord:
    moving: np.ndarray
    fixed: np.ndarray
    moving_mask: np.ndarray
    fixed_mask: np.ndarray
    field: np.ndarray  # ground truth, used as the teacher deformation

    @property
    def teacher(self) -> np.ndarray:
        return self.field


def make_pair(spec: PhantomSpec, fieldspec: FieldSpec, stream: SplitMix64) -> PairRecord:
    moving, mask = gen_phantom(replace(spec, seed=stream.next_u64()))
    phi = gen_smooth_field(fieldspec, spec.extent, stream)
    fixed = warp(moving, phi, "trilinear").data
    fixed_mask = warp(mask, phi, "nearest").data
    return PairRecord(moving, fixed, mask, fixed_mask, phi)


# -- VOL1 files --------------------------------------------------------------------

class VolKind(IntEnum):
    INTENSITY = 0
    MASK = 1
    DISPLACEMENT = 2


class VolFormatError(ValueError):
    pass


class BadMagicError(VolFormatError):
    pass


class TruncatedFileError(VolFormatError):
    pass


class PayloadSizeError(VolFormatError):
    pass


class NonBinaryMaskError(VolFormatError):
    pass


_MAGIC = b"VOL1"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


def encode_vol(data: np.ndarray, kind: VolKind) -> bytes:
    arr = np.asarray(data, dtype=DTYPE)
    if arr.ndim != 4:
        raise VolFormatError(f"expected [C,D,H,W], got {arr.shape}")
    c, d, h, w = arr.shape
    expected_c = 3 if kind == VolKind.DISPLACEMENT else 1
    if c != expected_c:
        raise VolFormatError(f"{kind.name} volume needs {expected_c} channels, got {c}")
    if kind == VolKind.MASK and not np.isin(arr, (0.0, 1.0)).all():
        raise NonBinaryMaskError("mask payload is not binary")
    header = _HEADER.pack(_MAGIC, _VERSION, int(kind), d, h, w, c)
    return header + np.ascontiguousarray(arr.transpose(1, 2, 3, 0)).astype("<f4").tobytes()


def decode_vol(buf: bytes, name: str = "<bytes>") -> tuple[np.ndarray, VolKind]:
    if len(buf) < 4 or buf[:4] != _MAGIC:
        if len(buf) < 4:
            raise TruncatedFileError(f"{name}: file ends inside the header")
        raise BadMagicError(f"{name}: bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{name}: file ends inside the header")
    _, version, kind, d, h, w, c = _HEADER.unpack_from(buf)
    if version != _VERSION:
        raise VolFormatError(f"{name}: unsupported version {version}")
    try:
        kind = VolKind(kind)
    except ValueError:
        raise VolFormatError(f"{name}: unknown kind {kind}") from None
    n = c * d * h * w
    payload = len(buf) - _HEADER.size
    if payload < 4 * n:
        raise TruncatedFileError(f"{name}: payload has {payload} bytes, header declares {4 * n}")
    if payload > 4 * n:
        raise PayloadSizeError(f"{name}: payload has {payload} bytes, header declares {4 * n}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape(d, h, w, c)
    arr = np.ascontiguousarray(arr.transpose(3, 0, 1, 2)).astype(DTYPE)
    if kind == VolKind.MASK and not np.isin(arr, (0.0, 1.0)).all():
        raise NonBinaryMaskError(f"{name}: mask payload is not binary")
    return arr, kind


def write_vol(path, data: np.ndarray, kind: VolKind) -> None:
    Path(path).write_bytes(encode_vol(data, kind))


def read_vol(path, expect: VolKind | None = None) -> np.ndarray:
    arr, kind = decode_vol(Path(path).read_bytes(), str(path))
    if expect is not None and kind != expect:
        raise VolFormatError(f"{path}: expected {expect.name}, found {kind.name}")
    return arr


def read_vol_kind(path) -> tuple[np.ndarray, VolKind]:
    return decode_vol(Path(path).read_bytes(), str(path))


# -- manifests and teacher providers ----------------------------------------------

@dataclass
class DatasetManifest:
    records: list[dict]
    seed: int
    phantom_spec: dict
    field_spec: dict
    root: Path = field(default=Path("."))

    def path(self, i: int, key: str) -> Path:
        return self.root / self.records[i][key]

    def __len__(self) -> int:
        return len(self.records)

    def load_pair(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        mv = read_vol(self.path(i, "moving"), VolKind.INTENSITY)
        fx = read_vol(self.path(i, "fixed"), VolKind.INTENSITY)
        mm = read_vol(self.path(i, "moving_mask"), VolKind.MASK)
        fm = read_vol(self.path(i, "fixed_mask"), VolKind.MASK)
        shapes = {a.shape[1:] for a in (mv, fx, mm, fm)}
        if len(shapes) != 1:
            raise VolFormatError(f"record {i}: volumes disagree on extents {shapes}")
        return mv, fx, mm, fm

    @property
    def extent(self) -> int:
        return int(self.phantom_spec["extent"])

    def to_json(self) -> str:
        doc = {"schema": 1, "seed": self.seed, "phantom_spec": self.phantom_spec,
               "field_spec": self.field_spec, "records": self.records}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    return DatasetManifest(records=doc["records"], seed=int(doc["seed"]), phantom_spec=doc["phantom_spec"],
                           field_spec=doc["field_spec"], root=path.parent)


def _spec_dict(spec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def generate_dataset(out_dir, count: int, seed: int, spec: PhantomSpec = PhantomSpec(),
                     fieldspec: FieldSpec = FieldSpec(), prefix: str = "pair") -> Path:
    """Write ``count`` pairs plus manifest.json; a pure function of the arguments.

    Record i uses the i-th splitmix output of ``seed`` as its own seed, so any
    subset of records can be regenerated independently.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    master = SplitMix64(seed)
    records = []
    for i in range(count):
        pair = make_pair(spec, fieldspec, SplitMix64(master.nth(i)))
        stem = f"{prefix}{i:04d}"
        rec = {}
        for key, arr, kind in (("moving", pair.moving, VolKind.INTENSITY), ("fixed", pair.fixed, VolKind.INTENSITY),
                               ("moving_mask", pair.moving_mask, VolKind.MASK),
                               ("fixed_mask", pair.fixed_mask, VolKind.MASK),
                               ("field", pair.field, VolKind.DISPLACEMENT)):
            name = f"{stem}_{key}.vol"
            write_vol(out / name, arr, kind)
            rec[key] = name
        records.append(rec)
    manifest = DatasetManifest(records, seed, _spec_dict(spec), _spec_dict(fieldspec), out)
    path = out / "manifest.json"
    path.write_text(manifest.to_json())
    return path


class TeacherError(ValueError):
    pass


class TeacherProvider:
    """Maps a record index to its teacher deformation [3,D,H,W]."""

    def __init__(self, manifest: DatasetManifest, key: str):
        self.manifest = manifest
        self.key = key
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, i: int) -> np.ndarray:
        if i not in self._cache:
            rec = self.manifest.records[i]
            if self.key not in rec:
                raise TeacherError(f"record {i} has no '{self.key}' entry")
            path = self.manifest.path(i, self.key)
            if not path.exists():
                raise TeacherError(f"record {i}: missing teacher file {path}")
            phi = read_vol(path, VolKind.DISPLACEMENT)
            extent = tuple(read_vol(self.manifest.path(i, "moving")).shape[1:])
            if phi.shape[1:] != extent:
                raise TeacherError(f"record {i}: teacher field {phi.shape[1:]} does not match pair extent {extent}")
            self._cache[i] = phi
        return self._cache[i]


def teacher_from_ground_truth(manifest: DatasetManifest) -> TeacherProvider:
    return TeacherProvider(manifest, "field")


def teacher_from_files(manifest: DatasetManifest, key: str = "teacher") -> TeacherProvider:
    """Externally distilled deformations listed under ``key`` in each record."""
    return TeacherProvider(manifest, key)
