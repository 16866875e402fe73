"""Dense activation containers, the binary tensor file format, and manifests.

The on-disk tensor format is a little-endian container:

    bytes 0-3   magic "FVT1"
    byte  4     version (1)
    byte  5     dtype (1 = float32)
    byte  6     rank, 1 or 3
    byte  7     flags (bit 0: values declared nonnegative)
    next        rank x uint32 dims
    rest        row-major float32 payload, (height, width, channels) for rank 3

Manifests are line-oriented UTF-8 text:

    classes: name0,name1,...
    image_id<TAB>label_or_-1<TAB>stream:layer=path[,stream:layer=path...][<TAB>role]

where stream is "object" or "scene" and the optional role field is "train"
(default) or "test".  Paths resolve relative to the manifest file.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptionError,
    DataError,
    FormatError,
    ParameterError,
    ShapeError,
    ValidationError,
)

MAGIC = b"FVT1"
VERSION = 1
DTYPE_FLOAT32 = 1
FLAG_NONNEGATIVE = 0x01
_HEADER = struct.Struct("<4sBBBB")

STREAMS = ("object", "scene")
ROLES = ("train", "test")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise DataError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class FeatureMap:
    """Rank-3 activation tensor of one conv layer for one image view.

    ``data`` is stored as a read-only float32 array of shape
    (height, width, channels), matching the file payload order.
    """

    height: int
    width: int
    channels: int
    data: np.ndarray
    nonnegative: bool = False

    def __post_init__(self):
        for name in ("height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ParameterError(f"FeatureMap {name} must be positive")
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.size != self.height * self.width * self.channels:
            raise ShapeError(
                f"payload has {arr.size} values, shape implies "
                f"{self.height * self.width * self.channels}"
            )
        arr = arr.reshape(self.height, self.width, self.channels)
        _check_finite(arr, "FeatureMap")
        if self.nonnegative and np.any(arr < 0.0):
            raise DataError("FeatureMap declared nonnegative but has negative values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def rank(self) -> int:
        return 3


@dataclass(frozen=True)
class GlobalVector:
    """Rank-1 activation vector, typically from a fully connected layer."""

    dim: int
    data: np.ndarray
    source_tag: str = ""
    nonnegative: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError("GlobalVector dim must be positive")
        arr = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if arr.size != self.dim:
            raise ShapeError(f"payload has {arr.size} values, dim is {self.dim}")
        _check_finite(arr, "GlobalVector")
        if self.nonnegative and np.any(arr < 0.0):
            raise DataError("GlobalVector declared nonnegative but has negative values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def rank(self) -> int:
        return 1


@dataclass(frozen=True)
class ScoreVector:
    """Per-class recognition scores for one image."""

    class_count: int
    scores: np.ndarray

    def __post_init__(self):
        if self.class_count < 1:
            raise ParameterError("class_count must be positive")
        arr = np.ascontiguousarray(self.scores, dtype=np.float64).reshape(-1)
        if arr.size != self.class_count:
            raise ShapeError(
                f"{arr.size} scores for class_count {self.class_count}"
            )
        _check_finite(arr, "ScoreVector")
        object.__setattr__(self, "scores", _freeze(arr))


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file + rename.

    Guarantees the destination is never left half-written.
    """
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_header(path: str | Path) -> dict[str, str]:
    """Parse a key=value model header file; '#' lines are comments."""
    fields: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}: malformed header line '{line}'")
        fields[key.strip()] = value.strip()
    return fields


def write_header(path: str | Path, fields: dict[str, str]) -> None:
    atomic_write_text(path, "".join(f"{k}={v}\n" for k, v in fields.items()))


def write_tensor(tensor: FeatureMap | GlobalVector, path: str | Path) -> None:
    """Serialize a tensor to ``path`` in the FVT1 container format."""
    if isinstance(tensor, FeatureMap):
        dims = (tensor.height, tensor.width, tensor.channels)
    elif isinstance(tensor, GlobalVector):
        dims = (tensor.dim,)
    else:
        raise ParameterError(f"cannot serialize {type(tensor).__name__}")
    flags = FLAG_NONNEGATIVE if tensor.nonnegative else 0
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, len(dims), flags)
    header += struct.pack(f"<{len(dims)}I", *dims)
    payload = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_tensor(path: str | Path) -> FeatureMap | GlobalVector:
    """Parse an FVT1 file into a FeatureMap (rank 3) or GlobalVector (rank 1).

    Any malformed byte stream raises a typed error: FormatError for a bad
    magic/version/dtype/rank, CorruptionError when the declared shape and
    the payload size disagree, DataError for non-finite values or a
    violated nonnegativity flag.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not an FVT1 tensor file")
    if len(blob) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    _, version, dtype, rank, flags = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if rank not in (1, 3):
        raise FormatError(f"{path}: unsupported rank {rank}")
    if flags & ~FLAG_NONNEGATIVE:
        raise FormatError(f"{path}: unknown flag bits 0x{flags:02x}")
    dims_end = _HEADER.size + 4 * rank
    if len(blob) < dims_end:
        raise CorruptionError(f"{path}: truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", blob, _HEADER.size)
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    if len(blob) - dims_end != 4 * count:
        raise CorruptionError(
            f"{path}: payload is {len(blob) - dims_end} bytes, "
            f"shape {dims} requires {4 * count}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=dims_end).copy()
    nonneg = bool(flags & FLAG_NONNEGATIVE)
    try:
        if rank == 1:
            return GlobalVector(dim=dims[0], data=data, nonnegative=nonneg)
        return FeatureMap(
            height=dims[0], width=dims[1], channels=dims[2],
            data=data, nonnegative=nonneg,
        )
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    label: int | None
    views: tuple[tuple[str, str, Path], ...]  # (stream, layer, resolved path)
    role: str = "train"

    def paths_for(self, stream: str, layer: str) -> tuple[Path, ...]:
        return tuple(p for s, l, p in self.views if s == stream and l == layer)

    def layers(self) -> set[tuple[str, str]]:
        return {(s, l) for s, l, _ in self.views}


@dataclass(frozen=True)
class Manifest:
    class_names: tuple[str, ...]
    entries: tuple[ManifestEntry, ...]
    path: Path | None = field(default=None, compare=False)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def split(self, role: str) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.role == role)


def _parse_views(spec: str, base: Path, lineno: int) -> tuple[tuple[str, str, Path], ...]:
    views = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        head, sep, path = item.partition("=")
        if not sep or not path:
            raise ValidationError(f"line {lineno}: malformed view '{item}'")
        stream, sep, layer = head.partition(":")
        if not sep or not layer:
            raise ValidationError(f"line {lineno}: malformed view key '{head}'")
        if stream not in STREAMS:
            raise ValidationError(f"line {lineno}: unknown stream '{stream}'")
        views.append((stream, layer, base / path))
    if not views:
        raise ValidationError(f"line {lineno}: entry lists no view files")
    return tuple(views)


def load_manifest(path: str | Path) -> Manifest:
    """Load and validate a manifest file.

    View file paths are resolved but not opened; a dangling path only
    surfaces later, at read_tensor time.
    """
    path = Path(path)
    base = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("classes:"):
        raise ValidationError(f"{path}: first line must be 'classes: ...'")
    class_names = tuple(
        name.strip() for name in lines[0][len("classes:"):].split(",") if name.strip()
    )
    if not class_names:
        raise ValidationError(f"{path}: empty class list")

    entries = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise ValidationError(f"{path} line {lineno}: expected 3 or 4 fields")
        image_id, label_text, view_spec = fields[0], fields[1], fields[2]
        role = fields[3].strip() if len(fields) == 4 else "train"
        if role not in ROLES:
            raise ValidationError(f"{path} line {lineno}: unknown role '{role}'")
        if image_id in seen:
            raise ValidationError(f"{path} line {lineno}: duplicate image_id '{image_id}'")
        seen.add(image_id)
        try:
            label_index = int(label_text)
        except ValueError:
            raise ValidationError(
                f"{path} line {lineno}: label '{label_text}' is not an integer"
            ) from None
        if label_index == -1:
            label = None
        elif 0 <= label_index < len(class_names):
            label = label_index
        else:
            raise ValidationError(
                f"{path} line {lineno}: label {label_index} outside "
                f"0..{len(class_names) - 1}"
            )
        views = _parse_views(view_spec, base, lineno)
        entries.append(ManifestEntry(image_id, label, views, role))

    return Manifest(class_names=class_names, entries=tuple(entries), path=path)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Serialize a manifest; view paths are written relative to ``path``."""
    path = Path(path)
    base = path.parent
    lines = ["classes: " + ",".join(manifest.class_names)]
    for entry in manifest.entries:
        views = ",".join(
            f"{s}:{l}={os.path.relpath(p, base)}" for s, l, p in entry.views
        )
        label = -1 if entry.label is None else entry.label
        lines.append(f"{entry.image_id}\t{label}\t{views}\t{entry.role}")
    atomic_write_text(path, "\n".join(lines) + "\n")
