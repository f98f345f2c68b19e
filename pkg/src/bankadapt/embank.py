"""In-memory and on-disk containers for the pre-training bank and downstream data.

Two little-endian binary formats, both ending in a CRC32 of the payload:

DATB (embedding bank), header 24 bytes::

    magic b"DATB" | version u16 | flags u16 | m u64 | D_img u32 | d u32
    payload:
        images         m*D_img  float32, row-major
        feats          m*d      float32, unit rows
        caption_feats  m*d      float32, unit rows
        latent_class   m        int32  (-1 = unknown / out of distribution)
        caption table: blob_len u64, then m (offset u64, len u64) pairs,
                       then blob_len bytes of UTF-8
    crc32 u32 over the payload bytes

DATD (downstream dataset), header 28 bytes::

    magic b"DATD" | version u16 | flags u16 | n u64 | C u32 | D_img u32 | d u32
    payload:
        images           n*D_img float32
        labels           n       uint32
        class_text_feats C*d     float32, unit rows
        names table, descriptions table (same layout as the caption table,
        C entries each)
    crc32 u32 over the payload bytes

Arrays are stored in binary32; training code converts to binary64 at the edge.
Writers validate invariants and refuse to write a violating container, so a
file that decodes cleanly round-trips bit-exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1
UNIT_NORM_TOL = 1e-5

_BANK_MAGIC = b"DATB"
_DATASET_MAGIC = b"DATD"
_BANK_HEADER = struct.Struct("<4sHHQII")
_DATASET_HEADER = struct.Struct("<4sHHQIII")


class FormatError(ValueError):
    """Bad magic, unsupported version, or malformed structure."""


class TruncatedFileError(ValueError):
    """File shorter (or longer) than the header promises."""


class ChecksumError(ValueError):
    """Payload bytes do not match the stored CRC32."""


class ValidationError(ValueError):
    """Container violates a type invariant."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass(frozen=True, eq=False)
class EmbeddingBank:
    """Pre-training records: raw image vectors, frozen features, captions.

    latent_class holds the generating class for synthetic records (-1 when
    unknown or out of distribution); it is ground truth for precision
    reporting only and is never read by the samplers or the trainer.
    """

    images: np.ndarray         # (m, D_img) float32
    feats: np.ndarray          # (m, d) float32, unit rows
    caption_feats: np.ndarray  # (m, d) float32, unit rows
    captions: list[str]
    latent_class: np.ndarray   # (m,) int32

    @property
    def size(self) -> int:
        return self.images.shape[0]

    @property
    def image_dim(self) -> int:
        return self.images.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.feats.shape[1]


@dataclass(frozen=True, eq=False)
class DownstreamDataset:
    """Labeled downstream task: images, integer labels, per-class text features."""

    images: np.ndarray            # (n, D_img) float32
    labels: np.ndarray            # (n,) int32 in [0, C)
    class_names: list[str]
    class_descriptions: list[str]
    class_text_feats: np.ndarray  # (C, d) float32, unit rows

    @property
    def size(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return self.class_text_feats.shape[0]

    @property
    def image_dim(self) -> int:
        return self.images.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.class_text_feats.shape[1]


def _check_finite(name: str, arr: np.ndarray, out: list[str]) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = np.argwhere(bad)[0]
        out.append(f"{name} has non-finite value at index {tuple(int(i) for i in idx)}")


def _check_unit_rows(name: str, arr: np.ndarray, out: list[str]) -> None:
    if arr.size == 0:
        return
    norms = np.linalg.norm(arr.astype(np.float64), axis=1)
    off = np.abs(norms - 1.0) > UNIT_NORM_TOL
    if off.any():
        i = int(np.argmax(off))
        out.append(f"{name} row {i} has norm {norms[i]:.8f}, expected 1 within {UNIT_NORM_TOL}")


def validate_bank(bank: EmbeddingBank) -> list[str]:
    """Return a list of invariant violations (empty when the bank is valid)."""
    v: list[str] = []
    m = bank.images.shape[0]
    if bank.images.ndim != 2 or bank.feats.ndim != 2 or bank.caption_feats.ndim != 2:
        v.append("images, feats and caption_feats must be 2-d arrays")
        return v
    if bank.feats.shape[0] != m or bank.caption_feats.shape[0] != m:
        v.append(f"row counts disagree: images {m}, feats {bank.feats.shape[0]}, "
                 f"caption_feats {bank.caption_feats.shape[0]}")
    if bank.caption_feats.shape[1] != bank.feats.shape[1]:
        v.append("feats and caption_feats must share the feature dimension")
    if len(bank.captions) != m:
        v.append(f"expected {m} captions, got {len(bank.captions)}")
    if bank.latent_class.shape != (m,):
        v.append(f"latent_class shape {bank.latent_class.shape}, expected ({m},)")
    _check_finite("images", bank.images, v)
    _check_finite("feats", bank.feats, v)
    _check_finite("caption_feats", bank.caption_feats, v)
    _check_unit_rows("feats", bank.feats, v)
    _check_unit_rows("caption_feats", bank.caption_feats, v)
    return v


def validate_dataset(ds: DownstreamDataset) -> list[str]:
    v: list[str] = []
    n = ds.images.shape[0]
    C = ds.class_text_feats.shape[0]
    if ds.labels.shape != (n,):
        v.append(f"labels shape {ds.labels.shape}, expected ({n},)")
        return v
    if len(ds.class_names) != C or len(ds.class_descriptions) != C:
        v.append(f"expected {C} class names and descriptions, got "
                 f"{len(ds.class_names)} and {len(ds.class_descriptions)}")
    if n and (ds.labels.min() < 0 or ds.labels.max() >= C):
        bad = int(np.argmax((ds.labels < 0) | (ds.labels >= C)))
        v.append(f"label {int(ds.labels[bad])} at index {bad} outside [0, {C})")
    _check_finite("images", ds.images, v)
    _check_finite("class_text_feats", ds.class_text_feats, v)
    _check_unit_rows("class_text_feats", ds.class_text_feats, v)
    return v


def _encode_string_table(strings: list[str]) -> bytes:
    blobs = [s.encode("utf-8") for s in strings]
    offsets = []
    pos = 0
    for b in blobs:
        offsets.append((pos, len(b)))
        pos += len(b)
    parts = [struct.pack("<Q", pos)]
    parts.extend(struct.pack("<QQ", off, ln) for off, ln in offsets)
    parts.extend(blobs)
    return b"".join(parts)


class _Cursor:
    def __init__(self, data: bytes, pos: int):
        self.data = data
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"truncated while reading {what}: expected {self.pos + n} bytes, "
                f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def take_array(self, count: int, dtype, what: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)


def _decode_string_table(cur: _Cursor, count: int, what: str) -> list[str]:
    (blob_len,) = struct.unpack("<Q", cur.take(8, f"{what} blob length"))
    pairs = [struct.unpack("<QQ", cur.take(16, f"{what} offset table"))
             for _ in range(count)]
    blob = cur.take(blob_len, f"{what} blob")
    out = []
    for i, (off, ln) in enumerate(pairs):
        if off + ln > blob_len:
            raise FormatError(f"{what} entry {i} points outside the blob")
        out.append(blob[off:off + ln].decode("utf-8"))
    return out


def _f32_rows(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_bank_file(bank: EmbeddingBank, path) -> None:
    violations = validate_bank(bank)
    if violations:
        raise ValidationError(violations)
    m, d_img, d = bank.size, bank.image_dim, bank.feat_dim
    header = _BANK_HEADER.pack(_BANK_MAGIC, FORMAT_VERSION, 0, m, d_img, d)
    payload = b"".join([
        _f32_rows(bank.images),
        _f32_rows(bank.feats),
        _f32_rows(bank.caption_feats),
        np.ascontiguousarray(bank.latent_class, dtype="<i4").tobytes(),
        _encode_string_table(bank.captions),
    ])
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def _open_container(path, magic: bytes, header: struct.Struct):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < header.size + 4:
        raise TruncatedFileError(
            f"expected at least {header.size + 4} bytes, file has {len(data)}")
    fields = header.unpack_from(data, 0)
    if fields[0] != magic:
        raise FormatError(f"bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != FORMAT_VERSION:
        raise FormatError(f"unsupported version {fields[1]}, expected {FORMAT_VERSION}")
    payload = data[header.size:-4]
    (stored_crc,) = struct.unpack("<I", data[-4:])
    actual_crc = zlib.crc32(payload) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"payload crc32 {actual_crc:#010x} does not match stored {stored_crc:#010x}")
    return fields, _Cursor(data, header.size), len(data)


def decode_bank_file(path) -> EmbeddingBank:
    fields, cur, total = _open_container(path, _BANK_MAGIC, _BANK_HEADER)
    _, _, flags, m, d_img, d = fields
    images = cur.take_array(m * d_img, np.float32, "images").reshape(m, d_img)
    feats = cur.take_array(m * d, np.float32, "feats").reshape(m, d)
    caption_feats = cur.take_array(m * d, np.float32, "caption_feats").reshape(m, d)
    latent = cur.take_array(m, np.int32, "latent_class")
    captions = _decode_string_table(cur, m, "captions")
    if cur.pos != total - 4:
        raise FormatError(f"{total - 4 - cur.pos} trailing bytes after the caption table")
    bank = EmbeddingBank(images=images, feats=feats, caption_feats=caption_feats,
                         captions=captions, latent_class=latent)
    violations = validate_bank(bank)
    if violations:
        raise ValidationError(violations)
    return bank


def encode_dataset_file(ds: DownstreamDataset, path) -> None:
    violations = validate_dataset(ds)
    if violations:
        raise ValidationError(violations)
    n, C, d_img, d = ds.size, ds.n_classes, ds.image_dim, ds.feat_dim
    header = _DATASET_HEADER.pack(_DATASET_MAGIC, FORMAT_VERSION, 0, n, C, d_img, d)
    payload = b"".join([
        _f32_rows(ds.images),
        np.ascontiguousarray(ds.labels, dtype="<u4").tobytes(),
        _f32_rows(ds.class_text_feats),
        _encode_string_table(ds.class_names),
        _encode_string_table(ds.class_descriptions),
    ])
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def decode_dataset_file(path) -> DownstreamDataset:
    fields, cur, total = _open_container(path, _DATASET_MAGIC, _DATASET_HEADER)
    _, _, flags, n, C, d_img, d = fields
    images = cur.take_array(n * d_img, np.float32, "images").reshape(n, d_img)
    labels = cur.take_array(n, np.uint32, "labels").astype(np.int32)
    class_text_feats = cur.take_array(C * d, np.float32, "class_text_feats").reshape(C, d)
    names = _decode_string_table(cur, C, "class names")
    descriptions = _decode_string_table(cur, C, "class descriptions")
    if cur.pos != total - 4:
        raise FormatError(f"{total - 4 - cur.pos} trailing bytes after the string tables")
    ds = DownstreamDataset(images=images, labels=labels, class_names=names,
                           class_descriptions=descriptions,
                           class_text_feats=class_text_feats)
    violations = validate_dataset(ds)
    if violations:
        raise ValidationError(violations)
    return ds
