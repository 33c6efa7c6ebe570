"""Reader and writer for a restricted DICOM Part-10 subset.

Supported: uncompressed Explicit VR Little Endian, single-frame, 16-bit
MONOCHROME2. Everything else raises a :class:`DicomError` subclass rather
than being misread.
"""

from __future__ import annotations

import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
CT_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.2"
IMPLEMENTATION_UID = "1.2.826.0.1.3680043.10.1001"

HU_MIN = -1024.0
HU_MAX = 3071.0

# VRs whose explicit encoding uses 2 reserved bytes and a 4-byte length
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
_UNDEFINED = 0xFFFFFFFF

TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
TAG_PATIENT_ID = (0x0010, 0x0020)
TAG_SERIES_UID = (0x0020, 0x000E)
TAG_INSTANCE = (0x0020, 0x0013)
TAG_SAMPLES = (0x0028, 0x0002)
TAG_PHOTOMETRIC = (0x0028, 0x0004)
TAG_FRAMES = (0x0028, 0x0008)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLS = (0x0028, 0x0011)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_REPR = (0x0028, 0x0103)
TAG_INTERCEPT = (0x0028, 0x1052)
TAG_SLOPE = (0x0028, 0x1053)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)

_ITEM = (0xFFFE, 0xE000)
_ITEM_END = (0xFFFE, 0xE00D)
_SEQ_END = (0xFFFE, 0xE0DD)


class DicomError(ValueError):
    """Base class for every parse failure."""


class MissingMagic(DicomError):
    pass


class UnsupportedTransferSyntax(DicomError):
    pass


class UnsupportedPixelFormat(DicomError):
    pass


class MissingRequiredTag(DicomError):
    pass


class PixelLengthMismatch(DicomError):
    pass


class TruncatedFile(DicomError):
    pass


class MalformedElement(DicomError):
    pass


class MixedSeries(DicomError):
    pass


class DuplicateInstance(DicomError):
    pass


class EmptySeries(DicomError):
    pass


@dataclass(frozen=True)
class DicomSlice:
    patient_id: str
    series_id: str
    instance_number: int
    rows: int
    cols: int
    bits_allocated: int
    pixel_representation: str  # "unsigned" | "signed"
    rescale_slope: float
    rescale_intercept: float
    stored_pixels: np.ndarray  # rows×cols, uint16 or int16

    def __post_init__(self):
        if self.bits_allocated != 16:
            raise UnsupportedPixelFormat(f"BitsAllocated {self.bits_allocated} (only 16 supported)")
        if self.stored_pixels.size != self.rows * self.cols:
            raise PixelLengthMismatch(
                f"{self.stored_pixels.size} pixels for a {self.rows}x{self.cols} image"
            )


@dataclass(frozen=True)
class HuSlice:
    """One CT cross-section in Hounsfield units (float32, rows×cols)."""

    hu: np.ndarray

    @property
    def height(self) -> int:
        return self.hu.shape[0]

    @property
    def width(self) -> int:
        return self.hu.shape[1]


@dataclass(frozen=True)
class SeriesVolume:
    patient_id: str
    series_id: str
    instance_numbers: tuple[int, ...]
    slices: tuple[HuSlice, ...]

    def __len__(self) -> int:
        return len(self.slices)


# --------------------------------------------------------------------------
# parsing


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if n < 0 or end > len(self.buf):
            raise TruncatedFile(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def at_end(self) -> bool:
        return self.pos >= len(self.buf)

    def tag(self) -> tuple[int, int]:
        g, e = struct.unpack("<HH", self.take(4))
        return g, e

    def element(self) -> tuple[tuple[int, int], bytes, int]:
        """Read an explicit-VR header; returns (tag, vr, value length)."""
        tag = self.tag()
        if tag[0] == 0xFFFE:
            return tag, b"", struct.unpack("<I", self.take(4))[0]
        vr = self.take(2)
        if not (vr.isalpha() and vr.isupper()):
            raise MalformedElement(f"bad VR {vr!r} for tag {tag[0]:04X},{tag[1]:04X}")
        if vr in _LONG_VRS:
            self.take(2)
            length = struct.unpack("<I", self.take(4))[0]
        else:
            length = struct.unpack("<H", self.take(2))[0]
        return tag, vr, length

    def skip_undefined_sequence(self) -> None:
        """Skip items of an undefined-length sequence through its delimiter."""
        while True:
            tag = self.tag()
            length = struct.unpack("<I", self.take(4))[0]
            if tag == _SEQ_END:
                return
            if tag != _ITEM:
                raise MalformedElement(f"unexpected tag {tag} inside sequence")
            if length == _UNDEFINED:
                self.skip_dataset_until_item_end()
            else:
                self.take(length)

    def skip_dataset_until_item_end(self) -> None:
        while True:
            tag, vr, length = self.element()
            if tag == _ITEM_END:
                return
            if length == _UNDEFINED:
                if vr not in (b"SQ", b"UN"):
                    raise MalformedElement(f"undefined length on VR {vr!r}")
                self.skip_undefined_sequence()
            else:
                self.take(length)


def _text(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").strip(" \x00")


def _us(raw: bytes, tag) -> int:
    if len(raw) < 2:
        raise MalformedElement(f"US value too short for {tag}")
    return struct.unpack("<H", raw[:2])[0]


def _number(raw: bytes, tag, kind=float):
    s = _text(raw).split("\\")[0]
    try:
        return kind(float(s)) if kind is int else kind(s)
    except (ValueError, OverflowError) as exc:
        raise MalformedElement(f"cannot parse {s!r} for tag {tag}") from exc


def parse_dicom(data: bytes) -> DicomSlice:
    if len(data) < 132 or data[128:132] != b"DICM":
        raise MissingMagic("no DICM marker at offset 128")
    r = _Reader(data, 132)
    elements: dict[tuple[int, int], bytes] = {}
    pixel_data: bytes | None = None

    # file meta group is always explicit VR little endian
    while not r.at_end():
        save = r.pos
        group = struct.unpack("<H", r.take(2))[0]
        r.pos = save
        if group != 0x0002:
            break
        tag, vr, length = r.element()
        if length == _UNDEFINED:
            raise MalformedElement("undefined length in file meta group")
        elements[tag] = r.take(length)

    syntax = _text(elements.get(TAG_TRANSFER_SYNTAX, b""))
    if syntax != EXPLICIT_VR_LE:
        raise UnsupportedTransferSyntax(f"transfer syntax {syntax or '<missing>'!r}")

    while not r.at_end():
        tag, vr, length = r.element()
        if tag == TAG_PIXEL_DATA:
            if length == _UNDEFINED:
                raise UnsupportedTransferSyntax("encapsulated pixel data")
            pixel_data = r.take(length)
            break
        if length == _UNDEFINED:
            if vr not in (b"SQ", b"UN"):
                raise MalformedElement(f"undefined length on VR {vr!r}")
            try:
                r.skip_undefined_sequence()
            except RecursionError as exc:
                raise MalformedElement("sequence nesting too deep") from exc
            continue
        value = r.take(length)
        if tag[0] in (0x0010, 0x0020, 0x0028):
            elements[tag] = value

    for tag, name in ((TAG_ROWS, "Rows"), (TAG_COLS, "Columns")):
        if tag not in elements:
            raise MissingRequiredTag(name)
    if pixel_data is None:
        raise MissingRequiredTag("PixelData")

    rows = _us(elements[TAG_ROWS], "Rows")
    cols = _us(elements[TAG_COLS], "Columns")
    if rows == 0 or cols == 0:
        raise MalformedElement("zero image dimension")
    bits = _us(elements[TAG_BITS_ALLOCATED], "BitsAllocated") if TAG_BITS_ALLOCATED in elements else 16
    if bits != 16:
        raise UnsupportedPixelFormat(f"BitsAllocated {bits}")
    photometric = _text(elements.get(TAG_PHOTOMETRIC, b"MONOCHROME2"))
    if photometric != "MONOCHROME2":
        raise UnsupportedPixelFormat(f"photometric interpretation {photometric}")
    if TAG_SAMPLES in elements and _us(elements[TAG_SAMPLES], "SamplesPerPixel") != 1:
        raise UnsupportedPixelFormat("multi-sample pixels")
    if TAG_FRAMES in elements and _number(elements[TAG_FRAMES], "NumberOfFrames", int) != 1:
        raise UnsupportedPixelFormat("multi-frame object")
    signed = TAG_PIXEL_REPR in elements and _us(elements[TAG_PIXEL_REPR], "PixelRepresentation") == 1

    expected = rows * cols * 2
    if len(pixel_data) != expected:
        raise PixelLengthMismatch(f"PixelData has {len(pixel_data)} bytes, expected {expected}")
    pixels = np.frombuffer(pixel_data, dtype="<i2" if signed else "<u2").reshape(rows, cols)

    slope = _number(elements[TAG_SLOPE], "RescaleSlope") if TAG_SLOPE in elements else 1.0
    intercept = _number(elements[TAG_INTERCEPT], "RescaleIntercept") if TAG_INTERCEPT in elements else 0.0
    if not (np.isfinite(slope) and np.isfinite(intercept)):
        raise MalformedElement("non-finite rescale parameters")
    instance = _number(elements[TAG_INSTANCE], "InstanceNumber", int) if TAG_INSTANCE in elements else 0
    if instance < 0:
        raise MalformedElement(f"negative InstanceNumber {instance}")

    return DicomSlice(
        patient_id=_text(elements.get(TAG_PATIENT_ID, b"")),
        series_id=_text(elements.get(TAG_SERIES_UID, b"")),
        instance_number=instance,
        rows=rows,
        cols=cols,
        bits_allocated=bits,
        pixel_representation="signed" if signed else "unsigned",
        rescale_slope=slope,
        rescale_intercept=intercept,
        stored_pixels=pixels.astype(pixels.dtype.newbyteorder("=")),
    )


def read_dicom(path: str | os.PathLike) -> DicomSlice:
    return parse_dicom(Path(path).read_bytes())


def to_hu(ds: DicomSlice) -> HuSlice:
    hu = ds.stored_pixels.astype(np.float64) * ds.rescale_slope + ds.rescale_intercept
    return HuSlice(np.clip(hu, HU_MIN, HU_MAX).astype(np.float32))


def load_series(paths: Sequence[str | os.PathLike], jobs: int = 1) -> SeriesVolume:
    paths = list(paths)
    if not paths:
        raise EmptySeries("no files given")
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parsed = list(pool.map(read_dicom, paths))
    else:
        parsed = [read_dicom(p) for p in paths]
    ids = {(d.patient_id, d.series_id) for d in parsed}
    if len(ids) > 1:
        raise MixedSeries(f"files span {len(ids)} patient/series pairs")
    seen: set[int] = set()
    for d in parsed:
        if d.instance_number in seen:
            raise DuplicateInstance(f"instance {d.instance_number} appears twice")
        seen.add(d.instance_number)
    parsed.sort(key=lambda d: d.instance_number)
    return SeriesVolume(
        patient_id=parsed[0].patient_id,
        series_id=parsed[0].series_id,
        instance_numbers=tuple(d.instance_number for d in parsed),
        slices=tuple(to_hu(d) for d in parsed),
    )


# --------------------------------------------------------------------------
# writing


def _pad(value: bytes, fill: bytes = b" ") -> bytes:
    return value + fill if len(value) % 2 else value


def _elem(group: int, element: int, vr: str, value: bytes) -> bytes:
    vrb = vr.encode("ascii")
    fill = b"\x00" if vr in ("UI", "OB", "OW") else b" "
    value = _pad(value, fill)
    if vrb in _LONG_VRS:
        return struct.pack("<HH2sHI", group, element, vrb, 0, len(value)) + value
    return struct.pack("<HH2sH", group, element, vrb, len(value)) + value


def _us_bytes(v: int) -> bytes:
    return struct.pack("<H", v)


def encode_dicom(
    stored: np.ndarray,
    patient_id: str,
    series_id: str,
    instance_number: int,
    rescale_slope: float = 1.0,
    rescale_intercept: float = -1024.0,
    signed: bool = False,
    transfer_syntax: str = EXPLICIT_VR_LE,
) -> bytes:
    """Serialize a 16-bit single-frame image into Part-10 bytes."""
    stored = np.asarray(stored)
    rows, cols = stored.shape
    sop_uid = f"{series_id}.{instance_number}"
    meta_body = b"".join(
        [
            _elem(0x0002, 0x0001, "OB", b"\x00\x01"),
            _elem(0x0002, 0x0002, "UI", CT_IMAGE_STORAGE.encode()),
            _elem(0x0002, 0x0003, "UI", sop_uid.encode()),
            _elem(0x0002, 0x0010, "UI", transfer_syntax.encode()),
            _elem(0x0002, 0x0012, "UI", IMPLEMENTATION_UID.encode()),
        ]
    )
    meta = _elem(0x0002, 0x0000, "UL", struct.pack("<I", len(meta_body))) + meta_body
    dtype = "<i2" if signed else "<u2"
    body = b"".join(
        [
            _elem(0x0008, 0x0016, "UI", CT_IMAGE_STORAGE.encode()),
            _elem(0x0008, 0x0018, "UI", sop_uid.encode()),
            _elem(0x0008, 0x0060, "CS", b"CT"),
            _elem(0x0010, 0x0020, "LO", patient_id.encode("ascii")),
            _elem(0x0020, 0x000E, "UI", series_id.encode("ascii")),
            _elem(0x0020, 0x0013, "IS", str(int(instance_number)).encode()),
            _elem(0x0028, 0x0002, "US", _us_bytes(1)),
            _elem(0x0028, 0x0004, "CS", b"MONOCHROME2"),
            _elem(0x0028, 0x0010, "US", _us_bytes(rows)),
            _elem(0x0028, 0x0011, "US", _us_bytes(cols)),
            _elem(0x0028, 0x0100, "US", _us_bytes(16)),
            _elem(0x0028, 0x0101, "US", _us_bytes(16)),
            _elem(0x0028, 0x0102, "US", _us_bytes(15)),
            _elem(0x0028, 0x0103, "US", _us_bytes(1 if signed else 0)),
            _elem(0x0028, 0x1052, "DS", f"{rescale_intercept:g}".encode()),
            _elem(0x0028, 0x1053, "DS", f"{rescale_slope:g}".encode()),
            _elem(0x7FE0, 0x0010, "OW", stored.astype(dtype).tobytes()),
        ]
    )
    return b"\x00" * 128 + b"DICM" + meta + body
