"""Binary tensor container.

Layout of a container file:

* bytes 0-3   : ASCII magic ``CPM4``
* bytes 4-7   : format version, little-endian u32 (currently 1)
* bytes 8-15  : header length H, little-endian u64
* next H bytes: UTF-8 JSON object mapping tensor name -> entry
* remainder   : raw tensor data; every entry's ``offset`` is relative to the
  end of the header and 64-byte aligned

Entry kinds:

* ``{"dtype": "f32", "shape": [...], "offset": o, "length": n}`` — raw
  little-endian float32 data, ``length`` bytes.
* ``{"dtype": "q4g", "shape": [rows, cols], "offset": o, "length": n,
  "group_size": g, "bits": 4, "mode": ..., "prefix_s": ...}`` — a 4-bit
  group-quantized matrix: codes packed two per byte (low nibble first)
  within each group, followed by the per-(row, group) float32 scales and
  zero-points.
* ``{"dtype": "meta", "value": {...}}`` — inline JSON payload (model config,
  quantization settings); carries no data bytes.

Writes are atomic (temp file in the destination directory, then rename).
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"CPM4"
VERSION = 1
ALIGNMENT = 64

_HEADER_PREFIX = struct.Struct("<4sIQ")  # magic, version, header length


class FormatError(ValueError):
    """The file is not a well-formed container (magic/version/truncation)."""


class ValidationError(ValueError):
    """The container parses but its contents are inconsistent."""


@dataclasses.dataclass
class QuantizedTensor:
    """A 4-bit group-quantized matrix plus its dequantization parameters.

    ``codes`` holds unpacked integer codes in ``0..15`` with shape
    (rows, cols); ``scales`` and ``zeros`` have shape (rows, n_groups) where
    groups tile the column (input) dimension in runs of ``group_size``.
    ``mode`` records how the calibration Hessian was formed ("full" or
    "prefix"); ``prefix_s`` is the number of leading positions excluded in
    prefix mode (0 otherwise).
    """

    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    group_size: int
    mode: str = "full"
    prefix_s: int = 0
    bits: int = 4  # in-memory only: containers accept 4-bit tensors alone

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape  # type: ignore[return-value]

    @property
    def n_groups(self) -> int:
        rows, cols = self.codes.shape
        return -(-cols // self.group_size)

    def validate(self, name: str = "<tensor>") -> None:
        if self.codes.ndim != 2:
            raise ValidationError(f"{name}: codes must be 2-D, got {self.codes.ndim}-D")
        if self.group_size <= 0:
            raise ValidationError(f"{name}: group_size must be positive")
        if not 2 <= self.bits <= 8:
            raise ValidationError(f"{name}: code width {self.bits} outside 2..8 bits")
        top = (1 << self.bits) - 1
        if self.codes.min(initial=0) < 0 or self.codes.max(initial=0) > top:
            raise ValidationError(f"{name}: {self.bits}-bit codes must lie in 0..{top}")
        expected = (self.codes.shape[0], self.n_groups)
        if self.scales.shape != expected or self.zeros.shape != expected:
            raise ValidationError(
                f"{name}: scales/zeros shape {self.scales.shape}/{self.zeros.shape} "
                f"!= expected {expected}"
            )
        if self.mode not in ("full", "prefix"):
            raise ValidationError(f"{name}: unknown quantization mode {self.mode!r}")


def pack_nibbles(codes: np.ndarray, group_size: int) -> bytes:
    """Pack 4-bit codes two per byte, low nibble first, within each group.

    Each (row, group) run is padded to an even length independently so that
    group boundaries always start on a byte boundary.
    """
    rows, cols = codes.shape
    out = bytearray()
    for r in range(rows):
        for g0 in range(0, cols, group_size):
            run = codes[r, g0 : g0 + group_size].astype(np.uint8)
            if run.size % 2:
                run = np.concatenate([run, np.zeros(1, dtype=np.uint8)])
            out += (run[0::2] | (run[1::2] << 4)).tobytes()
    return bytes(out)


def unpack_nibbles(raw: bytes, rows: int, cols: int, group_size: int) -> np.ndarray:
    """Inverse of :func:`pack_nibbles`."""
    n_groups = -(-cols // group_size)
    codes = np.empty((rows, cols), dtype=np.uint8)
    data = np.frombuffer(raw, dtype=np.uint8)
    pos = 0
    for r in range(rows):
        for g in range(n_groups):
            g0 = g * group_size
            width = min(group_size, cols - g0)
            nbytes = (width + 1) // 2
            chunk = data[pos : pos + nbytes]
            pos += nbytes
            lo = chunk & 0x0F
            hi = chunk >> 4
            run = np.empty(nbytes * 2, dtype=np.uint8)
            run[0::2] = lo
            run[1::2] = hi
            codes[r, g0 : g0 + width] = run[:width]
    if pos != data.size:
        raise ValidationError(
            f"quantized payload has {data.size} bytes, expected {pos}"
        )
    return codes


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _q4g_payload(qt: QuantizedTensor) -> bytes:
    packed = pack_nibbles(qt.codes, qt.group_size)
    scales = np.ascontiguousarray(qt.scales, dtype="<f4").tobytes()
    zeros = np.ascontiguousarray(qt.zeros, dtype="<f4").tobytes()
    return packed + scales + zeros


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` via a same-directory temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(
    path: str | os.PathLike,
    tensors: dict[str, np.ndarray | QuantizedTensor],
    meta: dict[str, dict] | None = None,
) -> None:
    """Write tensors (and optional inline meta entries) to ``path`` atomically."""
    header: dict[str, dict] = {}
    payloads: list[bytes] = []
    offset = 0
    for name, tensor in tensors.items():
        if not name:
            raise ValidationError("tensor names must be non-empty")
        if name in header:
            raise ValidationError(f"duplicate tensor name {name!r}")
        offset = _align(offset)
        if isinstance(tensor, QuantizedTensor):
            tensor.validate(name)
            if tensor.bits != 4:
                raise ValidationError(
                    f"{name}: containers store 4-bit codes only, got {tensor.bits}"
                )
            payload = _q4g_payload(tensor)
            entry = {
                "dtype": "q4g",
                "shape": list(tensor.codes.shape),
                "offset": offset,
                "length": len(payload),
                "group_size": int(tensor.group_size),
                "bits": 4,
                "mode": tensor.mode,
                "prefix_s": int(tensor.prefix_s),
            }
        else:
            arr = np.asarray(tensor)
            if not np.issubdtype(arr.dtype, np.floating):
                raise ValidationError(f"{name}: only float tensors are stored, got {arr.dtype}")
            payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entry = {
                "dtype": "f32",
                "shape": list(arr.shape),
                "offset": offset,
                "length": len(payload),
            }
        header[name] = entry
        payloads.append(payload)
        offset += len(payload)

    for name, value in (meta or {}).items():
        if not name:
            raise ValidationError("meta entry names must be non-empty")
        if name in header:
            raise ValidationError(f"meta entry {name!r} collides with a tensor name")
        header[name] = {"dtype": "meta", "value": value}

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".cpm4-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
            fh.write(header_bytes)
            cursor = 0
            for entry, payload in zip(
                (e for e in header.values() if e["dtype"] != "meta"), payloads
            ):
                pad = entry["offset"] - cursor
                fh.write(b"\x00" * pad)
                fh.write(payload)
                cursor = entry["offset"] + len(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(
    path: str | os.PathLike,
) -> tuple[dict[str, np.ndarray | QuantizedTensor], dict[str, dict]]:
    """Read a container; returns (tensors, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER_PREFIX.size:
        raise FormatError("file too short to be a container")
    magic, version, header_len = _HEADER_PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    header_end = _HEADER_PREFIX.size + header_len
    if len(blob) < header_end:
        raise FormatError("truncated header")
    try:
        header = json.loads(blob[_HEADER_PREFIX.size : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")

    data = blob[header_end:]
    tensors: dict[str, np.ndarray | QuantizedTensor] = {}
    meta: dict[str, dict] = {}
    for name, entry in header.items():
        if not name:
            raise ValidationError("tensor names must be non-empty")
        dtype = entry.get("dtype")
        if dtype == "meta":
            meta[name] = entry.get("value", {})
            continue
        offset, length = int(entry["offset"]), int(entry["length"])
        if offset % ALIGNMENT:
            raise ValidationError(f"{name}: offset {offset} is not {ALIGNMENT}-byte aligned")
        if offset + length > len(data):
            raise ValidationError(f"{name}: data range exceeds file size")
        shape = tuple(int(x) for x in entry["shape"])
        raw = data[offset : offset + length]
        if dtype == "f32":
            count = int(np.prod(shape)) if shape else 1
            if length != count * 4:
                raise ValidationError(
                    f"{name}: length {length} inconsistent with shape {shape}"
                )
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        elif dtype == "q4g":
            rows, cols = shape
            group_size = int(entry["group_size"])
            if int(entry.get("bits", 4)) != 4:
                raise ValidationError(f"{name}: container stores 4-bit codes only")
            n_groups = -(-cols // group_size)
            code_bytes = sum(
                (min(group_size, cols - g * group_size) + 1) // 2
                for g in range(n_groups)
            ) * rows
            param_bytes = rows * n_groups * 4
            if length != code_bytes + 2 * param_bytes:
                raise ValidationError(
                    f"{name}: length {length} inconsistent with q4g layout"
                )
            codes = unpack_nibbles(raw[:code_bytes], rows, cols, group_size)
            scales = np.frombuffer(
                raw[code_bytes : code_bytes + param_bytes], dtype="<f4"
            ).reshape(rows, n_groups).copy()
            zeros = np.frombuffer(
                raw[code_bytes + param_bytes :], dtype="<f4"
            ).reshape(rows, n_groups).copy()
            qt = QuantizedTensor(
                codes=codes,
                scales=scales,
                zeros=zeros,
                group_size=group_size,
                mode=entry.get("mode", "full"),
                prefix_s=int(entry.get("prefix_s", 0)),
            )
            qt.validate(name)
            tensors[name] = qt
        else:
            raise ValidationError(f"{name}: unknown dtype {dtype!r}")
    return tensors, meta
