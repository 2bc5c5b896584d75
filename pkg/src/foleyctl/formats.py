"""Bit-exact file I/O: WAV, binary tensors, envelope JSON, manifests.

WAV support covers PCM-16 and IEEE float-32, mono or stereo. The tensor
format is deliberately tiny: magic ``FTNS1``, a dtype code (1 = little-endian
float32), ndim, little-endian u64 dims, then the row-major payload. Model
checkpoints are directories holding one tensor file per parameter plus a
JSON manifest.
"""
from __future__ import annotations

import hashlib
import json
import re
import struct
from pathlib import Path

import numpy as np

from .dsp import Envelope, QuantizedEnvelope, Waveform
from .errors import FormatError, InvalidInput, Unsupported, ValidationError

TENSOR_MAGIC = b"FTNS1"
DTYPE_FLOAT32 = 1
_MAX_ELEMENTS = 1 << 40  # reject absurd dim products before allocating

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3


# ---------------------------------------------------------------------------
# WAV


def read_wav(path) -> Waveform:
    """Decode a PCM-16 or float-32 WAV file.

    PCM-16 samples are scaled by 1/32768, mapping the int16 range onto
    [-1, 1). Chunk sizes in the header are honored: trailing garbage after
    the data chunk is ignored.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError("file too short for a RIFF header", offset=0)
    if raw[0:4] != b"RIFF":
        raise FormatError("missing RIFF magic", offset=0)
    if raw[8:12] != b"WAVE":
        raise FormatError("missing WAVE form type", offset=8)

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body_start = pos + 8
        body_end = body_start + chunk_size
        if body_end > len(raw):
            raise FormatError(
                f"chunk {chunk_id!r} declares {chunk_size} bytes but only "
                f"{len(raw) - body_start} remain",
                offset=pos + 4,
            )
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise FormatError("fmt chunk shorter than 16 bytes", offset=body_start)
            fmt = struct.unpack_from("<HHIIHH", raw, body_start)
        elif chunk_id == b"data":
            data = (body_start, chunk_size)
        # chunks are word-aligned; skip the pad byte for odd sizes
        pos = body_end + (chunk_size & 1)
        if fmt is not None and data is not None:
            break
    if fmt is None:
        raise FormatError("no fmt chunk found", offset=len(raw))
    if data is None:
        raise FormatError("no data chunk found", offset=len(raw))

    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if channels not in (1, 2):
        raise Unsupported(f"unsupported channel count {channels}")
    start, size = data
    payload = raw[start : start + size]

    if audio_format == WAVE_FORMAT_PCM and bits == 16:
        samples = np.frombuffer(payload[: size - size % (2 * channels)], dtype="<i2")
        floats = samples.astype(np.float64) / 32768.0
    elif audio_format == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(payload[: size - size % (4 * channels)], dtype="<f4")
        floats = samples.astype(np.float64)
    else:
        raise Unsupported(
            f"unsupported codec: format={audio_format} bits={bits} "
            "(PCM-16 and float-32 only)"
        )
    frames = floats.reshape(-1, channels).T
    return Waveform(frames, sample_rate)


def write_wav(path, w: Waveform, bit_depth: int = 32) -> None:
    """Write a waveform as PCM-16 (bit_depth=16) or IEEE float-32 (32).

    Float-32 output round-trips bit-identically through read_wav.
    """
    if bit_depth == 16:
        audio_format, bits = WAVE_FORMAT_PCM, 16
        ints = np.clip(np.round(w.samples.T * 32768.0), -32768, 32767)
        payload = ints.astype("<i2").tobytes()
    elif bit_depth == 32:
        audio_format, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = w.samples.T.astype("<f4").tobytes()
    else:
        raise InvalidInput(f"bit_depth must be 16 or 32, got {bit_depth}")
    channels = w.channels
    block_align = channels * bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        audio_format,
        channels,
        w.sample_rate,
        w.sample_rate * block_align,
        block_align,
        bits,
        b"data",
        len(payload),
    )
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# Binary tensor format


def write_tensor(path, array: np.ndarray) -> None:
    """Serialize an array as float32 in the FTNS1 format."""
    arr = np.asarray(array, dtype="<f4")
    if not arr.flags.c_contiguous:
        # note: ascontiguousarray would silently turn 0-d into 1-d
        arr = np.ascontiguousarray(arr)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BB", DTYPE_FLOAT32, arr.ndim))
        for dim in arr.shape:
            f.write(struct.pack("<Q", dim))
        f.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an FTNS1 tensor file back into a float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 7:
        raise FormatError("file too short for a tensor header", offset=0)
    if raw[:5] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {raw[:5]!r}, expected {TENSOR_MAGIC!r}", offset=0)
    dtype_code, ndim = struct.unpack_from("<BB", raw, 5)
    if dtype_code != DTYPE_FLOAT32:
        raise Unsupported(f"unknown dtype code {dtype_code}")
    header_end = 7 + 8 * ndim
    if len(raw) < header_end:
        raise FormatError("truncated dims header", offset=len(raw))
    dims = struct.unpack_from(f"<{ndim}Q" if ndim else "", raw, 7) if ndim else ()
    count = 1
    for dim in dims:
        count *= dim
        if count > _MAX_ELEMENTS:
            raise FormatError(f"dims product overflows sane limits: {dims}", offset=7)
    expected = count * 4
    actual = len(raw) - header_end
    if actual != expected:
        raise FormatError(
            f"payload size mismatch: expected {expected} bytes, got {actual}",
            offset=header_end,
        )
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=header_end)
    return arr.reshape(dims).copy()


# ---------------------------------------------------------------------------
# Envelope JSON


def write_envelope_json(path, e: Envelope) -> None:
    payload = {
        "hop": int(e.hop),
        "source_sample_rate": int(e.source_sample_rate),
        "values": [float(v) for v in e.values],
    }
    Path(path).write_text(json.dumps(payload))


def read_envelope_json(path) -> Envelope:
    try:
        payload = json.loads(Path(path).read_text())
        return Envelope(
            np.asarray(payload["values"], dtype=np.float64),
            hop=int(payload["hop"]),
            source_sample_rate=int(payload["source_sample_rate"]),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"not a valid envelope JSON file: {exc}") from exc


def write_quantized_json(path, q: QuantizedEnvelope) -> None:
    payload = {
        "hop": int(q.hop),
        "source_sample_rate": int(q.source_sample_rate),
        "num_classes": int(q.num_classes),
        "classes": [int(c) for c in q.classes],
    }
    Path(path).write_text(json.dumps(payload))


def read_quantized_json(path) -> QuantizedEnvelope:
    try:
        payload = json.loads(Path(path).read_text())
        return QuantizedEnvelope(
            np.asarray(payload["classes"], dtype=np.int64),
            num_classes=int(payload["num_classes"]),
            hop=int(payload.get("hop", 1)),
            source_sample_rate=int(payload.get("source_sample_rate", 0)),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"not a valid quantized envelope JSON file: {exc}") from exc


# ---------------------------------------------------------------------------
# Dataset manifests


class ManifestEntry:
    """One dataset clip: a source id, a time span, and artifact paths."""

    __slots__ = ("source_id", "start", "end", "audio_path", "feature_path", "extra")

    def __init__(self, source_id, start, end, audio_path=None, feature_path=None, extra=None):
        if not 0 <= start < end:
            raise ValidationError(f"need 0 <= start < end, got [{start}, {end}]")
        self.source_id = source_id
        self.start = float(start)
        self.end = float(end)
        self.audio_path = audio_path
        self.feature_path = feature_path
        self.extra = extra or {}

    def to_json(self) -> dict:
        payload = {
            "id": self.source_id,
            "start": self.start,
            "end": self.end,
        }
        if self.audio_path is not None:
            payload["audio"] = str(self.audio_path)
        if self.feature_path is not None:
            payload["features"] = str(self.feature_path)
        payload.update(self.extra)
        return payload


_CLIP_NAME = re.compile(
    r"^(?P<id>.+)_(?P<start>\d+(?:\.\d+)?)_(?P<end>\d+(?:\.\d+)?)(?:\.\w+)?$"
)


def parse_clip_name(name: str) -> tuple[str, float, float]:
    """Split an ``ID_start_end`` clip name into its parts.

    The last two underscore-separated numeric fields are start and end
    seconds; the id keeps everything before them and may itself contain
    underscores (the match is greedy on the id).
    """
    m = _CLIP_NAME.match(name)
    if m is None:
        raise ValidationError(f"clip name does not match ID_start_end: {name!r}")
    start, end = float(m.group("start")), float(m.group("end"))
    if start >= end:
        raise ValidationError(f"clip name has start >= end: {name!r}")
    return m.group("id"), start, end


def parse_manifest(path) -> list[ManifestEntry]:
    """Parse a JSON-lines manifest, one clip per line.

    Each line carries either explicit ``id``/``start``/``end`` fields or a
    ``name`` in the ID_start_end convention. Validation failures report the
    offending line number.
    """
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"invalid JSON: {exc}", line=lineno) from exc
            try:
                if "name" in payload and "id" not in payload:
                    source_id, start, end = parse_clip_name(payload["name"])
                else:
                    source_id = payload["id"]
                    start = float(payload["start"])
                    end = float(payload["end"])
                known = {"id", "start", "end", "audio", "features", "name"}
                entries.append(
                    ManifestEntry(
                        source_id,
                        start,
                        end,
                        audio_path=payload.get("audio"),
                        feature_path=payload.get("features"),
                        extra={k: v for k, v in payload.items() if k not in known},
                    )
                )
            except ValidationError as exc:
                raise ValidationError(str(exc), line=lineno) from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"bad manifest entry: {exc}", line=lineno) from exc
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w") as f:
        for entry in entries:
            f.write(json.dumps(entry.to_json()) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints: directory of tensor files + JSON manifest


def save_checkpoint(directory, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays plus metadata to a checkpoint directory.

    Array names may contain dots; they are flattened to file names. The
    manifest records names, shapes and the caller's metadata.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "foleyctl-checkpoint-1", "arrays": {}, "meta": meta or {}}
    used = set()
    for name, array in arrays.items():
        fname = name.replace("/", "_").replace(".", "_") + ".ftns"
        if fname in used:
            raise InvalidInput(f"array names collide after flattening: {name!r}")
        used.add(fname)
        write_tensor(directory / fname, np.asarray(array))
        manifest["arrays"][name] = {
            "file": fname,
            "shape": list(np.asarray(array).shape),
        }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(directory) -> tuple[dict, dict]:
    """Load a checkpoint directory back into (arrays, meta)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "foleyctl-checkpoint-1":
        raise FormatError(f"unknown checkpoint format in {manifest_path}")
    arrays = {}
    for name, info in manifest["arrays"].items():
        arr = read_tensor(directory / info["file"])
        if list(arr.shape) != info["shape"]:
            raise FormatError(
                f"checkpoint array {name} has shape {list(arr.shape)}, "
                f"manifest says {info['shape']}"
            )
        arrays[name] = arr
    return arrays, manifest.get("meta", {})


def params_digest(arrays: dict) -> str:
    """Stable SHA-256 over named float32 arrays, for frozen-weight checks."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return h.hexdigest()
