"""File format tests: WAV parsing, tensor files, manifests, checkpoints."""
import json
import struct

import numpy as np
import pytest

from foleyctl.dsp import Envelope, QuantizedEnvelope, Waveform
from foleyctl.errors import FormatError, InvalidInput, Unsupported, ValidationError
from foleyctl.formats import (
    ManifestEntry,
    load_checkpoint,
    params_digest,
    parse_clip_name,
    parse_manifest,
    read_envelope_json,
    read_quantized_json,
    read_tensor,
    read_wav,
    save_checkpoint,
    write_envelope_json,
    write_manifest,
    write_quantized_json,
    write_tensor,
    write_wav,
)


# ---------------------------------------------------------------------------
# WAV


def test_wav_float32_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    samples = rng.uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
    w = Waveform(samples, 16000)
    path = tmp_path / "a.wav"
    write_wav(path, w, bit_depth=32)
    back = read_wav(path)
    assert back.sample_rate == 16000
    np.testing.assert_array_equal(back.samples, w.samples)


def test_wav_pcm16_uses_32768_scale(tmp_path):
    ints = np.array([-32768, -1, 0, 1, 16384, 32767], dtype=np.int16)
    payload = ints.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, 8000, 16000, 2, 16, b"data", len(payload),
    )
    path = tmp_path / "pcm.wav"
    path.write_bytes(header + payload)
    w = read_wav(path)
    np.testing.assert_array_equal(w.samples[0], ints.astype(np.float64) / 32768.0)


def test_wav_pcm16_write_read_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    w = Waveform(rng.uniform(-0.9, 0.9, 500), 22050)
    path = tmp_path / "b.wav"
    write_wav(path, w, bit_depth=16)
    back = read_wav(path)
    assert np.abs(back.samples - w.samples).max() <= 0.5 / 32768.0 + 1e-12


def test_wav_pcm16_write_clips_overrange(tmp_path):
    w = Waveform(np.array([1.5, -1.5, 1.0]), 8000)
    path = tmp_path / "clip.wav"
    write_wav(path, w, bit_depth=16)
    back = read_wav(path)
    assert back.samples[0, 0] == 32767 / 32768.0
    assert back.samples[0, 1] == -1.0


def test_wav_stereo_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    w = Waveform(rng.uniform(-1, 1, (2, 300)), 44100)
    path = tmp_path / "st.wav"
    write_wav(path, w)
    back = read_wav(path)
    assert back.channels == 2
    np.testing.assert_allclose(back.samples, w.samples, atol=1e-7)


def test_wav_skips_unknown_chunks_and_pad_bytes(tmp_path):
    data = np.zeros(4, dtype="<f4").tobytes()
    junk = b"JUNK" + struct.pack("<I", 3) + b"abc" + b"\x00"  # odd size + pad
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, 8000, 32000, 4, 32)
    body = junk + fmt + b"data" + struct.pack("<I", len(data)) + data
    raw = b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body
    path = tmp_path / "j.wav"
    path.write_bytes(raw)
    w = read_wav(path)
    assert w.num_samples == 4


def test_wav_ignores_trailing_garbage(tmp_path):
    w = Waveform(np.zeros(8), 8000)
    path = tmp_path / "t.wav"
    write_wav(path, w)
    path.write_bytes(path.read_bytes() + b"\xde\xad\xbe\xef")
    assert read_wav(path).num_samples == 8


def test_wav_error_offsets():
    import tempfile, pathlib
    with tempfile.TemporaryDirectory() as d:
        p = pathlib.Path(d) / "bad.wav"
        p.write_bytes(b"RIF")
        with pytest.raises(FormatError) as exc:
            read_wav(p)
        assert exc.value.offset == 0
        p.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FormatError):
            read_wav(p)
        p.write_bytes(b"RIFF" + struct.pack("<I", 100) + b"AIFF" + b"\x00" * 20)
        with pytest.raises(FormatError) as exc:
            read_wav(p)
        assert exc.value.offset == 8


def test_wav_chunk_overrun_reports_offset(tmp_path):
    raw = b"RIFF" + struct.pack("<I", 40) + b"WAVE"
    raw += b"fmt " + struct.pack("<I", 9999) + b"\x00" * 16
    path = tmp_path / "o.wav"
    path.write_bytes(raw)
    with pytest.raises(FormatError) as exc:
        read_wav(path)
    assert "9999" in str(exc.value)


def test_wav_unsupported_codec(tmp_path):
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000, 8000, 1, 8)  # 8-bit PCM
    body = fmt + b"data" + struct.pack("<I", 4) + b"\x00" * 4
    raw = b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body
    path = tmp_path / "u.wav"
    path.write_bytes(raw)
    with pytest.raises(Unsupported):
        read_wav(path)


def test_wav_missing_data_chunk(tmp_path):
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000, 16000, 2, 16)
    raw = b"RIFF" + struct.pack("<I", 4 + len(fmt)) + b"WAVE" + fmt
    path = tmp_path / "nd.wav"
    path.write_bytes(raw)
    with pytest.raises(FormatError):
        read_wav(path)


# ---------------------------------------------------------------------------
# tensor files


@pytest.mark.parametrize("shape", [(), (5,), (3, 4), (2, 3, 4, 5)])
def test_tensor_round_trip(tmp_path, shape):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal(shape).astype(np.float32)
    path = tmp_path / "t.ftns"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.shape == arr.shape and back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_tensor_bad_magic(tmp_path):
    path = tmp_path / "bad.ftns"
    path.write_bytes(b"NOPE!" + b"\x00" * 10)
    with pytest.raises(FormatError):
        read_tensor(path)


def test_tensor_unknown_dtype(tmp_path):
    path = tmp_path / "d.ftns"
    path.write_bytes(b"FTNS1" + struct.pack("<BB", 9, 0))
    with pytest.raises(Unsupported):
        read_tensor(path)


def test_tensor_payload_mismatch_message(tmp_path):
    path = tmp_path / "short.ftns"
    path.write_bytes(b"FTNS1" + struct.pack("<BB", 1, 1) + struct.pack("<Q", 10) + b"\x00" * 12)
    with pytest.raises(FormatError) as exc:
        read_tensor(path)
    assert "expected 40 bytes, got 12" in str(exc.value)


def test_tensor_rejects_absurd_dims(tmp_path):
    path = tmp_path / "huge.ftns"
    path.write_bytes(
        b"FTNS1" + struct.pack("<BB", 1, 2) + struct.pack("<QQ", 1 << 30, 1 << 30)
    )
    with pytest.raises(FormatError):
        read_tensor(path)


def test_tensor_truncated_dims(tmp_path):
    path = tmp_path / "trunc.ftns"
    path.write_bytes(b"FTNS1" + struct.pack("<BB", 1, 3) + b"\x00" * 4)
    with pytest.raises(FormatError):
        read_tensor(path)


def test_tensor_casts_float64_input(tmp_path):
    path = tmp_path / "c.ftns"
    write_tensor(path, np.array([1.0, 2.5], dtype=np.float64))
    back = read_tensor(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, [1.0, 2.5])


# ---------------------------------------------------------------------------
# envelope JSON


def test_envelope_json_round_trip_exact(tmp_path):
    rng = np.random.default_rng(3)
    e = Envelope(rng.uniform(0, 1, 100), hop=128, source_sample_rate=16000)
    path = tmp_path / "e.json"
    write_envelope_json(path, e)
    back = read_envelope_json(path)
    np.testing.assert_array_equal(back.values, e.values)
    assert back.hop == 128 and back.source_sample_rate == 16000


def test_quantized_json_round_trip(tmp_path):
    q = QuantizedEnvelope(np.array([0, 5, 63]), 64, hop=128, source_sample_rate=16000)
    path = tmp_path / "q.json"
    write_quantized_json(path, q)
    back = read_quantized_json(path)
    np.testing.assert_array_equal(back.classes, q.classes)
    assert back.num_classes == 64 and back.hop == 128


def test_envelope_json_rejects_garbage(tmp_path):
    path = tmp_path / "g.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        read_envelope_json(path)
    path.write_text('{"values": [0.1]}')
    with pytest.raises(FormatError):
        read_envelope_json(path)


# ---------------------------------------------------------------------------
# clip names and manifests


def test_parse_clip_name_basic():
    assert parse_clip_name("abc123_4.5_12.0") == ("abc123", 4.5, 12.0)
    assert parse_clip_name("abc123_4.5_12.0.wav") == ("abc123", 4.5, 12.0)


def test_parse_clip_name_id_keeps_underscores():
    # the id is greedy: only the last two numeric fields are the span
    assert parse_clip_name("x_1_2_3") == ("x_1", 2.0, 3.0)
    assert parse_clip_name("dog_bark_0_10") == ("dog_bark", 0.0, 10.0)


def test_parse_clip_name_rejects_bad():
    with pytest.raises(ValidationError):
        parse_clip_name("no-span-here")
    with pytest.raises(ValidationError):
        parse_clip_name("clip_9_3")  # start after end


def test_manifest_entry_validates_span():
    with pytest.raises(ValidationError):
        ManifestEntry("a", 5.0, 5.0)
    with pytest.raises(ValidationError):
        ManifestEntry("a", -1.0, 5.0)


def test_manifest_round_trip(tmp_path):
    entries = [
        ManifestEntry("a", 0.0, 10.0, audio_path="a.wav", extra={"label": 2}),
        ManifestEntry("b_c", 1.5, 2.5, feature_path="b.ftns"),
    ]
    path = tmp_path / "m.jsonl"
    write_manifest(path, entries)
    back = parse_manifest(path)
    assert len(back) == 2
    assert back[0].source_id == "a" and back[0].audio_path == "a.wav"
    assert back[0].extra == {"label": 2}
    assert back[1].source_id == "b_c" and back[1].feature_path == "b.ftns"


def test_manifest_accepts_name_convention(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"name": "clip_a_2_8.wav", "audio": "x.wav"}\n')
    entries = parse_manifest(path)
    assert entries[0].source_id == "clip_a"
    assert entries[0].start == 2.0 and entries[0].end == 8.0


def test_manifest_skips_blank_lines(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('\n{"id": "a", "start": 0, "end": 1}\n\n')
    assert len(parse_manifest(path)) == 1


def test_manifest_reports_line_numbers(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"id": "a", "start": 0, "end": 1}\nnot json\n')
    with pytest.raises(ValidationError) as exc:
        parse_manifest(path)
    assert exc.value.line == 2

    path.write_text('{"id": "a", "start": 3, "end": 1}\n')
    with pytest.raises(ValidationError) as exc:
        parse_manifest(path)
    assert exc.value.line == 1

    path.write_text('{"start": 0, "end": 1}\n')
    with pytest.raises(ValidationError) as exc:
        parse_manifest(path)
    assert exc.value.line == 1


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {
        "encoder.w": rng.standard_normal((4, 5)).astype(np.float32),
        "encoder.b": rng.standard_normal(5).astype(np.float32),
        "head.w": rng.standard_normal((5, 2)).astype(np.float32),
    }
    ckpt = tmp_path / "ckpt"
    save_checkpoint(ckpt, arrays, meta={"step": 7, "config": {"dim": 5}})
    back, meta = load_checkpoint(ckpt)
    assert meta == {"step": 7, "config": {"dim": 5}}
    assert set(back) == set(arrays)
    for name in arrays:
        np.testing.assert_array_equal(back[name], arrays[name])


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "nope")


def test_checkpoint_detects_shape_tamper(tmp_path):
    ckpt = tmp_path / "ckpt"
    save_checkpoint(ckpt, {"w": np.zeros((2, 2), dtype=np.float32)})
    manifest = json.loads((ckpt / "manifest.json").read_text())
    manifest["arrays"]["w"]["shape"] = [4]
    (ckpt / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        load_checkpoint(ckpt)


def test_checkpoint_name_collision_rejected(tmp_path):
    with pytest.raises(InvalidInput):
        save_checkpoint(
            tmp_path / "c",
            {"a.b": np.zeros(1, dtype=np.float32), "a_b": np.zeros(1, dtype=np.float32)},
        )


def test_params_digest_order_independent_and_sensitive():
    a = {"x": np.ones(3, dtype=np.float32), "y": np.zeros(2, dtype=np.float32)}
    b = {"y": np.zeros(2, dtype=np.float32), "x": np.ones(3, dtype=np.float32)}
    assert params_digest(a) == params_digest(b)
    c = {"x": np.ones(3, dtype=np.float32), "y": np.full(2, 1e-7, dtype=np.float32)}
    assert params_digest(a) != params_digest(c)
