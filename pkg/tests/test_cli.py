"""Command-line surface: exit codes, run records, end-to-end workflows."""
import json

import numpy as np
import pytest

from foleyctl.cli import run_cli
from foleyctl.dsp import Waveform
from foleyctl.formats import read_envelope_json, read_quantized_json, write_wav
from foleyctl.pipeline import GenerationBundle


@pytest.fixture()
def data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FOLEYCTL_DATA_DIR", str(tmp_path))
    return tmp_path


def invoke(capsys, *argv) -> dict:
    assert run_cli(list(argv)) == 0
    return json.loads(capsys.readouterr().out)


def test_extract_rms_reference_framing(data_dir, capsys):
    # 10 s at 16 kHz with the default window/hop must give 1250 frames
    sr, seconds = 16000, 10
    t = np.arange(sr * seconds) / sr
    wav = data_dir / "in.wav"
    write_wav(wav, Waveform(0.5 * np.sin(2 * np.pi * 440 * t), sr))
    out = data_dir / "env.json"
    payload = invoke(capsys, "extract-rms", str(wav), "--window", "512",
                     "--hop", "128", "-o", str(out))
    assert payload["metrics"]["frames"] == 1250
    assert len(read_envelope_json(out)) == 1250


def test_extract_rms_exit_codes(data_dir, capsys):
    assert run_cli(["extract-rms", str(data_dir / "missing.wav"),
                    "-o", str(data_dir / "e.json")]) == 1
    wav = data_dir / "a.wav"
    write_wav(wav, Waveform(np.zeros(256), 4000))
    assert run_cli(["extract-rms", str(wav), "--window", "0",
                    "-o", str(data_dir / "e.json")]) == 2
    assert run_cli(["extract-rms", str(wav), "--bogus-flag"]) == 2
    assert run_cli(["no-such-command"]) == 2
    capsys.readouterr()


def test_quantize_and_smooth_round(data_dir, capsys):
    sr = 4000
    t = np.arange(sr) / sr
    wav = data_dir / "in.wav"
    write_wav(wav, Waveform(0.8 * np.sin(2 * np.pi * 220 * t) * t, sr))
    env = data_dir / "env.json"
    invoke(capsys, "extract-rms", str(wav), "-o", str(env), "--smooth", "1")
    q = data_dir / "q.json"
    payload = invoke(capsys, "quantize", str(env), "-o", str(q))
    quant = read_quantized_json(q)
    assert quant.num_classes == 64
    assert payload["metrics"]["occupied_classes"] >= 2

    smoothed = data_dir / "s.json"
    invoke(capsys, "smooth", str(env), "-o", str(smoothed), "--kernel", "1")
    assert np.array_equal(read_envelope_json(smoothed).values,
                          read_envelope_json(env).values)
    assert run_cli(["smooth", str(env), "-o", str(smoothed), "--kernel", "4"]) == 2
    capsys.readouterr()


def test_eval_identical_envelopes_score_zero(data_dir, capsys):
    sr = 4000
    wav = data_dir / "in.wav"
    write_wav(wav, Waveform(np.random.default_rng(0).normal(0, 0.1, 4000), sr))
    env = data_dir / "env.json"
    invoke(capsys, "extract-rms", str(wav), "-o", str(env))
    payload = invoke(capsys, "eval", "--e-l1", str(env), str(env))
    assert payload["metrics"]["e_l1"] == 0.0
    assert run_cli(["eval"]) == 2
    capsys.readouterr()


def test_eval_embedding_metrics(data_dir, capsys):
    from foleyctl.formats import write_tensor

    rng = np.random.default_rng(3)
    a = data_dir / "a.ftns"
    write_tensor(a, rng.normal(size=(40, 6)))
    payload = invoke(capsys, "eval", "--frechet", str(a), str(a),
                     "--cosine", str(a), str(a))
    assert payload["metrics"]["frechet"] == pytest.approx(0.0, abs=1e-6)
    assert payload["metrics"]["cosine"] == pytest.approx(1.0, abs=1e-9)


def test_toybench_gen_writes_dataset_and_record(data_dir, capsys):
    out = data_dir / "ds"
    payload = invoke(capsys, "toybench", "gen", "--out", str(out),
                     "--clips", "5", "--seed", "3")
    assert (out / "manifest.jsonl").exists()
    assert payload["metrics"]["clips"] == 5

    record_path = payload["run_record"]
    record = json.loads((data_dir / "runs").joinpath(
        record_path.split("/")[-1]).read_text())
    assert record["command"] == "toybench-gen"
    assert record["seed"] == 3
    assert "--clips" in record["argv"]
    assert set(record["versions"]) == {"foleyctl", "python", "numpy"}


def test_version_flag(capsys):
    assert run_cli(["--version"]) == 0
    assert capsys.readouterr().out.strip()


def test_serve_wires_the_service(data_dir, capsys, monkeypatch):
    import foleyctl.cli as cli_mod

    captured = {}

    def fake_runner(app, host, port):
        captured.update(app=app, host=host, port=port)

    monkeypatch.setattr(cli_mod, "_serve_runner", fake_runner)
    invoke(capsys, "serve", "--host", "0.0.0.0", "--port", "9000")
    assert captured["host"] == "0.0.0.0"
    assert captured["port"] == 9000
    assert captured["app"].title == "foleyctl service"


@pytest.mark.slow
def test_training_and_generation_workflow(data_dir, capsys):
    ds = data_dir / "ds"
    invoke(capsys, "toybench", "gen", "--out", str(ds), "--clips", "8",
           "--seed", "1")

    codec_bundle = data_dir / "codec-bundle"
    payload = invoke(
        capsys, "train-codec", "--dataset", str(ds), "-o", str(codec_bundle),
        "--steps", "25", "--batch-size", "4",
        "--latent-channels", "4", "--hidden-channels", "8",
        "--dit-layers", "2", "--dit-dim", "8", "--dit-heads", "2",
    )
    assert payload["metrics"]["codec"]["steps"] == 25
    # the codec trainer measures the corpus latent spread for the bundle
    scale = payload["metrics"]["latent_scale"]
    assert scale > 1.0

    trained = data_dir / "trained-bundle"
    payload = invoke(
        capsys, "train-controlnet", "--dataset", str(ds),
        "--bundle", str(codec_bundle), "-o", str(trained),
        "--base-steps", "4", "--steps", "4", "--batch-size", "4",
    )
    assert payload["metrics"]["branch"]["steps"] == 4
    assert GenerationBundle.load(trained).latent_scale == pytest.approx(scale)

    # reusing a bundle that already has a branch is refused
    assert run_cli(["train-controlnet", "--dataset", str(ds),
                    "--bundle", str(trained), "-o", str(data_dir / "x"),
                    "--steps", "1"]) == 2
    capsys.readouterr()

    env_ref = ds / "envelopes"
    env_file = sorted(env_ref.iterdir())[0]
    wav_a, wav_b = data_dir / "a.wav", data_dir / "b.wav"
    args = ["generate", "--bundle", str(trained), "--envelope", str(env_file),
            "--class", "1", "--steps", "4", "--seed", "7"]
    payload = invoke(capsys, *args, "-o", str(wav_a),
                     "--save-envelope", str(data_dir / "measured.json"))
    assert "e_l1_vs_target" in payload["metrics"]
    invoke(capsys, *args, "-o", str(wav_b))
    assert wav_a.read_bytes() == wav_b.read_bytes()
    assert len(read_envelope_json(data_dir / "measured.json")) == 250

    pred = data_dir / "pred"
    payload = invoke(
        capsys, "train-predictor", "--dataset", str(ds), "-o", str(pred),
        "--epochs", "2", "--batch-size", "4", "--seed", "0",
    )
    assert payload["metrics"]["epochs"] == 2

    feats = sorted((ds / "features").iterdir())[0]
    env_out = data_dir / "pred-env.json"
    q_out = data_dir / "pred-q.json"
    payload = invoke(capsys, "predict-envelope", str(feats), "--model",
                     str(pred), "-o", str(env_out), "--quantized", str(q_out))
    assert payload["metrics"]["frames"] == 250
    assert read_quantized_json(q_out).classes.shape == (250,)
