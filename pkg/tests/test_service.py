"""HTTP surface: sessions, revisions, jobs, artifacts, error codes."""
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from foleyctl.dsp import RmsConfig, Waveform, compute_rms
from foleyctl.formats import write_tensor, write_wav
from foleyctl.pipeline import save_predictor
from foleyctl.predictor import EnvelopePredictor, PredictorConfig
from foleyctl.service import create_app

from test_pipeline import tiny_bundle

SR = 4000


def wav_bytes(tmp_path, samples, name="clip.wav") -> bytes:
    path = tmp_path / name
    write_wav(path, Waveform(samples, SR))
    return path.read_bytes()


def make_client(tmp_path, **kwargs) -> TestClient:
    app = create_app(tmp_path / "svc", **kwargs)
    return TestClient(app)


def create_session(client, values=None) -> str:
    if values is None:
        values = np.linspace(0, 0.8, 63).tolist()
    r = client.post(
        "/v1/sessions",
        json={"envelope": {"values": values, "hop": 32,
                           "source_sample_rate": SR}},
    )
    assert r.status_code == 201, r.text
    return r.json()["id"]


def wait_job(client, jid, timeout=60.0) -> dict:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        r = client.get(f"/v1/jobs/{jid}")
        assert r.status_code == 200
        payload = r.json()
        if payload["status"] in ("done", "failed"):
            return payload
        time.sleep(0.02)
    raise AssertionError("job did not finish in time")


def test_extract_endpoint_matches_direct_measurement(tmp_path):
    client = make_client(tmp_path)
    rng = np.random.default_rng(0)
    samples = 0.4 * rng.normal(size=4000).clip(-1, 1)
    r = client.post(
        "/v1/envelopes:extract?window=128&hop=32&smooth=1",
        content=wav_bytes(tmp_path, samples),
    )
    assert r.status_code == 200
    payload = r.json()
    direct = compute_rms(Waveform(samples, SR),
                         RmsConfig(window=128, hop=32, smoothing_kernel=1))
    # the upload ran through 32-bit WAV encoding, direct did not
    assert np.allclose(payload["values"], direct.values, atol=1e-6)
    assert payload["hop"] == 32
    assert payload["source_sample_rate"] == SR


def test_extract_rejects_garbage_and_oversize(tmp_path):
    client = make_client(tmp_path, max_body=1024)
    r = client.post("/v1/envelopes:extract", content=b"not a wav")
    assert r.status_code == 422
    r = client.post("/v1/envelopes:extract", content=b"\0" * 2048)
    assert r.status_code == 413


def test_predict_endpoint(tmp_path):
    cfg = PredictorConfig(feature_dim=6, conv_channels=(8, 8, 8),
                          upsample_sizes=(10, 20, 25), lstm_hidden=8)
    model = EnvelopePredictor(cfg, np.random.default_rng(1)).eval()
    rms = RmsConfig(window=128, hop=32, smoothing_kernel=1)
    save_predictor(tmp_path / "pred", model, rms)
    client = make_client(tmp_path, predictor_path=tmp_path / "pred")

    feats = tmp_path / "f.ftns"
    write_tensor(feats, np.random.default_rng(2).normal(size=(12, 6)))
    r = client.post("/v1/envelopes:predict", content=feats.read_bytes())
    assert r.status_code == 200
    assert len(r.json()["values"]) == 25

    # wrong feature width is the caller's error
    write_tensor(feats, np.zeros((12, 3)))
    r = client.post("/v1/envelopes:predict", content=feats.read_bytes())
    assert r.status_code == 422


def test_predict_without_checkpoint_conflicts(tmp_path):
    client = make_client(tmp_path)
    r = client.post("/v1/envelopes:predict", content=b"\0" * 16)
    assert r.status_code == 409


def test_session_lifecycle_and_revisions(tmp_path):
    client = make_client(tmp_path)
    sid = create_session(client, values=[0.0, 0.5, 1.0])

    r = client.get(f"/v1/sessions/{sid}/envelope")
    assert r.status_code == 200
    assert r.json()["values"] == [0.0, 0.5, 1.0]
    assert r.json()["revision"] == 1

    r = client.put(f"/v1/sessions/{sid}/envelope",
                   json={"values": [0.1, 0.2, 0.3], "hop": 32,
                         "source_sample_rate": SR})
    assert r.status_code == 200
    assert r.json()["revision"] == 2

    # revision history stays addressable
    assert client.get(f"/v1/sessions/{sid}/envelope?rev=1").json()["values"] == [0.0, 0.5, 1.0]
    assert client.get(f"/v1/sessions/{sid}/envelope?rev=2").json()["values"] == [0.1, 0.2, 0.3]
    assert client.get(f"/v1/sessions/{sid}/envelope?rev=3").status_code == 404


def test_envelope_validation_reports_offending_index(tmp_path):
    client = make_client(tmp_path)
    sid = create_session(client)
    r = client.put(f"/v1/sessions/{sid}/envelope",
                   json={"values": [0.2, 1.5, 0.3]})
    assert r.status_code == 422
    assert r.json()["detail"]["index"] == 1
    r = client.post("/v1/sessions",
                    json={"envelope": {"values": [-0.1]}})
    assert r.status_code == 422
    assert r.json()["detail"]["index"] == 0


def test_unknown_ids_are_404(tmp_path):
    client = make_client(tmp_path)
    assert client.get("/v1/sessions/nope/envelope").status_code == 404
    assert client.get("/v1/jobs/nope").status_code == 404
    assert client.put("/v1/sessions/nope/envelope",
                      json={"values": [0.5]}).status_code == 404
    sid = create_session(client)
    assert client.get(f"/v1/sessions/{sid}/audio?rev=1").status_code == 404


def test_generate_without_bundle_conflicts(tmp_path):
    client = make_client(tmp_path)
    sid = create_session(client)
    r = client.post(f"/v1/sessions/{sid}/generate", json={"seed": 1})
    assert r.status_code == 409


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    tiny_bundle().save(root / "ckpt")
    return root / "ckpt"


def test_generation_job_flow(tmp_path, bundle_dir):
    client = make_client(tmp_path, bundle_path=bundle_dir)
    sid = create_session(client)

    params = {"class": 1, "steps": 3, "seed": 5}
    r = client.post(f"/v1/sessions/{sid}/generate", json=params)
    assert r.status_code == 202
    job = wait_job(client, r.json()["job"])
    assert job["status"] == "done", job
    assert job["e_l1_vs_target"] >= 0.0

    r = client.get(f"/v1/sessions/{sid}/audio?rev=1")
    assert r.status_code == 200
    assert r.headers["content-type"] == "audio/wav"
    first = r.content

    measured = client.get(f"/v1/sessions/{sid}/measured-envelope?rev=1")
    assert measured.status_code == 200
    assert len(measured.json()["values"]) > 0

    # same revision, same params: byte-identical audio
    r = client.post(f"/v1/sessions/{sid}/generate", json=params)
    wait_job(client, r.json()["job"])
    again = client.get(f"/v1/sessions/{sid}/audio?rev=1").content
    assert again == first

    # different seed on a fresh revision gives different audio
    client.put(f"/v1/sessions/{sid}/envelope",
               json={"values": np.linspace(0, 0.6, 63).tolist(), "hop": 32,
                     "source_sample_rate": SR})
    r = client.post(f"/v1/sessions/{sid}/generate",
                    json={"class": 1, "steps": 3, "seed": 6})
    wait_job(client, r.json()["job"])
    other = client.get(f"/v1/sessions/{sid}/audio?rev=2").content
    assert other != first
    # the old revision's artifact is untouched
    assert client.get(f"/v1/sessions/{sid}/audio?rev=1").content == first


def test_concurrent_generation_is_refused(tmp_path, bundle_dir):
    client = make_client(tmp_path, bundle_path=bundle_dir)
    sid = create_session(client)

    class StuckExecutor:
        def submit(self, *a, **k):
            return None

    client.app.state.executor = StuckExecutor()
    r = client.post(f"/v1/sessions/{sid}/generate", json={"seed": 1})
    assert r.status_code == 202
    jid = r.json()["job"]
    assert client.get(f"/v1/jobs/{jid}").json()["status"] == "pending"
    r = client.post(f"/v1/sessions/{sid}/generate", json={"seed": 2})
    assert r.status_code == 409


def test_failed_job_reports_error(tmp_path, bundle_dir):
    client = make_client(tmp_path, bundle_path=bundle_dir)
    sid = create_session(client)
    r = client.post(f"/v1/sessions/{sid}/generate",
                    json={"embedding_ref": "missing.ftns", "seed": 0})
    assert r.status_code == 202
    job = wait_job(client, r.json()["job"])
    assert job["status"] == "failed"
    assert "missing.ftns" in job["error"]

    # a failed job releases the session for the next attempt
    r = client.post(f"/v1/sessions/{sid}/generate",
                    json={"class": 0, "steps": 2, "seed": 0})
    assert r.status_code == 202
    assert wait_job(client, r.json()["job"])["status"] == "done"


def test_generate_rejects_conflicting_semantics(tmp_path, bundle_dir):
    client = make_client(tmp_path, bundle_path=bundle_dir)
    sid = create_session(client)
    r = client.post(f"/v1/sessions/{sid}/generate",
                    json={"class": 0, "embedding_ref": "x.ftns"})
    assert r.status_code == 422


def test_state_survives_restart(tmp_path, bundle_dir):
    client = make_client(tmp_path, bundle_path=bundle_dir)
    sid = create_session(client, values=[0.3, 0.4])
    client.put(f"/v1/sessions/{sid}/envelope",
               json={"values": [0.5, 0.6], "hop": 32, "source_sample_rate": SR})
    r = client.post(f"/v1/sessions/{sid}/generate",
                    json={"class": 2, "steps": 2, "seed": 9})
    jid = r.json()["job"]
    wait_job(client, jid)

    reborn = make_client(tmp_path, bundle_path=bundle_dir)
    assert reborn.get(f"/v1/sessions/{sid}/envelope").json()["values"] == [0.5, 0.6]
    assert reborn.get(f"/v1/jobs/{jid}").json()["status"] == "done"
    assert reborn.get(f"/v1/sessions/{sid}/audio?rev=2").status_code == 200
