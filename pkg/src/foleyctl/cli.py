"""Command-line operator interface.

One subcommand per pipeline stage: envelope measurement and shaping,
predictor and generator training, sampling, metric evaluation, synthetic
dataset generation and the HTTP service. Every run writes a JSON run record
(command, arguments, seed, library versions, metrics) under
``$FOLEYCTL_DATA_DIR/runs`` so any result can be reproduced from its
record alone.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .codec import CodecConfig, train_codec
from .controlnet import attach_controlnet, train_controlnet, train_dit
from .diffusion import SamplerConfig
from .dit import DiTConfig, DiTModel
from .dsp import (
    Envelope,
    RmsConfig,
    Waveform,
    compute_rms,
    mu_law_compress,
    normalize_waveform,
    smooth_envelope,
)
from .errors import FoleyError, InvalidInput
from .formats import (
    read_envelope_json,
    read_quantized_json,
    read_tensor,
    read_wav,
    write_envelope_json,
    write_quantized_json,
    write_wav,
)
from .metrics import EmbeddingSet, acc_at_k, cosine_score, e_l1, frechet_distance
from .pipeline import (
    GenerationBundle,
    GenerationRequest,
    control_latent_for,
    latent_scale_for,
    load_predictor,
    run_generation,
    save_predictor,
)
from .predictor import FeatureSequence, PredictorConfig, predict_envelope, train_predictor
from .toybench import ToySpec, load_dataset, toy_rms_config, write_dataset


def _data_dir() -> Path:
    return Path(os.environ.get("FOLEYCTL_DATA_DIR") or ".")


def _loss_summary(losses: list) -> dict:
    """First/last 100-step window means, the training-curve health check."""
    if not losses:
        return {"steps": 0}
    arr = np.asarray(losses, dtype=np.float64)
    w = min(100, arr.size)
    return {
        "steps": int(arr.size),
        "first_window_mean": float(arr[:w].mean()),
        "last_window_mean": float(arr[-w:].mean()),
    }


# ---------------------------------------------------------------------------
# subcommand implementations; each returns (outputs, metrics)


def _cmd_extract_rms(ns):
    w = read_wav(ns.input)
    if ns.normalize:
        w = normalize_waveform(w)
    if w.channels > 1:
        w = Waveform(w.mono(), w.sample_rate)
    cfg = RmsConfig(window=ns.window, hop=ns.hop, smoothing_kernel=ns.smooth)
    env = smooth_envelope(compute_rms(w, cfg), cfg.smoothing_kernel)
    write_envelope_json(ns.output, env)
    return {"envelope": ns.output}, {
        "frames": len(env),
        "peak": float(env.values.max()),
    }


def _cmd_quantize(ns):
    env = read_envelope_json(ns.input)
    cfg = RmsConfig(num_classes=ns.classes, mu=ns.mu)
    q = mu_law_compress(env, cfg)
    write_quantized_json(ns.output, q)
    return {"quantized": ns.output}, {
        "frames": int(q.classes.size),
        "classes": cfg.num_classes,
        "occupied_classes": int(np.unique(q.classes).size),
    }


def _cmd_smooth(ns):
    env = smooth_envelope(read_envelope_json(ns.input), ns.kernel)
    write_envelope_json(ns.output, env)
    return {"envelope": ns.output}, {"frames": len(env), "kernel": ns.kernel}


def _cmd_predict_envelope(ns):
    model, rms = load_predictor(ns.model)
    feats = FeatureSequence(read_tensor(ns.input))
    quant, env = predict_envelope(model, feats, rms)
    write_envelope_json(ns.output, env)
    outputs = {"envelope": ns.output}
    if ns.quantized:
        write_quantized_json(ns.quantized, quant)
        outputs["quantized"] = ns.quantized
    return outputs, {"frames": len(env), "peak": float(env.values.max())}


def _cmd_train_predictor(ns):
    ds = load_dataset(ns.dataset)
    rms = toy_rms_config()
    if ns.config:
        config = PredictorConfig.from_json(json.loads(Path(ns.config).read_text()))
    else:
        config = PredictorConfig(feature_dim=ds.features.shape[2])
    if config.rms_frames != ds.envelopes.shape[1]:
        raise InvalidInput(
            f"predictor emits {config.rms_frames} frames but dataset envelopes "
            f"have {ds.envelopes.shape[1]}"
        )
    model, history = train_predictor(
        ds.features,
        ds.envelopes,
        config,
        rms,
        np.random.default_rng(ns.seed),
        epochs=ns.epochs,
        batch_size=ns.batch_size,
        lr=ns.lr,
        val_fraction=ns.val_fraction,
    )
    save_predictor(ns.output, model, rms)
    best = min(history, key=lambda h: h["val_e_l1"])
    return {"checkpoint": ns.output}, {
        "epochs": len(history),
        "best_val_e_l1": best["val_e_l1"],
        "best_val_acc": best["val_acc"],
        "final_train_loss": history[-1]["train_loss"],
    }


def _cmd_train_codec(ns):
    ds = load_dataset(ns.dataset)
    rng = np.random.default_rng(ns.seed)
    codec_cfg = CodecConfig(
        downsample_factor=ns.downsample,
        latent_channels=ns.latent_channels,
        hidden_channels=ns.hidden_channels,
    )
    codec, losses = train_codec(
        ds.waveforms, rng, codec_cfg, steps=ns.steps, batch_size=ns.batch_size,
        lr=ns.lr,
    )
    corpus_latents = codec.encode_batch(
        ds.waveforms[:, None, :].astype(np.float64)
    ).data
    base = DiTModel(
        DiTConfig(
            layers=ns.dit_layers,
            model_dim=ns.dit_dim,
            heads=ns.dit_heads,
            depth_factor=ns.depth_factor,
            cross_attn_dim=ds.embeddings.shape[1],
            latent_channels=codec_cfg.latent_channels,
        ),
        rng,
    )
    bundle = GenerationBundle(
        codec=codec,
        base=base,
        branch=None,
        embeddings=ds.embeddings,
        sampler=SamplerConfig(),
        sample_rate=ds.spec.sample_rate,
        rms=toy_rms_config(),
        step=0,
        latent_scale=latent_scale_for(corpus_latents),
    )
    bundle.save(ns.output)
    return {"bundle": ns.output}, {
        "codec": _loss_summary(losses),
        "latent_scale": bundle.latent_scale,
    }


def _dataset_tensors(bundle: GenerationBundle, ds):
    """Latents, control latents and per-clip semantic tokens for training.

    Both latent kinds are multiplied by the bundle's latent scale so the
    noise predictor trains in the same space it will later sample in.
    """
    sr = ds.spec.sample_rate
    num_samples = ds.waveforms.shape[1]
    latents, controls = [], []
    for wave, env in zip(ds.waveforms, ds.envelopes):
        latents.append(bundle.codec.encode(Waveform(wave.astype(np.float64), sr)))
        controls.append(
            control_latent_for(
                bundle.codec,
                Envelope(env, toy_rms_config().hop, sr),
                num_samples,
                sr,
            )
        )
    semantic = ds.embeddings[ds.timbres][:, None, :]
    return (
        np.stack(latents) * bundle.latent_scale,
        np.stack(controls) * bundle.latent_scale,
        semantic,
    )


def _cmd_train_controlnet(ns):
    bundle = GenerationBundle.load(ns.bundle)
    if bundle.branch is not None:
        raise InvalidInput(
            "bundle already carries a control branch; start from a codec-only "
            "bundle"
        )
    ds = load_dataset(ns.dataset)
    rng = np.random.default_rng(ns.seed)
    schedule = bundle.sampler.schedule()
    latents, controls, semantic = _dataset_tensors(bundle, ds)
    seconds = ds.spec.clip_seconds

    metrics = {}
    if ns.base_steps:
        base_losses = train_dit(
            bundle.base, latents, semantic, schedule, rng, ns.base_steps,
            batch_size=ns.batch_size, lr=ns.lr, weight_decay=ns.weight_decay,
            seconds_total=seconds, cfg_dropout=ns.cfg_dropout,
        )
        metrics["base"] = _loss_summary(base_losses)
    branch = attach_controlnet(bundle.base, rng)
    branch_losses = train_controlnet(
        bundle.base, branch, latents, controls, semantic, schedule, rng,
        ns.steps, batch_size=ns.batch_size, lr=ns.lr,
        weight_decay=ns.weight_decay, seconds_total=seconds,
        cfg_dropout=ns.cfg_dropout,
    )
    metrics["branch"] = _loss_summary(branch_losses)
    trained = GenerationBundle(
        codec=bundle.codec,
        base=bundle.base,
        branch=branch,
        embeddings=bundle.embeddings,
        sampler=bundle.sampler,
        sample_rate=bundle.sample_rate,
        rms=bundle.rms,
        step=bundle.step + ns.base_steps + ns.steps,
        latent_scale=bundle.latent_scale,
    )
    trained.save(ns.output)
    return {"bundle": ns.output}, metrics


def _cmd_generate(ns):
    bundle = GenerationBundle.load(ns.bundle)
    request = GenerationRequest(
        envelope_ref=ns.envelope,
        semantic_label=ns.semantic_label,
        embedding_ref=ns.embedding,
        seconds_total=ns.seconds_total,
        steps=ns.steps,
        cfg_scale=ns.cfg,
        seed=ns.seed,
    )
    result = run_generation(bundle, request, ".")
    write_wav(ns.output, result.waveform, bit_depth=32)
    outputs = {"audio": ns.output}
    if ns.save_envelope:
        write_envelope_json(ns.save_envelope, result.measured)
        outputs["measured_envelope"] = ns.save_envelope
    metrics = {
        "samples": result.waveform.num_samples,
        "peak": float(np.abs(result.waveform.samples).max()),
    }
    if result.e_l1_vs_target is not None:
        metrics["e_l1_vs_target"] = result.e_l1_vs_target
    return outputs, metrics


def _cmd_eval(ns):
    metrics = {}
    if ns.e_l1:
        a, b = (read_envelope_json(p) for p in ns.e_l1)
        metrics["e_l1"] = e_l1(a, b)
    if ns.acc_k:
        k_str, pred_path, gt_path = ns.acc_k
        k = int(k_str)
        metrics[f"acc@{k}"] = acc_at_k(
            read_quantized_json(pred_path), read_quantized_json(gt_path), k
        )
    if ns.frechet:
        a, b = (EmbeddingSet(read_tensor(p)) for p in ns.frechet)
        metrics["frechet"] = frechet_distance(a, b)
    if ns.cosine:
        a, b = (EmbeddingSet(read_tensor(p)) for p in ns.cosine)
        metrics["cosine"] = cosine_score(a, b)
    if not metrics:
        raise InvalidInput(
            "eval needs at least one of --e-l1/--acc-k/--frechet/--cosine"
        )
    return {}, metrics


def _cmd_toybench_gen(ns):
    spec = ToySpec(
        sample_rate=ns.sample_rate,
        clip_seconds=ns.clip_seconds,
        hard_mode=ns.hard,
        seed=ns.seed,
    )
    manifest = write_dataset(spec, ns.clips, ns.out)
    return {"dataset": ns.out, "manifest": str(manifest)}, {
        "clips": ns.clips,
        "spec": spec.to_json(),
    }


def _serve_runner(app, host: str, port: int):  # replaced in tests
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="warning")


def _cmd_serve(ns):
    from .service import create_app

    app = create_app(
        data_dir=_data_dir() / "service",
        bundle_path=ns.bundle,
        predictor_path=ns.predictor,
    )
    _serve_runner(app, ns.host, ns.port)
    return {"host": ns.host, "port": ns.port}, {}


# ---------------------------------------------------------------------------
# parser


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="foleyctl",
        description="Envelope-controlled sound effect tooling.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-rms", help="measure an RMS envelope from a WAV")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--hop", type=int, default=128)
    p.add_argument("--smooth", type=int, default=15,
                   help="moving-average width, odd; 1 disables")
    p.add_argument("--normalize", action="store_true",
                   help="peak-normalize before measuring")
    p.set_defaults(func=_cmd_extract_rms)

    p = sub.add_parser("quantize", help="mu-law quantize an envelope")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--classes", type=int, default=64)
    p.add_argument("--mu", type=float, default=None,
                   help="compression strength; default classes - 1")
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("smooth", help="moving-average filter an envelope")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--kernel", type=int, default=15)
    p.set_defaults(func=_cmd_smooth)

    p = sub.add_parser("predict-envelope",
                       help="infer an envelope from conditioning features")
    p.add_argument("input", help="feature tensor file")
    p.add_argument("--model", required=True, help="predictor checkpoint dir")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--quantized", help="also write the class sequence here")
    p.set_defaults(func=_cmd_predict_envelope)

    p = sub.add_parser("train-predictor",
                       help="train the feature-to-envelope predictor")
    p.add_argument("--dataset", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--config", help="JSON file overriding the model config")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_predictor)

    p = sub.add_parser("train-codec",
                       help="train the audio codec; emits a generation bundle")
    p.add_argument("--dataset", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--downsample", type=int, default=16)
    p.add_argument("--latent-channels", type=int, default=8)
    p.add_argument("--hidden-channels", type=int, default=16)
    p.add_argument("--dit-layers", type=int, default=6)
    p.add_argument("--dit-dim", type=int, default=64)
    p.add_argument("--dit-heads", type=int, default=4)
    p.add_argument("--depth-factor", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_codec)

    p = sub.add_parser("train-controlnet",
                       help="pretrain the base and train the control branch")
    p.add_argument("--dataset", required=True)
    p.add_argument("--bundle", required=True, help="codec bundle to start from")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--base-steps", type=int, default=300,
                   help="base pretraining steps before the branch")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--cfg-dropout", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_controlnet)

    p = sub.add_parser("generate", help="sample audio from a trained bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--envelope", help="conditioning envelope JSON")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--class", dest="semantic_label", type=int,
                       help="class index into the bundle's embeddings")
    group.add_argument("--embedding", help="embedding tensor file")
    p.add_argument("--seconds-total", type=float, default=None)
    p.add_argument("--steps", type=int, default=None,
                   help="sampling steps; default from the bundle (150)")
    p.add_argument("--cfg", type=float, default=None,
                   help="guidance scale; default from the bundle (2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--save-envelope", help="write the measured envelope here")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("eval", help="compare artifacts with the shipped metrics")
    p.add_argument("--e-l1", nargs=2, metavar=("A", "B"))
    p.add_argument("--acc-k", nargs=3, metavar=("K", "PRED", "GT"))
    p.add_argument("--frechet", nargs=2, metavar=("A", "B"))
    p.add_argument("--cosine", nargs=2, metavar=("A", "B"))
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("toybench", help="synthetic benchmark datasets")
    tsub = p.add_subparsers(dest="toybench_command", required=True)
    g = tsub.add_parser("gen", help="generate a dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=24)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sample-rate", type=int, default=4000)
    g.add_argument("--clip-seconds", type=float, default=2.0)
    g.add_argument("--hard", action="store_true",
                   help="add feature noise for robustness runs")
    g.set_defaults(func=_cmd_toybench_gen)

    p = sub.add_parser("serve", help="run the HTTP editing service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--bundle", help="generation bundle checkpoint dir")
    p.add_argument("--predictor", help="predictor checkpoint dir")
    p.set_defaults(func=_cmd_serve)
    return parser


# ---------------------------------------------------------------------------
# run records and entry point


def _write_record(command: str, argv: list, ns, outputs: dict, metrics: dict) -> Path:
    record = {
        "command": command,
        "argv": list(argv),
        "seed": getattr(ns, "seed", None),
        "versions": {
            "foleyctl": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "outputs": outputs,
        "metrics": metrics,
    }
    # content-addressed by invocation, so reruns overwrite their own record
    # and distinct invocations never collide
    digest = hashlib.sha256(
        json.dumps([command, list(argv)]).encode()
    ).hexdigest()[:12]
    runs = _data_dir() / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    path = runs / f"{command}-{digest}.json"
    path.write_text(json.dumps(record, indent=2))
    return path


def run_cli(argv=None) -> int:
    """Parse and execute one command; returns the process exit code.

    0 on success, 2 on bad input (including argparse rejections), 1 on
    anything unexpected at runtime.
    """
    if argv is None:
        argv = sys.argv[1:]
    parser = _parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = ns.command
    if command == "toybench":
        command = f"toybench-{ns.toybench_command}"
    try:
        outputs, metrics = ns.func(ns)
    except FoleyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    record = _write_record(command, argv, ns, outputs, metrics)
    print(json.dumps({"outputs": outputs, "metrics": metrics,
                      "run_record": str(record)}, indent=2))
    return 0


def main() -> None:
    sys.exit(run_cli())
