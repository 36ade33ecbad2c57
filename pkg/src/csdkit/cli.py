"""Command-line entry points: synth, prepare, train, evaluate, infer, report.

Every run-shaped command accepts --config (YAML), plus targeted flag
overrides; precedence is defaults < file < flags. Outputs land under
--out-dir so runs never scribble over their inputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config
from .evaluation import EvalReport, evaluate_sessions, session_frame_probs
from .model import CsdModel, TokenGeometry, load_checkpoint
from .backbones import ToyAudioBackbone, ToyVisualBackbone, audio_token_count
from .preprocess import load_segments, prepare_corpus
from .synth import SceneSpec, make_segments, write_corpus
from .training import train
from .types import DatasetManifest, Segment, ValidationError


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML run config")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="single-threaded, fully seeded execution (reports become reproducible byte-for-byte)",
    )
    parser.add_argument("--out-dir", type=Path, required=True)


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, dict] = {"train": {}}
    if getattr(args, "seed", None) is not None:
        overrides["train"]["seed"] = args.seed
    if getattr(args, "deterministic", False):
        overrides["train"]["deterministic"] = True
    if getattr(args, "epochs", None) is not None:
        overrides["train"]["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        overrides["train"]["batch_size"] = args.batch_size
    return load_config(getattr(args, "config", None), overrides)


def _build_model(cfg: RunConfig, segments: list[Segment]) -> CsdModel:
    """Model sized to the data: token geometry comes from the first segment."""
    first = segments[0]
    geometry = TokenGeometry(
        audio_tokens=first.audio.samples.shape[0]
        * audio_token_count(first.audio.samples.shape[1]),
        visual_tokens=first.faces.streams.shape[0],
    )
    model = CsdModel(
        cfg.model,
        audio_backbone=ToyAudioBackbone(),
        visual_backbone=ToyVisualBackbone(cfg.model.window_frames),
        geometry=None if cfg.model.use_cls else geometry,
    )
    return model


def _predict_fn(model: CsdModel):
    def predict(batch):
        with torch.no_grad():
            logits = model.forward_segments(batch)
            return torch.softmax(logits, dim=-1).double().cpu().numpy()

    return predict


def cmd_synth(args: argparse.Namespace) -> int:
    specs = [
        SceneSpec(
            session_id=f"{args.split}{i:03d}",
            n_frames=args.frames,
            fps=args.fps,
            n_speakers=args.speakers,
            mic_count=args.mics,
            seed=(args.seed or 0) * 1000 + i,
        )
        for i in range(args.sessions)
    ]
    manifest_path = write_corpus(
        specs, args.out_dir, max_streams=args.max_streams, split=args.split
    )
    print(f"wrote {args.sessions} sessions -> {manifest_path}")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    manifest = DatasetManifest.load(args.manifest)
    segments, errors = prepare_corpus(
        manifest,
        args.out_dir,
        window=cfg.dataset.window_frames,
        hop=cfg.dataset.hop,
        crop_size=args.crop_size if args.crop_size else cfg.dataset.crop_size,
    )
    print(f"prepared {len(segments)} segments from {len(manifest.entries)} sessions")
    for sid, msg in errors.items():
        print(f"  skipped {sid}: {msg}", file=sys.stderr)
    return 0 if not errors else 1


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    segments = load_segments(args.store)
    if not segments:
        raise ValidationError(f"no segments in {args.store}")
    # seed before construction so the random weight init is reproducible
    torch.manual_seed(cfg.train.seed)
    model = _build_model(cfg, segments)
    result = train(
        model,
        segments,
        cfg.train,
        loss_config=cfg.loss,
        augment_config=cfg.augment,
        out_dir=args.out_dir,
    )
    for rec in result.history:
        print(
            f"epoch {rec['epoch']:3d}  loss {rec['mean_loss']:.4f}  "
            f"train-mid-acc {rec['train_middle_frame_acc']:.4f}"
        )
    print(f"checkpoints + manifest in {args.out_dir}")
    return 0


def _model_from_checkpoint(args: argparse.Namespace, cfg: RunConfig) -> CsdModel:
    net, _ = load_checkpoint(args.checkpoint)
    model = CsdModel(
        net.config,
        audio_backbone=ToyAudioBackbone(),
        visual_backbone=ToyVisualBackbone(net.config.window_frames),
        geometry=net.geometry,
    )
    model.net = net
    model.eval()
    return model


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    if cfg.train.deterministic:
        torch.set_num_threads(1)
    segments = load_segments(args.store)
    model = _model_from_checkpoint(args, cfg)
    report = evaluate_sessions(
        segments,
        _predict_fn(model),
        batch_size=cfg.train.batch_size,
        window=model.config.window_frames,
        meta={
            "checkpoint": str(args.checkpoint),
            "store": str(args.store),
            "split": args.split,
            "config_hash": cfg.hash(),
        },
    )
    paths = report.save(args.out_dir, stem=f"eval_{args.split}" if args.split else "eval")
    print(report.to_text())
    print(f"report files: {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    if cfg.train.deterministic:
        torch.set_num_threads(1)
    segments = load_segments(args.store)
    model = _model_from_checkpoint(args, cfg)
    window = model.config.window_frames
    by_session: dict[str, list[Segment]] = {}
    for seg in segments:
        by_session.setdefault(seg.session_id, []).append(seg)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out_jsonl = args.out_dir / "frames.jsonl"
    with out_jsonl.open("w") as fh:
        for sid in sorted(by_session):
            probs, labels = session_frame_probs(
                by_session[sid], _predict_fn(model), cfg.train.batch_size, window
            )
            np.savez(
                args.out_dir / f"{sid}_frames.npz", probs=probs, labels=labels
            )
            for f in range(probs.shape[0]):
                fh.write(
                    json.dumps(
                        {
                            "session": sid,
                            "frame": f,
                            "probs": [round(float(p), 6) for p in probs[f]],
                            "pred": int(probs[f].argmax()),
                            "label": int(labels[f]),
                        }
                    )
                    + "\n"
                )
    print(f"wrote per-frame posteriors for {len(by_session)} sessions -> {out_jsonl}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    payload = json.loads(Path(args.eval_json).read_text())
    confusion = np.array(
        [
            [np.nan if v is None else float(v) for v in row]
            for row in payload["confusion_percent"]
        ]
    )
    metrics = {
        task: {k: (float("nan") if v is None else v) for k, v in vals.items()}
        for task, vals in payload["metrics"].items()
    }
    report = EvalReport(
        metrics=metrics,
        confusion=confusion,
        n_frames=payload["n_frames"],
        n_sessions=payload["n_sessions"],
        meta=payload.get("meta", {}),
    )
    print(report.to_text())
    return 0


def cmd_dump_config(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    text = cfg.to_yaml()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csdkit",
        description="Audio-visual concurrent-speaker detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic session corpus")
    p.add_argument("--sessions", type=int, default=4)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--speakers", type=int, default=3)
    p.add_argument("--mics", type=int, default=2)
    p.add_argument("--max-streams", type=int, default=8)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="segment a manifest's sessions into a store")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--crop-size", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a prepared segment store")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a segment store")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="write per-frame posteriors for a store")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="re-render a saved evaluation JSON as text")
    p.add_argument("--eval-json", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-config", help="print the effective configuration as YAML")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_dump_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
