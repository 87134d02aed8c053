"""Single command-line entry point.

Subcommands: dataprep, train, evaluate, erase, effect, selftest. One JSON
config file can feed every subcommand; flags override config keys. Each run
writes a manifest (command, config hash, seed, version, wall time) next to
its outputs, logs JSON lines to a file, and prints human-readable progress.
Failures produce a machine-readable JSON error on stderr and a nonzero exit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, effects, imaging, landmarks, losses, models, pipeline, trainer
from .dataprep import build_dataset

log = logging.getLogger("faceblank")

CKPT_ENV = "FACEBLANK_CKPT_DIR"


class _JsonLineHandler(logging.FileHandler):
    def emit(self, record):
        record.msg = json.dumps({"time": record.created, "level": record.levelname,
                                 "message": record.getMessage()})
        record.args = ()
        super().emit(record)


def _setup_logging(log_file, verbose: bool):
    handlers = [logging.StreamHandler(sys.stdout)]
    handlers[0].setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    if log_file:
        handlers.append(_JsonLineHandler(log_file))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        handlers=handlers, force=True)


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _train_config(args, file_cfg: dict) -> trainer.TrainConfig:
    """Config-file values as the base, command-line flags on top."""
    cfg = dict(file_cfg)
    for key in ("seed", "batch_size", "image_size"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return trainer.TrainConfig.from_dict(cfg)


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _write_manifest(out_dir, command: str, cfg: dict, seed, t0: float, inputs: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": _config_hash(cfg),
        "config": cfg,
        "seed": seed,
        "version": __version__,
        "inputs": inputs,
        "wall_time_s": round(time.monotonic() - t0, 3),
    }
    with open(out_dir / "run_manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    log.info("run manifest: %s", out_dir / "run_manifest.json")


def _ckpt_dir(args) -> Path:
    ckpt = args.ckpt or os.environ.get(CKPT_ENV)
    if not ckpt:
        raise SystemExit2(f"--ckpt required (or set ${CKPT_ENV})")
    return Path(ckpt)


class SystemExit2(Exception):
    """Usage error surfaced with exit code 2."""


# ---------------------------------------------------------------------------
# subcommands

def cmd_dataprep(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    manifest = build_dataset(
        args.corpus, args.landmarks, args.out, seed=seed,
        val_fraction=args.val_fraction if args.val_fraction is not None
        else cfg.get("val_fraction", 0.1),
        glasses_probability=args.glasses_probability if args.glasses_probability is not None
        else cfg.get("glasses_probability", 0.3),
    )
    n_train = len(manifest["train"]["images"])
    n_val = len(manifest["val"]["images"])
    log.info("dataset built: %d train / %d val images", n_train, n_val)
    _write_manifest(args.out, "dataprep", cfg, seed, t0,
                    {"corpus": str(args.corpus), "landmarks": str(args.landmarks)})
    return 0


def cmd_train(args) -> int:
    t0 = time.monotonic()
    file_cfg = _load_config(args.config)
    config = _train_config(args, file_cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = trainer.BlankFaceDataset.from_manifest(args.data, config)
    metrics_fh = open(out_dir / "metrics.jsonl", "a")

    state = None
    if args.resume:
        state = trainer.load_state(args.resume, config)
        log.info("resumed %s training at step %d", state.phase, state.step)

    try:
        if args.stage == "edge":
            state = trainer.train_phase1(dataset, config, steps=args.steps,
                                         out_dir=out_dir, metrics_fh=metrics_fh,
                                         state=state)
        else:
            if state is None:
                if not args.edge_ckpt:
                    raise SystemExit2("train inpaint needs --edge-ckpt or --resume")
                edge_gen = models.EdgeGenerator(config.generator_spec)
                from . import checkpoint as ckpt_mod
                ckpt_mod.load_checkpoint(args.edge_ckpt, {"edge_generator": edge_gen})
                state = trainer.build_phase2_state(config, edge_gen)
            state = trainer.train_phase2(dataset, config, state.nets["edge_generator"],
                                         steps=args.steps, out_dir=out_dir,
                                         metrics_fh=metrics_fh, state=state)
    finally:
        metrics_fh.close()
    trainer.save_state(state, out_dir / "final")
    log.info("finished at step %d; checkpoint at %s", state.step, out_dir / "final")
    _write_manifest(out_dir, f"train {args.stage}", config.to_dict(), config.seed,
                    t0, {"data": str(args.data), "resume": args.resume})
    return 0


def cmd_evaluate(args) -> int:
    ckpt = _ckpt_dir(args)
    with open(ckpt / "manifest.json") as f:
        manifest = json.load(f)
    config = trainer.TrainConfig.from_dict(manifest["config"])
    pipe = pipeline.ErasePipeline.from_checkpoint(ckpt)
    dataset = trainer.BlankFaceDataset.from_manifest(args.val, config, split=args.split)
    metrics = trainer.evaluate(dataset, pipe.nets, config)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _parse_parts(text: str):
    parts = tuple(p for p in text.split(",") if p)
    for p in parts:
        if p not in landmarks.MASKABLE_PARTS:
            raise SystemExit2(f"unknown part {p!r}; choose from "
                              f"{sorted(landmarks.MASKABLE_PARTS)}")
    return parts


def cmd_erase(args) -> int:
    t0 = time.monotonic()
    pipe = pipeline.ErasePipeline.from_checkpoint(_ckpt_dir(args))
    img = imaging.load_image_rgb(args.image)
    lm = landmarks.load_landmarks(args.landmarks)
    parts = _parse_parts(args.parts)
    result = pipe.erase(img, lm, parts)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = Path(args.image).stem
    imaging.save_image_rgb(out_dir / f"{name}_blank.png", result["blank_full_frame"])
    if args.save_intermediates:
        imaging.save_gray_png(out_dir / f"{name}_mask.png", result["mask"])
        imaging.save_gray_png(out_dir / f"{name}_edges.png", result["edge_completed"])
        imaging.save_image_rgb(out_dir / f"{name}_flow.png",
                               pipeline.flow_to_color(result["flow"]))
        imaging.save_image_rgb(out_dir / f"{name}_coarse.png",
                               np.clip(result["coarse"], 0, 1))
        imaging.save_image_rgb(out_dir / f"{name}_grid.png",
                               pipeline.intermediate_grid(img, result))
    _write_manifest(out_dir, "erase", {"parts": list(parts)}, None, t0,
                    {"image": str(args.image), "landmarks": str(args.landmarks)})
    return 0


def cmd_effect(args) -> int:
    t0 = time.monotonic()
    pipe = pipeline.ErasePipeline.from_checkpoint(_ckpt_dir(args))
    img = imaging.load_image_rgb(args.image)
    lm = landmarks.load_landmarks(args.landmarks)
    if args.spec:
        spec = effects.EffectSpec.from_dict(_load_config(args.spec))
    else:
        spec = effects.default_spec(args.name)
    blank = pipe.erase(img, lm)["blank_full_frame"]
    parts = effects.extract_parts(img, lm)
    if "face" in spec.parts:
        parts["face"] = effects.extract_face_patch(img, lm)
    out = effects.apply_effect(blank, parts, lm, spec)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    imaging.save_image_rgb(out_path, out)
    _write_manifest(out_path.parent, "effect", {"name": spec.name}, None, t0,
                    {"image": str(args.image)})
    return 0


def cmd_selftest(args) -> int:
    """Quick invariant suite; prints a pass/fail table."""
    torch.manual_seed(args.seed)
    checks = []

    img = torch.rand(2, 3, 32, 32)
    err = (models.warp(img, torch.zeros(2, 2, 32, 32)) - img).abs().max().item()
    checks.append(("warp identity (<1e-6)", err < 1e-6))

    feat = torch.rand(2, 4, 8, 8)
    gram = losses.gram_matrix(feat)
    eig = torch.linalg.eigvalsh(gram.double()).min().item()
    checks.append(("gram symmetric PSD", eig >= -1e-6))

    a = torch.rand(1, 3, 16, 16)
    extractor = losses.PerceptualExtractor(width_mult=0.25)
    zeros = [
        ("L1 zero on identical", losses.l1_loss(a, a).item()),
        ("style zero on identical", losses.style_loss(a, a, extractor).item()),
        ("perceptual zero on identical",
         losses.perceptual_loss(a, a, extractor).item()),
        ("pixel-clone zero on identical", losses.pixel_clone_loss(a, a).item()),
    ]
    checks.extend((name, v == 0.0) for name, v in zeros)

    width = max(len(name) for name, _ in checks)
    ok = True
    for name, passed in checks:
        print(f"{name:<{width}}  {'PASS' if passed else 'FAIL'}")
        ok &= passed
    return 0 if ok else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faceblank",
                                description="Face erasing toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--log-file", help="JSON-lines log file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataprep", help="synthesize blank-face training data")
    d.add_argument("--corpus", required=True)
    d.add_argument("--landmarks", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--val-fraction", type=float)
    d.add_argument("--glasses-probability", type=float)
    d.set_defaults(func=cmd_dataprep)

    t = sub.add_parser("train", help="train the edge or inpainting stage")
    t.add_argument("stage", choices=("edge", "inpaint"))
    t.add_argument("--data", required=True, help="dataprep output directory")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.add_argument("--edge-ckpt", help="frozen edge weights for inpaint stage")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--image-size", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="PSNR/MAE on a validation set")
    e.add_argument("--ckpt")
    e.add_argument("--val", required=True)
    e.add_argument("--split", default="val")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("erase", help="erase facial parts from a photo")
    r.add_argument("--image", required=True)
    r.add_argument("--landmarks", required=True)
    r.add_argument("--ckpt")
    r.add_argument("--out", required=True)
    r.add_argument("--parts", default="eyebrows,eyes,nose,mouth")
    r.add_argument("--save-intermediates", action="store_true")
    r.set_defaults(func=cmd_erase)

    f = sub.add_parser("effect", help="apply an AR effect")
    f.add_argument("--name", required=True, choices=effects.EFFECT_NAMES)
    f.add_argument("--image", required=True)
    f.add_argument("--landmarks", required=True)
    f.add_argument("--ckpt")
    f.add_argument("--out", required=True)
    f.add_argument("--spec", help="JSON EffectSpec override")
    f.set_defaults(func=cmd_effect)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_file, args.verbose)
    try:
        return args.func(args)
    except SystemExit2 as e:
        parser.exit(2, f"error: {e}\n")
    except Exception as e:  # noqa: BLE001 - uniform machine-readable failure
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
