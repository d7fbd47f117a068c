"""Command-line entry points: generate, train, eval, localize, separate.

Every command takes --config (key-value file) plus repeatable --set
overrides; --seed replaces the run seed and the scene seed in one go.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import dataset as ds
from .config import RunConfig, apply_assignments, format_config, load_config
from .disentangle import disentangle_sample
from .evaluation import (METHODS, evaluate_method, format_report)
from .localization import fuse_maps, localize, normalize_resize, render_heatmap
from .model import AlignmentModel, build_model
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .separation import (bss_metrics, build_separation_sample, reconstruct,
                         write_wav)
from .train import (TrainLogger, guidance_table, load_separator, save_separator,
                    train_separator, train_stage1, train_stage2)


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg = apply_assignments(cfg, [f"seed={args.seed}", f"scene.seed={args.seed}"])
    return cfg


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    handle = ds.compose_dataset(cfg.scene, cfg.n_train, cfg.n_test, args.out,
                                force=args.force)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    digest = ds.dataset_hash(args.out)
    print(f"wrote {len(handle)} scenes to {args.out}")
    print(f"dataset sha256 {digest}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    data = ds.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    logger = TrainLogger(os.path.join(args.out, "train.log"))
    try:
        if args.stage == "sep":
            if not args.init:
                raise SystemExit("--stage sep needs --init pointing at a stage-2 model")
            model, _ = AlignmentModel.load(args.init)
            unet, last = train_separator(model, data, cfg, logger=logger)
            save_separator(os.path.join(args.out, "separator.avck"), unet, cfg)
        else:
            if args.stage == "1":
                model = build_model(data.config.num_classes, cfg.encoder,
                                    cfg.alignment, cfg.seed)
                last = train_stage1(model, data, cfg, objective=args.objective,
                                    logger=logger, checkpoint_dir=args.out)
            elif args.stage == "2":
                if not args.init:
                    raise SystemExit("--stage 2 needs --init (or use --stage joint)")
                model, _ = AlignmentModel.load(args.init)
                last = train_stage2(model, data, cfg, logger=logger,
                                    checkpoint_dir=args.out)
            elif args.stage == "joint":
                model = build_model(data.config.num_classes, cfg.encoder,
                                    cfg.alignment, cfg.seed)
                train_stage1(model, data, cfg, objective=args.objective,
                             logger=logger, checkpoint_dir=args.out)
                last = train_stage2(model, data, cfg, logger=logger,
                                    checkpoint_dir=args.out)
            else:
                raise SystemExit(f"unknown stage {args.stage!r}")
            model.save(os.path.join(args.out, "model.avck"),
                       {"stage": args.stage, "objective": args.objective})
    finally:
        logger.close()
    print(f"finished: {last}")
    print(f"artifacts in {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    data = ds.load_dataset(args.data)
    model, _ = AlignmentModel.load(args.checkpoint)
    report = evaluate_method(model, data, args.method, tau_cls=cfg.tau_cls,
                             meta={"checkpoint": os.path.basename(args.checkpoint)})
    print(format_report(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        print(f"report written to {args.out}")
    return 0


def cmd_localize(args) -> int:
    cfg = _resolve_config(args)
    data = ds.load_dataset(args.data)
    model, _ = AlignmentModel.load(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    image_hw = (data.config.image_size, data.config.image_size)
    ids = [int(tok) for tok in args.ids.split(",") if tok.strip()]
    for sid in ids:
        spec = data.spectrogram(sid).astype(model.dtype)
        image = data.image(sid).astype(model.dtype)
        with ad.no_grad():
            ab = model.audio_enc(spec)
            vb = model.visual_enc(image)
            probs = model.head_a.classify_detached(ab.final).probs.data[0]
        valid = tuple(int(c) for c in np.nonzero(probs >= cfg.tau_cls)[0]) \
            or (int(np.argmax(probs)),)
        aset = disentangle_sample(Tensor(ab.final.data[0]), model.head_a,
                                  cfg.tau_cls, sid, "audio", classes=valid)
        maps = {}
        for c in valid:
            maps[c] = normalize_resize(
                localize(vb.final.data[0], aset.features[c].data,
                         model.proj_a, model.proj_v), image_hw)
            render_heatmap(maps[c], image, os.path.join(args.out, f"{sid}_{c}.png"))
        fused = fuse_maps(maps, probs, valid)
        render_heatmap(fused, image, os.path.join(args.out, f"{sid}_fused.png"))
        print(f"scene {sid}: classes {list(valid)} + fused written")
    return 0


def cmd_separate(args) -> int:
    cfg = _resolve_config(args)
    data = ds.load_dataset(args.data)
    model, _ = AlignmentModel.load(args.checkpoint)
    unet, _ = load_separator(args.separator)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    # two-source test mixtures with distinct classes
    pool = []
    for sid in data.test_ids:
        rec = data.record(sid)
        pool.extend((sid, int(c)) for c in np.nonzero(rec.y_a)[0])
    pairs = []
    guard = 0
    while len(pairs) < args.count and guard < 200 * args.count:
        guard += 1
        i, j = rng.integers(0, len(pool), size=2)
        if pool[i][1] != pool[j][1]:
            pairs.append((pool[i], pool[j]))
    if not pairs:
        raise SystemExit("no valid mixtures available in the test split")

    table = guidance_table(model, data, sorted({sid for pair in pairs for sid, _ in pair}),
                           cfg.tau_cls)
    sr = data.config.sample_rate
    results = []
    for n, ((sa, ca), (sb, cb)) in enumerate(pairs):
        s1, s2 = data.solo_wave(sa, ca), data.solo_wave(sb, cb)
        sample = build_separation_sample(s1, s2, cfg.stft)
        refs = [s1, s2]
        entry = {"scenes": [sa, sb], "classes": [ca, cb], "sides": []}
        stem = os.path.join(args.out, f"mix{n:03d}")
        write_wav(stem + "_mixture.wav", sample.mixture, sr)
        for side, (sid, cls) in enumerate(((sa, ca), (sb, cb))):
            with ad.no_grad():
                mask = unet.predict_mask(sample.X.astype(unet.dtype),
                                         table[(sid, cls)].astype(unet.dtype))
            est = reconstruct(sample.mag_full, sample.phase, mask.data, cfg.stft,
                              length=len(sample.mixture))
            write_wav(stem + f"_est{side}.wav", est, sr)
            scores = bss_metrics(est, refs, side)
            base = bss_metrics(sample.mixture, refs, side)
            entry["sides"].append({
                "sdr": scores.sdr, "sir": scores.sir, "sar": scores.sar,
                "mixture_sdr": base.sdr, "mixture_sir": base.sir,
                "mixture_sar": base.sar})
        results.append(entry)
    flat = [s for e in results for s in e["sides"]]
    summary = {
        "count": len(results),
        "mean_sdr": float(np.mean([s["sdr"] for s in flat])),
        "mean_sir": float(np.mean([s["sir"] for s in flat])),
        "mean_sar": float(np.mean([s["sar"] for s in flat])),
        "mean_mixture_sdr": float(np.mean([s["mixture_sdr"] for s in flat])),
        "samples": results,
    }
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
    print(f"separated {len(results)} mixtures: mean SDR {summary['mean_sdr']:.2f} dB "
          f"(mixture baseline {summary['mean_mixture_sdr']:.2f} dB)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avalign",
                                description="two-stage audiovisual alignment toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key-value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry (repeatable)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override run seed and scene seed")

    g = sub.add_parser("generate", help="synthesize a labeled dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true",
                   help="overwrite an existing dataset directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a stage or the separator")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory for logs/checkpoints")
    t.add_argument("--stage", default="joint", choices=["1", "2", "joint", "sep"])
    t.add_argument("--objective", default="multitask", choices=["multitask", "avc"],
                   help="stage-1 objective")
    t.add_argument("--init", default=None, help="checkpoint to start from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score localization on the test split")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--method", required=True, choices=list(METHODS))
    e.add_argument("--out", default=None, help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    l = sub.add_parser("localize", help="render per-class heatmap overlays")
    common(l)
    l.add_argument("--data", required=True)
    l.add_argument("--checkpoint", required=True)
    l.add_argument("--ids", required=True, help="comma-separated scene ids")
    l.add_argument("--out", required=True)
    l.set_defaults(func=cmd_localize)

    s = sub.add_parser("separate", help="separate test mixtures with the guided U-Net")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True, help="stage-2 model checkpoint")
    s.add_argument("--separator", required=True, help="separator checkpoint")
    s.add_argument("--count", type=int, default=8, help="number of mixtures")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_separate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
