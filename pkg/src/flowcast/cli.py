"""Batch entry points: synth, train, forecast, evaluate, plot.

One experiment lives under one output root (config `out`):

    out/
      dataset/                  synth
      checkpoints/<stage>/      train  (+ loss_trace.csv per stage)
      forecasts/<mode>/         forecast (RTEN tensors + run_manifest.json)
      reports/<mode>/           evaluate (report.json + leadtime.csv)
      plots/                    plot (one SVG per metric)
      manifests/                one reproducibility manifest per command

Exit codes: 0 success, 2 configuration/format error, 3 missing
prerequisite (stage order, absent checkpoint/dataset), 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import cascade, checkpoint, data, kernels, metrics, optim
from .backbone import Backbone, BackboneConfig, train_backbone
from .config import RunConfig, load_config, write_manifest
from .errors import ConfigError, FlowcastError, FormatError, MissingPrerequisiteError, NumericError
from .stunet import STUNet, STUNetConfig

MODES = cascade.ABLATION_MODES
STAGES = ("backbone", "rectifier", "generator")
_MODE_VARIANT = {"full": "standard", "no_generator": "standard",
                 "no_rectifier_y": "no_rectifier_y", "no_rectifier_residual": "no_rectifier_residual"}


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    return cfg


def _schedule(cfg: RunConfig) -> cascade.SegmentSchedule:
    return cascade.SegmentSchedule(m=cfg.l_in, l_out=cfg.l_out)


def _backbone_config(cfg: RunConfig) -> BackboneConfig:
    bc = cfg.backbone
    return BackboneConfig(l_in=cfg.l_in, l_out=cfg.l_out, hid_s=bc.hid_s, hid_t=bc.hid_t, n_t=bc.n_t)


def _stunet_config(cfg: RunConfig, stage: str) -> STUNetConfig:
    fc = cfg.rectifier if stage == "rectifier" else cfg.generator
    vocab = _schedule(cfg).n_segments + 1 if stage == "rectifier" else 0
    return STUNetConfig(m=cfg.l_in, base=fc.base, mults=tuple(fc.mults), blocks=fc.blocks,
                        side_scales=tuple(fc.side_scales), emb_dim=fc.emb_dim, index_vocab=vocab)


def _dataset_dir(cfg: RunConfig, args) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(cfg.out) / "dataset"


def _load_split(cfg: RunConfig, args, split: str):
    ds_dir = _dataset_dir(cfg, args)
    if not (ds_dir / "manifest.json").exists():
        raise MissingPrerequisiteError(f"no dataset at {ds_dir}; run `flowcast synth` first")
    splits, manifest = data.load_dataset(ds_dir)
    if split not in splits or not splits[split]:
        raise MissingPrerequisiteError(f"dataset at {ds_dir} has no {split!r} samples")
    return splits[split], manifest, ds_dir


def _ckpt_hash(ckpt_dir: Path) -> str:
    mpath = ckpt_dir / checkpoint.MANIFEST
    return hashlib.sha256(mpath.read_bytes()).hexdigest()


# -- synth --------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    out_root = Path(cfg.out)
    ds_dir = out_root / "dataset"
    if ds_dir.exists() and any(ds_dir.iterdir()) and not args.force:
        raise ConfigError(f"{ds_dir} exists and is not empty; pass --force to overwrite")
    params = cfg.data.advection()
    split_sizes = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}
    split_codes = {"train": 11, "val": 12, "test": 13}
    splits = {}
    for split, n_seq in split_sizes.items():
        seqs = data.synth_advection(_derive_seed(cfg.seed, split_codes[split]), n_seq,
                                    cfg.data.t_total, cfg.data.h, cfg.data.w, params)
        splits[split] = [s for seq in seqs
                         for s in data.window_samples(seq, cfg.window.length, cfg.window.stride,
                                                      cfg.window.split_in)]
    meta = data.DatasetMeta(h=cfg.data.h, w=cfg.data.w, seed=cfg.seed,
                            window=cfg.window.length, stride=cfg.window.stride,
                            split_in=cfg.window.split_in,
                            advection=dataclasses.asdict(params))
    data.save_dataset(ds_dir, splits, meta)
    write_manifest(out_root / "manifests" / "synth.json", "synth", cfg,
                   seeds={s: _derive_seed(cfg.seed, c) for s, c in split_codes.items()},
                   kernel_backend=kernels.backend_name(),
                   counts={s: len(v) for s, v in splits.items()})
    print(f"dataset written to {ds_dir} "
          f"({', '.join(f'{s}: {len(v)}' for s, v in splits.items())})")
    return 0


# -- train ---------------------------------------------------------------


def _write_loss_trace(path: Path, losses, start_step: int, append: bool):
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([start_step + i, f"{loss:.8g}"])


def _load_frozen_backbone(cfg: RunConfig, out_root: Path) -> Backbone:
    ckpt_dir = out_root / "checkpoints" / "backbone"
    try:
        payload = checkpoint.load_checkpoint(ckpt_dir, expected_kind="backbone")
    except MissingPrerequisiteError:
        raise MissingPrerequisiteError(
            f"stage 1 (backbone) required: no checkpoint at {ckpt_dir}; "
            "run `flowcast train --stage backbone` first"
        )
    model = Backbone(BackboneConfig.from_dict(payload["manifest"]["config"]),
                     np.random.default_rng(0))
    model.param_store().load_state(payload["state"])
    model.freeze()
    return model


def _adam_state_from(payload, store, spec) -> optim.AdamState:
    state = optim.init_adam(store, spec.beta1, spec.beta2, spec.eps)
    opt = payload["optimizer"]
    if opt:
        state.step = payload["manifest"]["step"]
        for name in store.names():
            state.m[name] = opt[f"m.{name}"].astype(state.m[name].dtype)
            state.v[name] = opt[f"v.{name}"].astype(state.v[name].dtype)
    return state


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out_root = Path(cfg.out)
    stage = args.stage
    train_split, _, ds_dir = _load_split(cfg, args, "train")
    ckpt_dir = out_root / "checkpoints" / stage
    stage_cfg = {"backbone": cfg.backbone, "rectifier": cfg.rectifier, "generator": cfg.generator}[stage]
    steps = args.steps if args.steps is not None else stage_cfg.steps
    spec = optim.OptimizerSpec(lr_max=cfg.optimizer.lr_max, lr_min=cfg.optimizer.lr_min,
                               beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2,
                               eps=cfg.optimizer.eps)

    start_step = 0
    resume_payload = None
    if args.resume:
        resume_payload = checkpoint.load_checkpoint(ckpt_dir, expected_kind=stage)
        start_step = resume_payload["manifest"]["step"]

    # the reproducibility record precedes any parameter update
    write_manifest(out_root / "manifests" / f"train_{stage}.json", f"train --stage {stage}", cfg,
                   kernel_backend=kernels.backend_name(), stage=stage, steps=steps,
                   start_step=start_step, dataset=str(ds_dir),
                   init_seed=_derive_seed(cfg.seed, 31, STAGES.index(stage)),
                   train_seed=_derive_seed(cfg.seed, 21, STAGES.index(stage)))

    init_rng = np.random.default_rng(_derive_seed(cfg.seed, 31, STAGES.index(stage)))
    train_rng = np.random.default_rng(_derive_seed(cfg.seed, 21, STAGES.index(stage), start_step))
    schedule_total = start_step + steps

    if stage == "backbone":
        model = Backbone(_backbone_config(cfg), init_rng)
        arch_cfg = model.cfg.to_dict()
        extra = {}
    else:
        model = STUNet(_stunet_config(cfg, stage), init_rng)
        arch_cfg = model.cfg.to_dict()
        extra = {"variant": cfg.generator.variant} if stage == "generator" else {}
    store = model.param_store()
    if resume_payload is not None:
        store.load_state(resume_payload["state"])
    state = _adam_state_from(resume_payload, store, spec) if resume_payload else \
        optim.init_adam(store, spec.beta1, spec.beta2, spec.eps)

    def save(step_now: int):
        opt_state = {}
        for name in store.names():
            opt_state[f"m.{name}"] = state.m[name]
            opt_state[f"v.{name}"] = state.v[name]
        checkpoint.save_checkpoint(ckpt_dir, stage, arch_cfg, store, step_now, cfg.seed,
                                   extra=extra, optimizer_state=opt_state)

    try:
        if stage == "backbone":
            losses = train_backbone(model, train_split, steps, cfg.backbone.batch, train_rng,
                                    spec=spec, schedule_total=schedule_total, start_step=start_step,
                                    state=state)
        else:
            frozen = _load_frozen_backbone(cfg, out_root)
            sched = _schedule(cfg)
            if stage == "rectifier":
                losses = cascade.train_rectifier(model, frozen, train_split, steps,
                                                 cfg.rectifier.batch, train_rng, sched, spec=spec,
                                                 schedule_total=schedule_total,
                                                 start_step=start_step, state=state)
            else:
                losses = cascade.train_generator(model, frozen, train_split, steps,
                                                 cfg.generator.batch, train_rng, sched, spec=spec,
                                                 variant=cfg.generator.variant,
                                                 schedule_total=schedule_total,
                                                 start_step=start_step, state=state)
    except NumericError:
        save(start_step)  # parameters were rolled back to the last good snapshot
        raise
    save(start_step + steps)
    _write_loss_trace(ckpt_dir / "loss_trace.csv", losses, start_step, append=args.resume)
    print(f"{stage} trained for {steps} steps (now at step {start_step + steps}); "
          f"final loss {losses[-1]:.5f}; checkpoint at {ckpt_dir}")
    return 0


# -- forecast --------------------------------------------------------------


def _load_stage_model(cfg: RunConfig, out_root: Path, stage: str):
    ckpt_dir = out_root / "checkpoints" / stage
    payload = checkpoint.load_checkpoint(ckpt_dir, expected_kind=stage)
    if stage == "backbone":
        model = Backbone(BackboneConfig.from_dict(payload["manifest"]["config"]),
                         np.random.default_rng(0))
    else:
        model = STUNet(STUNetConfig.from_dict(payload["manifest"]["config"]),
                       np.random.default_rng(0))
    model.param_store().load_state(payload["state"])
    model.freeze()
    return model, payload["manifest"], ckpt_dir


def cmd_forecast(args) -> int:
    cfg = _load_run_config(args)
    out_root = Path(cfg.out)
    mode = args.mode
    test_split, _, ds_dir = _load_split(cfg, args, "test")

    bb, _, bb_dir = _load_stage_model(cfg, out_root, "backbone")
    hashes = {"backbone": _ckpt_hash(bb_dir)}
    rect = gen = None
    if mode in ("full", "no_generator"):
        rect, _, rect_dir = _load_stage_model(cfg, out_root, "rectifier")
        hashes["rectifier"] = _ckpt_hash(rect_dir)
    if mode in ("full", "no_rectifier_y", "no_rectifier_residual"):
        gen, gen_manifest, gen_dir = _load_stage_model(cfg, out_root, "generator")
        hashes["generator"] = _ckpt_hash(gen_dir)
        trained_variant = gen_manifest.get("extra", {}).get("variant", "standard")
        if trained_variant != _MODE_VARIANT[mode]:
            raise ConfigError(
                f"mode {mode!r} needs a generator trained with variant "
                f"{_MODE_VARIANT[mode]!r}, but the checkpoint was trained as {trained_variant!r}"
            )

    steps_rect = args.steps if args.steps is not None else cfg.sampler.steps_rectifier
    steps_gen = args.steps if args.steps is not None else cfg.sampler.steps_generator
    sched = _schedule(cfg)

    fc_dir = out_root / "forecasts" / mode
    fc_dir.mkdir(parents=True, exist_ok=True)
    files = []
    nfe_actual = 0
    for i, sample in enumerate(test_split):
        seed_i = _derive_seed(cfg.seed, 41, i)
        forecast, _, info = cascade.generate_forecast(sample.input, bb, rect, gen, sched,
                                                      steps_rect=steps_rect, steps_gen=steps_gen,
                                                      seed=seed_i, mode=mode)
        rel = f"forecast_{i:04d}.rten"
        data.save_tensor(fc_dir / rel, forecast)
        files.append(rel)
        nfe_actual = info["nfe"]

    nfe_documented = cascade.nfe_count(sched, steps_rect, steps_gen,
                                       cfg.sampler.count_first_rect_segment)
    manifest_extra = dict(
        mode=mode, dataset=str(ds_dir), files=files, checkpoints=hashes,
        sampler={"steps_rectifier": steps_rect, "steps_generator": steps_gen,
                 "count_first_rect_segment": cfg.sampler.count_first_rect_segment},
        nfe=nfe_documented, nfe_sampled=nfe_actual,
        sample_seeds=[_derive_seed(cfg.seed, 41, i) for i in range(len(test_split))],
        kernel_backend=kernels.backend_name(),
    )
    write_manifest(fc_dir / "run_manifest.json", f"forecast --mode {mode}", cfg, **manifest_extra)
    write_manifest(out_root / "manifests" / f"forecast_{mode}.json", f"forecast --mode {mode}",
                   cfg, **manifest_extra)
    print(f"{len(files)} forecasts ({mode}) written to {fc_dir}; NFE {nfe_documented} "
          f"({nfe_actual} sampled)")
    return 0


# -- evaluate ---------------------------------------------------------------


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    out_root = Path(cfg.out)
    fc_dir = Path(args.forecasts) if args.forecasts else out_root / "forecasts" / "full"
    mpath = fc_dir / "run_manifest.json"
    if not mpath.exists():
        raise MissingPrerequisiteError(f"no forecasts at {fc_dir}; run `flowcast forecast` first")
    run_manifest = json.loads(mpath.read_text())
    mode = run_manifest["mode"]
    test_split, _, _ = _load_split(cfg, args, "test")

    files = run_manifest["files"]
    if len(files) != len(test_split):
        raise ConfigError(
            f"forecast/test split misalignment: {len(files)} forecasts vs "
            f"{len(test_split)} test samples (offending dir: {fc_dir})"
        )
    missing = [f for f in files if not (fc_dir / f).exists()]
    if missing:
        raise ConfigError(f"forecast files missing from {fc_dir}: {missing}")

    forecasts = [data.load_tensor(fc_dir / f) for f in files]
    gts = [s.target for s in test_split]
    thresholds = cfg.metrics.thresholds
    report = metrics.aggregate_report(forecasts, gts, thresholds)
    report["mode"] = mode
    report["nfe"] = run_manifest.get("nfe")
    curves = metrics.leadtime_curves(forecasts, gts, thresholds)

    rep_dir = out_root / "reports" / mode
    rep_dir.mkdir(parents=True, exist_ok=True)
    (rep_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    metrics.write_curves_csv(rep_dir / "leadtime.csv", curves)
    write_manifest(out_root / "manifests" / f"evaluate_{mode}.json", "evaluate", cfg,
                   forecasts=str(fc_dir), thresholds=thresholds, mode=mode)
    print(f"report for {mode}: " + ", ".join(
        f"{k.upper()} {report[k]:.4f}" for k in ("csi", "csi4", "csi16", "hss", "ssim")))
    print(f"written to {rep_dir}")
    return 0


# -- plot --------------------------------------------------------------------


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_plot(series: list[tuple[str, list[int], list[float]]], title: str) -> str:
    width, height, ml, mb, mt, mr = 640, 400, 50, 40, 30, 20
    px = width - ml - mr
    py = height - mt - mb
    max_lead = max(max(leads) for _, leads, _ in series)

    def sx(lead):
        return ml + px * (lead - 1) / max(max_lead - 1, 1)

    def sy(val):
        return mt + py * (1.0 - min(max(val, 0.0), 1.0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml}" y="{mt - 10}" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + py}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt + py}" x2="{ml + px}" y2="{mt + py}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{frac:.2f}</text>')
    for lead in range(1, max_lead + 1):
        if lead == 1 or lead == max_lead or lead % 5 == 0:
            x = sx(lead)
            parts.append(f'<line x1="{x:.1f}" y1="{mt + py}" x2="{x:.1f}" y2="{mt + py + 4}" stroke="black"/>')
            parts.append(f'<text x="{x:.1f}" y="{mt + py + 16}" text-anchor="middle" '
                         f'font-family="sans-serif" font-size="11">{lead}</text>')
    parts.append(f'<text x="{ml + px / 2:.1f}" y="{height - 6}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">lead time (frames)</text>')
    for j, (label, leads, values) in enumerate(series):
        color = _PALETTE[j % len(_PALETTE)]
        points = " ".join(f"{sx(l):.2f},{sy(v):.2f}" for l, v in zip(leads, values))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        ly = mt + 16 + 16 * j
        parts.append(f'<line x1="{ml + px - 130}" y1="{ly - 4}" x2="{ml + px - 106}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{ml + px - 100}" y="{ly}" font-family="sans-serif" '
                     f'font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    if not args.csvs:
        raise ConfigError("plot needs at least one lead-time CSV")
    out_dir = Path(args.out) if args.out else Path("plots")
    out_dir.mkdir(parents=True, exist_ok=True)
    per_metric: dict[str, list] = {}
    for path in args.csvs:
        rows = metrics.read_curves_csv(path)
        label = Path(path).parent.name or Path(path).stem
        by_metric: dict[str, dict[int, float]] = {}
        for row in rows:
            if row["threshold"] == "mean":
                by_metric.setdefault(row["metric"], {})[row["lead"]] = row["value"]
        for metric, curve in by_metric.items():
            leads = sorted(curve)
            per_metric.setdefault(metric, []).append((label, leads, [curve[l] for l in leads]))
    written = []
    for metric, series in sorted(per_metric.items()):
        svg = _svg_plot(series, f"{metric.upper()} vs lead time")
        target = out_dir / f"{metric}.svg"
        target.write_text(svg)
        written.append(str(target))
    print("plots written: " + ", ".join(written))
    return 0


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcast",
                                     description="cascaded flow-matching nowcasting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps=False):
        p.add_argument("--config", help="JSON run config (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output root")
        if steps:
            p.add_argument("--steps", type=int, help="override step count")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one stage")
    common(p, steps=True)
    p.add_argument("--stage", choices=STAGES, required=True)
    p.add_argument("--data", help="dataset directory (default: <out>/dataset)")
    p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    p.add_argument("--force", action="store_true", help="accepted for symmetry; training always overwrites")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="run the cascade on the test split")
    common(p, steps=True)
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--data", help="dataset directory (default: <out>/dataset)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="verification metrics for stored forecasts")
    common(p)
    p.add_argument("--forecasts", help="forecast directory (default: <out>/forecasts/full)")
    p.add_argument("--data", help="dataset directory (default: <out>/dataset)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="SVG lead-time curves from evaluation CSVs")
    p.add_argument("csvs", nargs="*", help="leadtime.csv files")
    p.add_argument("--out", help="plot output directory")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingPrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except FlowcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
