"""Command-line entry point tying the pieces together.

Subcommands: train, distill, reconstruct, eval, bench, sweep. Every run
writes its fully resolved configuration into the output directory so results
can be reproduced from the artifacts alone.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from msflow.backbone import FeaturePyramid, PooledFeatures, build_tokenizer
from msflow.distill import DistillConfig, setup_distillation, student_decode, train_distill
from msflow.metrics import MetricsReport, feature_stats, frechet_distance, measure_throughput, psnr, ssim
from msflow.pipeline import checkpoint as ckpt_io
from msflow.pipeline import config as config_io
from msflow.pipeline.data import build_dataset
from msflow.rng import make_generator, stable_seed
from msflow.sampler import decode_multiscale, evaluations_per_step
from msflow.train_stage1 import train_stage1


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set stage1.max_steps=500")
    p.add_argument("--out-dir", type=Path, default=None, help="output directory (overrides config)")


def _load_config(args) -> config_io.RunConfig:
    config = config_io.load_run_config(args.config, args.overrides)
    if getattr(args, "out_dir", None):
        config = config_io.from_dict({**config_io.as_dict(config), "out_dir": str(args.out_dir)})
    return config


def _datasets(config):
    common = dict(kind=config.data.kind, resolution=config.data.resolution, path=config.data.path, seed=config.seed)
    train = build_dataset(split="train", num_images=config.data.num_train, **common)
    val = build_dataset(split="val", num_images=config.data.num_val, **common)
    return train, val


def _load_tokenizer(config, ckpt_path: Path):
    encoder, model = build_tokenizer(config.model, seed=config.seed)
    ckpt = ckpt_io.load_checkpoint(ckpt_path)
    ckpt_io.load_module(encoder, ckpt, "encoder")
    ckpt_io.load_module(model, ckpt, "decoder")
    encoder.eval()
    model.eval()
    encoder.requires_grad_(False)
    model.requires_grad_(False)
    return encoder, model, ckpt


def cmd_train(args) -> int:
    config = _load_config(args)
    out_dir = Path(config.out_dir)
    config_io.write_resolved(config, out_dir)
    train, val = _datasets(config)
    encoder, model = config_io.build_models(config)
    schedule = config.schedule.build()
    meta = {"config_fingerprint": config_io.fingerprint(config), "config": config_io.as_dict(config)}
    result = train_stage1(encoder, model, train, config.stage1, schedule, out_dir, val_images=val, meta=meta)
    print(f"stage-1 checkpoint: {result.checkpoint_path}")
    if result.val_psnr_history:
        print(f"final val PSNR: {result.val_psnr_history[-1][1]:.2f} dB")
    return 0


def cmd_distill(args) -> int:
    config = _load_config(args)
    out_dir = Path(config.out_dir)
    config_io.write_resolved(config, out_dir)
    train, val = _datasets(config)
    encoder, teacher, _ = _load_tokenizer(config, args.teacher)
    schedule = config.schedule.build()
    state = setup_distillation(encoder, teacher, config.distill, schedule)
    meta = {"config_fingerprint": config_io.fingerprint(config), "teacher": str(args.teacher)}
    result = train_distill(state, train, out_dir, val_images=val, meta=meta)
    print(f"student checkpoint: {result.checkpoint_path}")
    if result.val_psnr_history:
        print(f"final student val PSNR: {result.val_psnr_history[-1][1]:.2f} dB")
    return 0


def _save_image_grid(rows, path: Path):
    """rows: list of lists of (3, H, W) tensors in [-1, 1]."""
    from PIL import Image

    tiles = []
    for row in rows:
        imgs = [((img.clamp(-1, 1) + 1) * 127.5).byte().permute(1, 2, 0).cpu().numpy() for img in row]
        tiles.append(np.concatenate(imgs, axis=1))
    grid = np.concatenate(tiles, axis=0)
    Image.fromarray(grid).save(path)


def cmd_reconstruct(args) -> int:
    config = _load_config(args)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_io.write_resolved(config, out_dir)
    _, val = _datasets(config)
    encoder, model, ckpt = _load_tokenizer(config, args.checkpoint)
    schedule = config.schedule.build()
    images = val[: args.num]

    with torch.no_grad():
        z = encoder(images)
    if args.student or ckpt.kind == "distill":
        traj = student_decode(model, z, schedule, config.distill, make_generator(config.seed, "reconstruct"))
    else:
        traj = decode_multiscale(model, z, schedule, config.sampler, make_generator(config.seed, "reconstruct"))
    recon = traj.final.clamp(-1, 1)

    grid_path = out_dir / "reconstructions.png"
    _save_image_grid([[images[i], recon[i]] for i in range(images.shape[0])], grid_path)
    sidecar = {
        "forward_passes": traj.forward_passes,
        "stage_seconds": traj.stage_seconds,
        "psnr": [psnr(recon[i], images[i], data_range=2.0) for i in range(images.shape[0])],
    }
    (out_dir / "reconstructions.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {grid_path}")
    return 0


def _evaluate(config, encoder, model, ckpt_kind: str, val, batch_size: int = 16, student: bool = False):
    schedule = config.schedule.build()
    use_student = student or ckpt_kind == "distill"

    def decode(batch_z, tag):
        gen = make_generator(config.seed, "eval", tag)
        if use_student:
            return student_decode(model, batch_z, schedule, config.distill, gen)
        return decode_multiscale(model, batch_z, schedule, config.sampler, gen)

    recons = []
    psnrs, ssims = [], []
    nfe = 0
    with torch.no_grad():
        for lo in range(0, val.shape[0], batch_size):
            batch = val[lo : lo + batch_size]
            z = encoder(batch)
            traj = decode(z, lo)
            nfe += traj.forward_passes
            recon = traj.final.clamp(-1, 1)
            recons.append(recon)
            for i in range(batch.shape[0]):
                psnrs.append(psnr(recon[i], batch[i], data_range=2.0))
                ssims.append(ssim(recon[i], batch[i], data_range=2.0))
    recon_all = torch.cat(recons)

    extractor = PooledFeatures(FeaturePyramid(seed=stable_seed(config.seed, "rfid") % (2**31)))
    rfid = frechet_distance(feature_stats(extractor, val), feature_stats(extractor, recon_all))

    with torch.no_grad():
        z_bench = encoder(val[:batch_size])
    timed = measure_throughput(
        lambda batch: decode(z_bench[: batch.shape[0]], "bench"),
        [val[:batch_size]] * 3,
        warmup_batches=1,
        timed_batches=2,
    )
    return MetricsReport(
        rfid=rfid,
        psnr_mean=float(np.mean(psnrs)),
        ssim_mean=float(np.mean(ssims)),
        throughput=timed.images_per_second,
        forward_pass_count=nfe,
        config_fingerprint=config_io.fingerprint(config),
        extra={"decoder": "student" if use_student else "teacher", "num_images": int(val.shape[0])},
    )


def cmd_eval(args) -> int:
    config = _load_config(args)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_io.write_resolved(config, out_dir)
    _, val = _datasets(config)
    if args.num:
        val = val[: args.num]
    encoder, model, ckpt = _load_tokenizer(config, args.checkpoint)
    report = _evaluate(config, encoder, model, ckpt.kind, val, student=args.student)
    print(report.to_json())
    (out_dir / "metrics.json").write_text(report.to_json() + "\n")
    if args.csv:
        _append_csv(args.csv, report.as_dict())
    return 0


def _append_csv(path: Path, row: dict):
    path = Path(path)
    exists = path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(row.keys()))
        if not exists:
            writer.writeheader()
        writer.writerow(row)


def cmd_bench(args) -> int:
    config = _load_config(args)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, val = _datasets(config)
    schedule = config.schedule.build()
    batch = val[: args.batch_size]

    report: dict = {"schedule": {"num_stages": schedule.num_stages, "total_steps": schedule.total_steps}}

    encoder, teacher, _ = _load_tokenizer(config, args.teacher)
    with torch.no_grad():
        z = encoder(batch)
    teacher_sampler = config_io.SamplerConfig(cfg_scale=args.teacher_cfg, seed=config.seed)
    teacher_run = measure_throughput(
        lambda b: decode_multiscale(teacher, z[: b.shape[0]], schedule, teacher_sampler, make_generator(config.seed, "bench-t")),
        [batch] * (1 + args.batches),
        warmup_batches=1,
        timed_batches=args.batches,
    )
    teacher_nfe = schedule.total_steps * evaluations_per_step(args.teacher_cfg)
    report["teacher"] = {
        "images_per_second": teacher_run.images_per_second,
        "forward_passes_per_image": teacher_nfe,
    }

    if args.student:
        _, student, _ = _load_tokenizer(config, args.student)
        distill_cfg = DistillConfig(student_cfg_scale=args.student_cfg, seed=config.seed)
        student_run = measure_throughput(
            lambda b: student_decode(student, z[: b.shape[0]], schedule, distill_cfg, make_generator(config.seed, "bench-s")),
            [batch] * (1 + args.batches),
            warmup_batches=1,
            timed_batches=args.batches,
        )
        student_nfe = schedule.num_stages * evaluations_per_step(args.student_cfg)
        report["student"] = {
            "images_per_second": student_run.images_per_second,
            "forward_passes_per_image": student_nfe,
        }
        report["speedup"] = {
            "forward_pass_ratio": teacher_nfe / student_nfe,
            "wall_clock_ratio": student_run.images_per_second / teacher_run.images_per_second,
        }

    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    (out_dir / "bench.json").write_text(text + "\n")
    return 0


def _as_plain_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _sweep_schedule_settings(config, scales: int) -> config_io.ScheduleSettings:
    final = config.data.resolution
    base = final // (2 ** (scales - 1))
    budget = sum(config.schedule.steps_per_stage)
    per = max(1, budget // scales)
    steps = [per] * scales
    steps[-1] += budget - per * scales
    return config_io.ScheduleSettings(base_resolution=base, num_stages=scales, steps_per_stage=tuple(steps))


def cmd_sweep(args) -> int:
    config = _load_config(args)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_io.write_resolved(config, out_dir)

    axes = {"scales": [config.schedule.num_stages], "cfg": [config.distill.student_cfg_scale],
            "lambda_perc": [config.distill.lambda_perc]}
    for item in args.axis:
        name, _, values = item.partition("=")
        if name not in axes or not values:
            raise ValueError(f"unknown or empty sweep axis {item!r} (valid: scales, cfg, lambda_perc)")
        parsed = [json.loads(v) for v in values.split(",")]
        axes[name] = [int(v) for v in parsed] if name == "scales" else [float(v) for v in parsed]

    train, val = _datasets(config)
    if args.eval_images:
        val = val[: args.eval_images]
    csv_path = Path(args.out_csv) if args.out_csv else out_dir / "sweep.csv"
    if csv_path.exists():
        csv_path.unlink()

    rows = 0
    for scales in axes["scales"]:
        sched_settings = _sweep_schedule_settings(config, scales)
        schedule = sched_settings.build()
        cell_base = {**config_io.as_dict(config), "schedule": _as_plain_dict(sched_settings)}

        if args.teacher and scales == config.schedule.num_stages:
            teacher_path = Path(args.teacher)
            encoder, teacher, _ = _load_tokenizer(config, teacher_path)
        else:
            stage1_cfg = {**cell_base["stage1"], "max_steps": args.stage1_steps, "val_every": 0, "ckpt_every": 0}
            cell_cfg = config_io.from_dict({**cell_base, "stage1": stage1_cfg,
                                            "out_dir": str(out_dir / f"teacher_s{scales}")})
            encoder, teacher = config_io.build_models(cell_cfg)
            train_stage1(encoder, teacher, train, cell_cfg.stage1, schedule, cell_cfg.out_dir, val_images=None)
            encoder.requires_grad_(False)
            teacher.requires_grad_(False)

        for cfg_scale in axes["cfg"]:
            for lam in axes["lambda_perc"]:
                distill_cfg = {**cell_base["distill"], "student_cfg_scale": cfg_scale, "lambda_perc": lam,
                               "max_steps": args.distill_steps, "val_every": 0, "ckpt_every": 0}
                cell_cfg = config_io.from_dict({
                    **cell_base,
                    "distill": distill_cfg,
                    "out_dir": str(out_dir / f"cell_s{scales}_cfg{cfg_scale}_lp{lam}"),
                })
                state = setup_distillation(copy.deepcopy(encoder), copy.deepcopy(teacher),
                                           cell_cfg.distill, schedule)
                train_distill(state, train, cell_cfg.out_dir, val_images=None)
                report = _evaluate(cell_cfg, state.encoder, state.student, "distill", val)
                _append_csv(csv_path, {
                    "scales": scales,
                    "cfg": cfg_scale,
                    "lambda_perc": lam,
                    "rfid": report.rfid,
                    "psnr": report.psnr_mean,
                    "ssim": report.ssim_mean,
                    "throughput": report.throughput,
                })
                rows += 1
                print(f"sweep cell done: scales={scales} cfg={cfg_scale} lambda_perc={lam} ({rows} rows)")

    print(f"sweep complete: {rows} rows in {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msflow", description="Multi-scale flow-matching image tokenizer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Stage 1: train encoder and multi-step decoder")
    _add_config_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="Stage 2: distill a one-step-per-scale student")
    _add_config_args(p)
    p.add_argument("--teacher", type=Path, required=True, help="stage-1 checkpoint")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("reconstruct", help="encode and decode images, writing a side-by-side grid")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--student", action="store_true", help="decode with the one-step-per-scale rollout")
    p.add_argument("--num", type=int, default=8)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("eval", help="compute the metrics report for a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--student", action="store_true")
    p.add_argument("--num", type=int, default=0, help="evaluate only the first N validation images")
    p.add_argument("--csv", type=Path, default=None, help="also append a CSV row here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="throughput comparison of teacher and student decoders")
    _add_config_args(p)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--student", type=Path, default=None)
    p.add_argument("--teacher-cfg", type=float, default=1.0)
    p.add_argument("--student-cfg", type=float, default=1.0)
    p.add_argument("--batches", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("sweep", help="ablation grid over scale count, guidance scale, and perceptual weight")
    _add_config_args(p)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2,...",
                   help="sweep axis: scales, cfg, or lambda_perc")
    p.add_argument("--teacher", type=Path, default=None,
                   help="reuse this teacher for cells matching the configured scale count")
    p.add_argument("--stage1-steps", type=int, default=200, help="teacher training budget per scale count")
    p.add_argument("--distill-steps", type=int, default=100, help="distillation budget per cell")
    p.add_argument("--eval-images", type=int, default=32)
    p.add_argument("--out-csv", type=Path, default=None)
    p.set_defaults(fn=cmd_sweep)
    return parser


def cli(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return cli(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
