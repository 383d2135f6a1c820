"""Command-line entry point: ``bus-vlp <command> [--config PATH] [--set key=value ...] [--out DIR]``."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .errors import BusError, ConfigError

METRIC_COLUMNS = ("step", "beta", "itc", "itm", "mlm", "prefix", "ptm", "total", "u", "s", "wall_ms")
MASK_COLUMNS = ("grid_index", "a", "p", "a_dot", "selected_kpe", "selected_tpa")


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_key_values(path: Path, values: dict) -> Path:
    path.write_text("".join(f"{key}={_fmt(value)}\n" for key, value in values.items()))
    return path


def _model(cfg: RunConfig, checkpoint: str | None):
    from .model import BUSModel
    from .schedule import load_checkpoint

    model = BUSModel(cfg)
    if checkpoint:
        load_checkpoint(checkpoint, model)
    return model


# ------------------------------------------------------------------ commands


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    from .schedule import TrainState, load_checkpoint, save_checkpoint, train

    model = _model(cfg, None)
    state = TrainState.fresh(cfg.seed)
    if args.resume:
        load_checkpoint(args.resume, model, state)
    ckpt_dir = out / "checkpoints"
    with open(out / "metrics.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRIC_COLUMNS)

        def on_step(report, st):
            losses = report.losses
            writer.writerow(
                [report.step, _fmt(report.beta)]
                + [_fmt(getattr(losses, name)) for name in ("itc", "itm", "mlm", "prefix", "ptm", "total")]
                + [report.kept, report.seeds, f"{report.wall_ms:.3f}"]
            )
            handle.flush()
            if cfg.checkpoint_every and (report.step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"step-{report.step + 1:06d}.bin", model, st)

        train(cfg, model, state, on_step)
    if cfg.steps > 0:
        save_checkpoint(ckpt_dir / "final.bin", model, state)
    return 0


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    from .evaluate import evaluate

    report = evaluate(_model(cfg, args.checkpoint), beta=args.beta if args.beta is not None else cfg.beta_max)
    write_key_values(out / "eval.txt", {"samples": report.samples, "ptm_auc": report.ptm_auc, **report.losses})
    print(f"ptm_auc={report.ptm_auc:.4f}")
    return 0


def cmd_select(cfg: RunConfig, out: Path, args) -> int:
    from .summarizer import kpe_select, tpa_select
    from .synthdata import generate
    from .tensor import no_grad

    model = _model(cfg, args.checkpoint)
    sample = generate(args.sample_seed, "paired", cfg.image_size)
    beta = args.beta if args.beta is not None else cfg.beta_max
    with no_grad():
        text = model.encode_text(model.pack([sample.caption]))
        patches = model.vision.embed(sample.pixels[None])
        reduced, record = model.vision.forward(patches, text, cfg, beta, stop_at_k=True)
        kept = kpe_select(reduced, record.a_dot, cfg.alpha, False) if cfg.kpe_enabled else reduced
        seeds = tpa_select(kept, record.a_dot, cfg.gamma)
    kept_set = set(kept.grid_indices[0, 1:].tolist())
    seed_set = set(seeds.grid_indices[0, 1:].tolist())
    masks = out / "masks"
    masks.mkdir(exist_ok=True)
    path = masks / f"sample-{args.sample_seed}.csv"
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(MASK_COLUMNS)
        for i in range(cfg.n_patches):
            writer.writerow(
                [i, _fmt(record.a.data[0, i]), _fmt(record.p[0, i]), _fmt(record.a_dot[0, i]),
                 int(i in kept_set), int(i in seed_set)]
            )
    print(path)
    return 0


def cmd_flops(cfg: RunConfig, out: Path, args) -> int:
    from .flops import STAGES, baseline_flops, model_flops, sweep

    n_txt = cfg.max_text_len
    bus = model_flops(cfg, n_txt=n_txt, include_decoder=args.include_decoder)
    base = baseline_flops(cfg, n_txt=n_txt, include_decoder=args.include_decoder)
    values = {f"bus.{stage}": getattr(bus, stage) for stage in STAGES}
    values.update({"bus.total": bus.total, "baseline.total": base.total, "ratio": bus.total / base.total})
    write_key_values(out / "flops.txt", values)
    print(f"bus={bus.total / 1e9:.2f}G baseline={base.total / 1e9:.2f}G ratio={bus.total / base.total:.4f}")
    if args.sweep:
        resolutions = [int(r) for r in args.resolutions.split(",")] if args.resolutions else None
        if args.ks:
            ks = tuple(int(k) for k in args.ks.split(","))
        else:
            ks = tuple(k for k in (4, 6, 8) if k < cfg.vit_layers) or tuple(range(1, cfg.vit_layers))
        rows = sweep(cfg, ks=ks, gammas=(cfg.gamma,), resolutions=resolutions, n_txt=n_txt)
        with open(out / "flops.csv", "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(("k", "alpha", "gamma", "image_size", "bus_flops", "baseline_flops", "ratio"))
            writer.writerows([(*row[:6], _fmt(row[6])) for row in rows])
    return 0


def cmd_bench(cfg: RunConfig, out: Path, args) -> int:
    from .flops import bench_forward

    result = bench_forward(cfg)
    write_key_values(
        out / "bench.txt",
        {"batch": result.batch, "iterations": result.iterations, "latency_ms": result.latency_ms,
         "throughput": result.throughput, "cv": result.cv},
    )
    print(f"latency={result.latency_ms:.2f}ms throughput={result.throughput:.1f}/s")
    return 0


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    from .model import rng_streams
    from .schedule import sample_batch
    from .synthdata import write_shard

    samples = sample_batch(rng_streams(cfg.seed)["data"], args.kind, args.count, cfg.image_size)
    (out / "data").mkdir(exist_ok=True)
    path = write_shard(out / "data" / f"{args.kind}.bin", samples)
    print(path)
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    from .gradcheck import run_suite

    results = run_suite(cfg, cfg.seed)
    lines = [f"{'ok' if r.ok else 'FAIL'} {r.name} {r.rel_error:.3e}" for r in results]
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    for r in failed:
        print(f"FAIL {r.name} rel_error={r.rel_error:.3e}", file=sys.stderr)
    return 1 if failed else 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "select": cmd_select,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "gen-data": cmd_gen_data,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")

    parser = argparse.ArgumentParser(prog="bus-vlp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    train = sub.add_parser("train", parents=[common], help="run the pretraining loop")
    train.add_argument("--resume", help="checkpoint holding weights and trainer state")
    helps = {"eval": "losses and PTM AUC on held-out synthetic data", "select": "dump saliency and masks for one sample"}
    for name in ("eval", "select"):
        p = sub.add_parser(name, parents=[common], help=helps[name])
        p.add_argument("--checkpoint", help="weights to load (fresh init when omitted)")
        p.add_argument("--beta", type=float, help="saliency mixing weight (default: schedule.beta_max)")
    sub.choices["select"].add_argument("--sample-seed", type=int, default=0)
    flops = sub.add_parser("flops", parents=[common], help="analytical FLOPs report")
    flops.add_argument("--sweep", action="store_true", help="also write flops.csv over k and alpha")
    flops.add_argument("--resolutions", help="comma-separated image sizes for the sweep")
    flops.add_argument("--ks", help="comma-separated pruning layers (default: 4,6,8 where the ViT is deep enough)")
    flops.add_argument("--include-decoder", action="store_true")
    sub.add_parser("bench", parents=[common], help="single-threaded forward benchmark")
    gen = sub.add_parser("gen-data", parents=[common], help="write a synthetic shard")
    gen.add_argument("--kind", choices=("paired", "region"), default="paired")
    gen.add_argument("--count", type=int, default=100)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective-config.txt").write_text(dump_config(cfg))
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (BusError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
