"""Command line entry point: ``uncertnerf {gen-data,train,eval,ablate,robustness,render}``."""
import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data_io import load_dataset, save_dataset
from .losses import MODES
from .scene import DatasetConfig, make_dataset
from .train import (
    Trainer,
    TrainConfig,
    ablate,
    apply_overrides,
    evaluate,
    format_table,
    load_checkpoint,
    nearest_sources,
    normalize_heatmap,
    read_kv_file,
    render_with_sources,
    renderer_from_checkpoint,
    robustness_sweep,
)

log = logging.getLogger("uncertnerf")

OUTPUT_ENV = "UNCERTNERF_OUTPUT_DIR"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


class JsonlLog:
    """Line-delimited JSON metrics sink."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w")

    def __call__(self, record: dict):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()
        if "iteration" in record and record["iteration"] % 100 == 0:
            log.info("iter %d loss %.4f mse %.4f", record["iteration"], record["loss"], record["mse"])

    def close(self):
        self.fh.close()


def _split_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _configs(args):
    """TrainConfig and dataset overrides from ``--config`` and ``--set``; ``data.*`` keys go to the dataset."""
    kv = read_kv_file(args.config) if getattr(args, "config", None) else {}
    kv.update(_split_overrides(getattr(args, "set", None)))
    data_kv = {k[5:]: v for k, v in kv.items() if k.startswith("data.")}
    train_kv = {k: v for k, v in kv.items() if not k.startswith("data.")}
    return apply_overrides(TrainConfig(), train_kv), data_kv


def _dataset(args, data_kv=None):
    if getattr(args, "data", None):
        if data_kv:
            raise SystemExit("data.* overrides only apply to generated datasets, not --data")
        return load_dataset(args.data)
    cfg = apply_overrides(DatasetConfig(), data_kv or {})
    return make_dataset(args.data_seed, cfg)


def _out_dir(args, name):
    out = Path(args.out) if args.out else output_root() / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(out: Path, name: str, rows: dict, key_name: str):
    table = format_table(rows, key_name)
    print(table)
    (out / f"{name}.txt").write_text(table + "\n")
    (out / f"{name}.json").write_text(json.dumps({str(k): r.to_dict() for k, r in rows.items()}, indent=1))


def cmd_gen_data(args):
    data_kv = _split_overrides(args.set)
    ds = make_dataset(args.seed, apply_overrides(DatasetConfig(), data_kv))
    out = _out_dir(args, "data")
    save_dataset(ds, out)
    print(f"wrote {len(ds.views)} views ({len(ds.distractor_views)} with distractors) to {out}")


def cmd_train(args):
    cfg, data_kv = _configs(args)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=args.iterations)
    ds = _dataset(args, data_kv)
    out = _out_dir(args, f"train-{cfg.hash()}")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    sink = JsonlLog(out / "metrics.jsonl")
    try:
        trainer = Trainer(cfg, ds, out)
        trainer.train(log_fn=sink)
        path = trainer.save(out / "checkpoint.pt")
    finally:
        sink.close()
    print(f"checkpoint: {path}")


def _load_model(args):
    ckpt = load_checkpoint(args.checkpoint)
    renderer, target_net = renderer_from_checkpoint(ckpt)
    cfg = TrainConfig(**ckpt["config"])
    return ckpt, cfg, renderer, target_net


def cmd_eval(args):
    ckpt, cfg, renderer, target_net = _load_model(args)
    ds = _dataset(args)
    n_source = args.n_source or cfg.n_source_eval
    out = _out_dir(args, "eval")
    rep = evaluate(renderer, ds, n_source, target_net, config_hash=cfg.hash(), label=cfg.loss.mode)
    with open(out / "eval.jsonl", "a") as fh:
        fh.write(json.dumps({"event": "eval", "n_source": n_source, **rep.to_dict()}) + "\n")
    _write_report(out, "eval", {cfg.loss.mode: rep}, "mode")


def cmd_ablate(args):
    cfg, data_kv = _configs(args)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=args.iterations)
    ds = _dataset(args, data_kv)
    out = _out_dir(args, f"ablate-{cfg.hash()}")
    sink = JsonlLog(out / "metrics.jsonl")
    try:
        reports = ablate(cfg, ds, args.modes.split(","), out, sink)
    finally:
        sink.close()
    _write_report(out, "ablation", reports, "mode")


def cmd_robustness(args):
    ds = _dataset(args)
    out = _out_dir(args, "robustness")
    if args.checkpoint:
        _, cfg, renderer, _ = _load_model(args)
    else:
        cfg, _ = _configs(args)
        if args.iterations is not None:
            cfg = dataclasses.replace(cfg, iterations=args.iterations)
        sink = JsonlLog(out / "metrics.jsonl")
        try:
            trainer = Trainer(cfg, ds, out)
            trainer.train(log_fn=sink)
            trainer.save(out / "checkpoint.pt")
        finally:
            sink.close()
        renderer = trainer.renderer
    levels = [int(x) for x in args.levels.split(",")]
    rows = robustness_sweep(renderer, ds, levels, args.n_source or cfg.n_source_eval, cfg.hash())
    _write_report(out, "robustness", rows, "level")


def _save_png(path: Path, img: np.ndarray):
    img = np.clip(img, 0, 1)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def cmd_render(args):
    _, cfg, renderer, target_net = _load_model(args)
    ds = _dataset(args)
    out = _out_dir(args, "render")
    n_source = args.n_source or cfg.n_source_eval
    sources = nearest_sources(ds, args.view, n_source)
    img, beta_s = render_with_sources(renderer, ds, args.view, sources)
    stem = f"view_{args.view:03d}"
    _save_png(out / f"{stem}.png", img.numpy())
    written = [out / f"{stem}.png"]
    if args.heatmaps:
        _save_png(out / f"{stem}_beta_s.png", normalize_heatmap(beta_s.double().numpy()))
        written.append(out / f"{stem}_beta_s.png")
        if target_net is not None:
            with torch.no_grad():
                beta_t = target_net(torch.from_numpy(ds.views[args.view].image))[..., 0]
            _save_png(out / f"{stem}_beta_t.png", normalize_heatmap(beta_t.double().numpy()))
            written.append(out / f"{stem}_beta_t.png")
        else:
            log.warning("checkpoint has no target-uncertainty weights; skipping the beta_t heatmap")
    for p in written:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uncertnerf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, config=False):
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./runs)")
        if data:
            sp.add_argument("--data", help="dataset directory written by gen-data")
            sp.add_argument("--data-seed", type=int, default=0, help="seed for a generated dataset when --data is absent")
        if config:
            sp.add_argument("--config", help="key=value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
            sp.add_argument("--iterations", type=int)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dataset override, e.g. distractor_level=3")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp, config=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the eval targets")
    sp.add_argument("checkpoint")
    sp.add_argument("--n-source", type=int)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate one model per loss mode")
    sp.add_argument("--modes", default=",".join(MODES))
    common(sp, config=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("robustness", help="PSNR versus number of distractor-bearing sources")
    sp.add_argument("--checkpoint", help="skip training and sweep this checkpoint")
    sp.add_argument("--levels", default="0,1,2,3")
    sp.add_argument("--n-source", type=int)
    common(sp, config=True)
    sp.set_defaults(func=cmd_robustness)

    sp = sub.add_parser("render", help="render one view, optionally with uncertainty heatmaps")
    sp.add_argument("checkpoint")
    sp.add_argument("--view", type=int, required=True)
    sp.add_argument("--heatmaps", action="store_true")
    sp.add_argument("--n-source", type=int)
    common(sp)
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
