"""``viralnet`` command line: synth, category, train, eval, gradcheck,
visualize and neighbors.

Machine interfaces are JSON: results go to stdout, and any failure is a
single JSON line on stderr with exit code 2 (usage/config), 3 (data) or
4 (numerical).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import stn
from .data import (DataError, SynthConfig, load_image, load_manifest, make_pairs, read_pairs,
                   save_image, synth_generate, write_pairs)
from .numcore import DimensionError, NumericalError, make_rng
from .ranker import ConfigError, resize
from .train import (CheckpointError, TrainConfig, evaluate, grad_check, load_category_checkpoint,
                    load_checkpoint, pretrain_category, save_category_checkpoint, save_checkpoint,
                    train, write_metrics)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ARCHS = ("base", "m", "c", "mc", "siamese", "regression")
PATH_KEYS = ("data", "pairs", "ckpt", "category_ckpt", "out", "image")
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
SYNTH_KEYS = {f.name for f in fields(SynthConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj, pretty=False):
    sys.stdout.write(json.dumps(obj, indent=2 if pretty else None, sort_keys=True) + "\n")


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "exit": code, "message": str(message)},
                                sort_keys=True) + "\n")
    return code


# ------------------------------------------------------------------ config

def effective_config(args):
    """Config file values overridden by any flags given on the command line."""
    cfg = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise UsageError(f"--config: cannot read {args.config} ({exc.strerror})")
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config: invalid JSON ({exc})")
        if not isinstance(cfg, dict):
            raise UsageError("--config: top level must be an object")
    overrides = {"variant": args.arch, "seed": args.seed, "epochs": args.epochs,
                 "learning_rate": args.lr, "k": args.k, "n": getattr(args, "n", None),
                 "tolerance": getattr(args, "tolerance", None)}
    for key in PATH_KEYS:
        overrides[key] = getattr(args, key, None)
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    return cfg


def _train_config(cfg):
    return TrainConfig.from_dict({k: v for k, v in cfg.items() if k in TRAIN_KEYS})


def _need(cfg, key):
    val = cfg.get(key)
    if val is None:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return val


def _manifest(cfg):
    path = Path(_need(cfg, "data"))
    if not path.exists():
        raise UsageError(f"--data: manifest not found: {path}")
    return load_manifest(path)


def _out_dir(cfg):
    out = Path(_need(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg, out):
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _category(cfg, variant):
    path = cfg.get("category_ckpt")
    if variant in ("c", "mc"):
        if path is None:
            raise ConfigError(f"--category-ckpt is required for --arch {variant}")
        return load_category_checkpoint(path)
    if path is not None:
        raise ConfigError(f"--arch {variant} takes no category checkpoint")
    return None


def _checkpoint(cfg):
    path = Path(_need(cfg, "ckpt"))
    if not path.exists():
        raise UsageError(f"--ckpt: not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, args):
    out = _out_dir(cfg)
    synth = {k: v for k, v in cfg.items() if k in SYNTH_KEYS}
    if "signal_side" in synth and synth["signal_side"] is not None:
        synth["signal_side"] = tuple(synth["signal_side"])
    manifest, _ = synth_generate(SynthConfig(**synth), make_rng(cfg.get("seed", 0)), out)
    _echo_config(cfg, out)
    _emit({"images": len(manifest), "manifest": str(out / "manifest.jsonl"),
           "placements": str(out / "placements.jsonl")}, args.pretty)
    return EXIT_OK


def cmd_category(cfg, args):
    manifest = _manifest(cfg)
    out = _out_dir(cfg)
    tc = _train_config(cfg)
    res = pretrain_category(tc, manifest)
    save_category_checkpoint(res.net, out / "category.vnet", res.train_accuracy, tc.seed)
    _echo_config(cfg, out)
    _emit({"train_accuracy": res.train_accuracy, "n_categories": res.n_categories,
           "checkpoint": str(out / "category.vnet")}, args.pretty)
    return EXIT_OK


def cmd_train(cfg, args):
    manifest = _manifest(cfg)
    tc = _train_config(cfg)
    category = _category(cfg, tc.variant)
    out = _out_dir(cfg)
    pairs = read_pairs(cfg["pairs"], manifest) if cfg.get("pairs") else None
    _echo_config(cfg, out)
    t0 = time.perf_counter()
    result = train(tc, manifest, category_net=category, pairs=pairs)
    save_checkpoint(result.net, out / "checkpoint.vnet", epoch=tc.epochs, seed=tc.seed)
    write_metrics(result.metrics, out / "metrics.jsonl")
    write_pairs(result.heldout_pairs, manifest, out / "heldout_pairs.jsonl")
    final = result.metrics[-1] if result.metrics else {}
    _emit({"checkpoint": str(out / "checkpoint.vnet"), "epochs": tc.epochs,
           "final": final, "seconds": round(time.perf_counter() - t0, 3)}, args.pretty)
    return EXIT_OK


def cmd_eval(cfg, args):
    net = _checkpoint(cfg)
    manifest = _manifest(cfg)
    pairs = read_pairs(_need(cfg, "pairs"), manifest)
    if not pairs:
        raise UsageError(f"--pairs: no pairs in {cfg['pairs']}")
    report = evaluate(net, manifest.load_images(), pairs)
    _emit(report.to_dict(), args.pretty)
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    variants = [cfg["variant"]] if "variant" in cfg else list(ARCHS)
    tolerance = float(cfg.get("tolerance", 1e-5))
    step = float(cfg.get("step", 1e-5))
    n = int(cfg.get("n_params_sampled", 8))
    reports = []
    for v in variants:
        tc = _train_config(dict(cfg, variant=v))
        t0 = time.perf_counter()
        rep = grad_check(tc, n_params_sampled=n, step=step, tolerance=tolerance)
        d = rep.to_dict()
        d["seconds"] = round(time.perf_counter() - t0, 3)
        reports.append(d)
    ok = all(r["passed"] for r in reports)
    if args.pretty:
        for r in reports:
            print(f"{r['variant']}: {'PASS' if r['passed'] else 'FAIL'}  checked {r['checked']}  "
                  f"skipped {r['skipped']}  ok {r['fraction_ok']:.4f}  max {r['max_rel']:.2e}")
            for t in r["tensors"]:
                print(f"  {t['name']:<28} checked {t['checked']:>3}  skipped {t['skipped']:>3}  "
                      f"max {t['max_rel']:.2e}")
    else:
        _emit({"passed": ok, "reports": reports})
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_visualize(cfg, args):
    net = _checkpoint(cfg)
    image = load_image(_need(cfg, "image"))
    out = _out_dir(cfg)
    nc = net.config
    if image.shape != (nc.channels, nc.image_size, nc.image_size):
        raise DimensionError("visualize", "image", (nc.channels, nc.image_size, nc.image_size),
                             image.shape)
    res = net.forward(image[None])
    save_image(image, out / "original.png")
    save_image(resize(image[None], nc.roi_size)[0], out / "global.png")
    levels = []
    for j in range(nc.levels):
        src = res.cache["levels"][j][0]
        x, y = res.cache["levels"][j][1:3]
        roi = stn.sample(src, x, y)[0]
        name = f"roi_level{j + 1}.png"
        save_image(roi, out / name)
        s, tx, ty = res.theta[0, j].tolist()
        levels.append({"level": j + 1, "input_size": int(src.shape[-1]), "s": s, "tx": tx, "ty": ty,
                       "out_of_bounds": bool(res.lam[0, j]),
                       "spatial_loss": float(res.spatial[0, j]), "file": name})
    meta = {"variant": nc.variant, "score": float(res.v[0]), "levels": levels}
    with open(out / "rois.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _emit(meta, args.pretty)
    return EXIT_OK


def cmd_neighbors(cfg, args):
    net = _checkpoint(cfg)
    manifest = _manifest(cfg)
    k = int(cfg.get("k", 5))
    if k < 1:
        raise UsageError("--k must be positive")
    query = load_image(_need(cfg, "image"))
    images = manifest.load_images()
    feats = np.concatenate([net.forward(images[i:i + 128]).t_r for i in range(0, len(images), 128)])
    q = net.forward(query[None]).t_r[0]
    dist = np.sqrt(((feats - q) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[:k]
    _emit({"query": str(cfg["image"]), "k": k,
           "neighbors": [{"path": manifest.entries[i].path, "score": manifest.entries[i].score,
                          "distance": float(dist[i])} for i in order]}, args.pretty)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "category": cmd_category, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "visualize": cmd_visualize, "neighbors": cmd_neighbors}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override its values")
    common.add_argument("--arch", choices=ARCHS)
    common.add_argument("--seed", type=int)
    common.add_argument("--data", help="manifest (JSON lines)")
    common.add_argument("--pairs", help="pair list (JSON lines)")
    common.add_argument("--ckpt", help="scoring checkpoint")
    common.add_argument("--category-ckpt", dest="category_ckpt")
    common.add_argument("--out", help="output directory")
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--k", type=int)
    common.add_argument("--pretty", action="store_true", help="human-readable output")
    parser = _Parser(prog="viralnet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common]).add_argument("--n", type=int)
    sub.add_parser("category", parents=[common])
    sub.add_parser("train", parents=[common])
    sub.add_parser("eval", parents=[common])
    sub.add_parser("gradcheck", parents=[common]).add_argument("--tolerance", type=float)
    sub.add_parser("visualize", parents=[common]).add_argument("--image")
    sub.add_parser("neighbors", parents=[common]).add_argument("--image")
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, "usage" if isinstance(exc, UsageError) else "config", exc)
    except (DataError, CheckpointError, DimensionError, OSError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (TypeError, ValueError) as exc:
        return _fail(EXIT_USAGE, "config", exc)


if __name__ == "__main__":
    sys.exit(main())
