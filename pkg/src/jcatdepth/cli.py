"""Command-line entry point: ``jcatdepth <command> ...``.

Failures print a single ``error: <kind>: <message>`` line on stderr and exit 1;
argparse usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .config import ModelConfig, resolve
from .tensor import ConfigError


def _load_json(path) -> dict:
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None


def _model_config_from_file(path) -> ModelConfig:
    """Accept a bare model config or a training config with a ``model`` entry."""
    doc = _load_json(path)
    if "model" in doc:
        return resolve(doc["model"])
    return resolve(doc)


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    doc = _load_json(args.config)
    if args.out:
        doc["output_dir"] = args.out
    cfg = TrainConfig.from_dict(doc)
    log = None if args.quiet else (lambda s: print(s, flush=True))
    res = train(cfg, resume=args.resume, log=log)
    print(json.dumps({"best_rmse_mm": res.best_rmse, "best_epoch": res.best_epoch,
                      "output_dir": res.output_dir}))
    return 0


def cmd_eval(args) -> int:
    from .train import EvalSpec, evaluate, model_from_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    sweep = args.sparsity if args.sparsity else [None]
    for n in sweep:
        spec = EvalSpec(sparsity=n, lines=args.lines, spn_iters=args.spn_iters, n_val=args.n_val,
                        dump_dir=args.dump, csv_path=args.csv)
        res = evaluate(ckpt, spec, model=model)
        row = {"sparsity": n, "lines": args.lines, "spn_iters": args.spn_iters,
               **res.refined.to_dict(), "d0_rmse_mm": res.d0.rmse_mm,
               "baseline_rmse_mm": res.baseline.rmse_mm if res.baseline else None}
        print(json.dumps(row))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import SUITE, run_suite

    names = args.module or list(SUITE)
    reports = run_suite(names, seed=args.seed)
    ok = True
    for name, rep in reports.items():
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'} {name:18s} max_rel_err={rep.max_rel_err:.2e} "
              f"checked={rep.n_checked}")
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    from .train import model_from_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    cfg = model.cfg
    H, W = (ckpt.train_config or {}).get("image_size", cfg.pos_grid)
    print(f"config {cfg.name}  variant {cfg.variant}  input {H}x{W}  meta {json.dumps(ckpt.meta, sort_keys=True)}")
    with T.default_dtype(ckpt.meta.get("dtype", "float64")), T.no_grad():
        model.eval()
        image = np.zeros((1, 3, H, W))
        sparse = np.zeros((1, 1, H, W))
        raw = model.embed(T.Tensor(image), T.Tensor(sparse))
        pyr = model.encoder(raw)
    print(f"{'stage':10s} {'shape':22s} params")
    print(f"{'embed':10s} {str(raw.shape):22s} {model.embed.num_parameters()}")
    stages = [("stem+f1", pyr.f1, model.encoder.stem.num_parameters() + model.encoder.half.num_parameters())]
    for i, (f, st) in enumerate(zip([pyr.f2, pyr.f3, pyr.f4, pyr.f5], model.encoder.stages)):
        stages.append((f"jcat{i + 2}", f, st.num_parameters()))
    for name, f, n in stages:
        print(f"{name:10s} {str(f.shape):22s} {n}")
    print(f"{'decoder':10s} {str((1, cfg.stem_channels, H, W)):22s} {model.decoder.num_parameters()}")
    print(f"{'heads':10s} {str((1, 3 + 3 * cfg.spn_neighbors, H, W)):22s} {model.heads.num_parameters()}")
    print(f"{'total':10s} {'':22s} {model.num_parameters()}")
    return 0


def cmd_paramcount(args) -> int:
    from .model import count_parameters

    cfg = _model_config_from_file(args.config)
    print(count_parameters(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jcatdepth", description="Depth completion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override output_dir")
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its validation set")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--spn-iters", type=int)
    e.add_argument("--sparsity", type=int, nargs="+", help="one or more sample counts")
    e.add_argument("--lines", type=int, help="scan lines out of 64 instead of random samples")
    e.add_argument("--n-val", type=int)
    e.add_argument("--dump", help="directory for PGM dumps of D0, DK and |error|")
    e.add_argument("--csv", help="append metrics rows to this CSV")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--module", action="append", help="restrict to a check (repeatable)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="per-stage shapes and parameter counts")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("paramcount", help="total parameters for a config")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_paramcount)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # one machine-parsable line instead of a traceback
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
