"""Command-line entry point: ``pccodec <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint, data
from .bitstream import Bitstream, compress, decompress
from .codec import get_config, mac_count
from .metrics import RAPoint, bd_metrics, pareto_front, read_ra_csv, write_ra_csv

log = logging.getLogger("pccodec")


class CLIError(Exception):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PCCODEC_THREADS", "1")))
    except ValueError:
        raise CLIError("PCCODEC_THREADS must be an integer") from None


def _dump(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _k(n: float) -> str:
    """Two significant figures with a k suffix, like the MAC table."""
    v = float(f"{n / 1000:.2g}")
    return f"{v:g}k"


def _load_cloud_arg(spec: str, points: int, seed: int) -> data.PointCloud:
    """``file.off`` or ``dataset.bin:INDEX`` (test split, then train on ``train:INDEX``)."""
    path, _, index = spec.partition(":")
    p = Path(path)
    if not p.exists():
        raise CLIError(f"no such file: {path}")
    raw = p.read_bytes()
    if data.is_off(raw):
        return data.load_cloud(p, points, seed)
    if raw[:4] != data.DATASET_MAGIC:
        raise CLIError(f"{path}: neither an OFF mesh nor a packed dataset")
    ds = data.read_dataset(p)
    split = ds.test
    if index.startswith("train:"):
        split, index = ds.train, index[6:]
    try:
        i = int(index or 0)
        return split[i]
    except (ValueError, IndexError):
        raise CLIError(f"bad dataset record index {index!r}") from None


# -- subcommands --------------------------------------------------------------


def cmd_ingest(a) -> int:
    ds = data.ingest(a.modelnet_dir, a.points, a.seed, workers=_threads())
    data.write_dataset(ds, a.out)
    _dump({"train": len(ds.train), "test": len(ds.test), "classes": len(ds.classes), "points": a.points})
    return 0


def cmd_synth(a) -> int:
    from .synthetic import write_corpus

    write_corpus(a.out, a.train, a.test, a.seed)
    return 0


def _split_val(x, y, frac: float, seed: int):
    if frac <= 0:
        return x, y, None, None
    idx = np.random.default_rng(seed).permutation(len(x))
    n_val = int(round(frac * len(x)))
    v, t = idx[:n_val], idx[n_val:]
    return x[t], y[t], x[v], y[v]


def _train_one(args):
    from .train import TrainSpec, train_and_save

    spec_kw, dataset, out, val_frac, log_path = args
    spec = TrainSpec(**spec_kw)
    ds = data.read_dataset(dataset)
    x, y = data.as_arrays(ds.train)
    if x.shape[1] != spec.points:
        raise CLIError(f"dataset has {x.shape[1]} points per cloud but --points is {spec.points}")
    xt, yt, xv, yv = _split_val(x, y, val_frac, spec.seed)
    model, history = train_and_save(spec, xt, yt, Path(out), xv, yv, log_path=log_path)
    return history


def _spec_kw(a, lmbda=None) -> dict:
    return dict(
        config=a.config,
        points=a.points,
        lmbda=float(lmbda if lmbda is not None else a.lmbda),
        lr=a.lr,
        batch_size=a.batch,
        epochs=a.epochs,
        patience=a.patience,
        seed=a.seed,
    )


def cmd_train(a) -> int:
    log_path = a.log or str(Path(a.out).with_suffix(".jsonl"))
    history = _train_one((_spec_kw(a), a.dataset, a.out, a.val_frac, log_path))
    if a.figure:
        from .plotting import training_figure

        training_figure(history, a.figure)
    _dump({"checkpoint": a.out, "log": log_path, "epochs": len(history), "final": history[-1] if history else None})
    return 0


def cmd_compress(a) -> int:
    model, _ = checkpoint.load(a.ckpt)
    cloud = _load_cloud_arg(a.input, model.config.points, a.seed)
    stream = compress(cloud.points, model)
    Path(a.out).write_bytes(stream.to_bytes())
    _dump({"out": a.out, "payload_bits": stream.rate_bits, "points": len(cloud.points)})
    return 0


def cmd_decompress(a) -> int:
    model, _ = checkpoint.load(a.ckpt)
    stream = Bitstream.from_bytes(Path(a.input).read_bytes())
    logits = decompress(stream, model)
    _dump({"top1": int(np.argmax(logits)), "logits": [float(v) for v in logits], "payload_bits": stream.rate_bits})
    return 0


def cmd_evaluate(a) -> int:
    from .train import evaluate

    model, meta = checkpoint.load(a.ckpt)
    ds = data.read_dataset(a.dataset)
    x, y = data.as_arrays(ds.test)
    lmbda = float(meta.get("spec", {}).get("lmbda", float("nan")))
    ev = evaluate(model, x, y, lmbda=lmbda, name=str(a.ckpt))
    write_ra_csv([ev.point], a.out)
    if a.figure:
        from .plotting import ra_figure

        ra_figure({model.config.name: [ev.point]}, a.figure)
    _dump({"rate_bits": ev.point.rate_bits, "estimated_rate_bits": ev.estimated_rate, "top1": ev.point.top1})
    return 0


def cmd_sweep(a) -> int:
    from .plotting import ra_figure
    from .train import evaluate

    lambdas = [float(v) for v in a.lambdas.split(",") if v.strip()]
    if not lambdas:
        raise CLIError("--lambdas is empty")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for lm in lambdas:
        stem = out / f"{a.config}_P{a.points}_lambda{lm:g}"
        jobs.append((_spec_kw(a, lm), a.dataset, str(stem) + ".ckpt", a.val_frac, str(stem) + ".jsonl"))
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            list(ex.map(_train_one, jobs))
    else:
        for j in jobs:
            _train_one(j)
    ds = data.read_dataset(a.dataset)
    x, y = data.as_arrays(ds.test)
    points: List[RAPoint] = []
    for (kw, _, ckpt, _, _) in jobs:
        model, _ = checkpoint.load(ckpt)
        points.append(evaluate(model, x, y, lmbda=kw["lmbda"], name=ckpt).point)
    write_ra_csv(points, out / "ra.csv")
    write_ra_csv(pareto_front(points), out / "pareto.csv")
    ra_figure({f"{a.config} P={a.points}": points}, out / "ra.png")
    _dump({"ra": str(out / "ra.csv"), "pareto": str(out / "pareto.csv"), "figure": str(out / "ra.png")})
    return 0


def cmd_bd(a) -> int:
    test = read_ra_csv(a.test)
    anchor = read_ra_csv(a.anchor)
    res = bd_metrics(pareto_front(test), pareto_front(anchor))
    if a.figure:
        from .plotting import ra_figure

        ra_figure({"test": test, "anchor": anchor}, a.figure)
    _dump(res.to_dict())
    return 0


def cmd_critical_points(a) -> int:
    model, _ = checkpoint.load(a.ckpt)
    cloud = _load_cloud_arg(a.input, model.config.points, a.seed)
    idx = model.critical_points(cloud.points)
    if a.figure:
        from .plotting import cloud_figure

        cloud_figure(cloud.points, a.figure, highlight=idx, title=f"{len(idx)} critical points")
    _dump({"indices": [int(i) for i in idx], "count": int(len(idx)), "latent": model.config.latent})
    return 0


def cmd_recon_train(a) -> int:
    from .train import recon_chamfer, save_recon, train_recon

    model, _ = checkpoint.load(a.ckpt)
    ds = data.read_dataset(a.dataset)
    x, _ = data.as_arrays(ds.train)
    xt, _ = data.as_arrays(ds.test)
    net, history = train_recon(model, x, epochs=a.epochs, batch_size=a.batch, seed=a.seed)
    save_recon(net, a.out)
    _dump({"out": a.out, "train_chamfer": history, "test_chamfer": recon_chamfer(model, net, xt)})
    return 0


def cmd_recon_run(a) -> int:
    from .entropy import quantize
    from .metrics import chamfer
    from .train import load_recon

    model, _ = checkpoint.load(a.ckpt)
    net = load_recon(a.recon)
    cloud = _load_cloud_arg(a.input, model.config.points, a.seed)
    y_hat = quantize(model.analyze(cloud.points))
    rec = net(y_hat)
    np.savetxt(a.out, rec, delimiter=",", header="x,y,z", comments="", fmt="%.6f")
    if a.figure:
        from .plotting import cloud_figure

        cloud_figure(rec, a.figure, title="reconstruction")
    _dump({"out": a.out, "chamfer": chamfer(cloud.points, rec)})
    return 0


def cmd_macs(a) -> int:
    cfg = get_config(a.config, a.points)
    enc, dec = mac_count(cfg)
    _dump(
        {
            "config": cfg.name,
            "points": cfg.points,
            "encoder_macs_per_point": enc,
            "decoder_macs": dec,
            "encoder_macs_total": enc * cfg.points,
            "encoder_rounded": _k(enc),
            "decoder_rounded": _k(dec),
        }
    )
    return 0


# -- parser ---------------------------------------------------------------


def _add_train_flags(p, sweep: bool = False):
    p.add_argument("--config", choices=("full", "lite", "micro"), required=True)
    p.add_argument("--points", type=int, default=1024)
    if not sweep:
        p.add_argument("--lambda", dest="lmbda", type=float, required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pccodec", description="Learned point-cloud codec for classification.", allow_abbrev=False
    )
    ap.add_argument("--config-file", help="TOML file of default flag values; explicit flags win")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="sample a ModelNet-style OFF tree into a packed dataset")
    p.add_argument("--modelnet-dir", required=True)
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write the procedural 40-class OFF corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--test", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one codec at one lambda")
    _add_train_flags(p)
    p.add_argument("--log", help="JSON-lines training log (default: <out>.jsonl)")
    p.add_argument("--figure", help="write a training-curve PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="encode one cloud to a bitstream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="cloud.off or dataset.bin[:INDEX|:train:INDEX]")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a bitstream to class logits")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("evaluate", help="rate/accuracy of a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--figure")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train and evaluate a lambda family")
    _add_train_flags(p, sweep=True)
    p.add_argument("--lambdas", default="10,30,100,300,1000,3000,8000,16000")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bd", help="Bjontegaard-Delta metrics between two RA CSVs")
    p.add_argument("--test", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--figure")
    p.set_defaults(func=cmd_bd)

    p = sub.add_parser("critical-points", help="indices of the critical point set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--figure")
    p.set_defaults(func=cmd_critical_points)

    p = sub.add_parser("recon-train", help="fit a reconstruction network on frozen latents")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_recon_train)

    p = sub.add_parser("recon-run", help="reconstruct a cloud from its latent")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--figure")
    p.set_defaults(func=cmd_recon_run)

    p = sub.add_parser("macs", help="MAC counts for a configuration")
    p.add_argument("--config", choices=("full", "lite", "micro"), required=True)
    p.add_argument("--points", type=int, default=1024)
    p.set_defaults(func=cmd_macs)
    return ap


def _apply_config_file(ap: argparse.ArgumentParser, argv: List[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config-file")
    known, rest = pre.parse_known_args(argv)
    subparsers = ap._subparsers._group_actions[0].choices
    # only --config-file and -v may precede the subcommand
    command = next((t for t in rest if not t.startswith("-")), None)
    if not known.config_file or command not in subparsers:
        return ap.parse_args(argv)
    import tomli

    try:
        with open(known.config_file, "rb") as f:
            conf = tomli.load(f)
    except (OSError, tomli.TOMLDecodeError) as e:
        ap.error(f"cannot read config file {known.config_file}: {e}")
    # top-level keys apply to every subcommand; a [command] table overrides them
    defaults = {k.replace("-", "_"): v for k, v in conf.items() if not isinstance(v, dict)}
    defaults.update({k.replace("-", "_"): v for k, v in conf.get(command, {}).items()})
    if "lambda" in defaults:
        defaults["lmbda"] = defaults.pop("lambda")
    subparser = subparsers[command]
    known_dests = {a.dest for a in subparser._actions}
    subparser.set_defaults(**{k: v for k, v in defaults.items() if k in known_dests})
    for action in subparser._actions:
        if action.dest in defaults:
            action.required = False
    return ap.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = _apply_config_file(ap, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError, KeyError, RuntimeError, FloatingPointError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        sys.stderr.write(f"pccodec {args.command}: error: {msg}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
