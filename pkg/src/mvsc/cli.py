"""Command line entry point: ``mvsc <subcommand> [flags]``.

Subcommands: synth, constraints, pretrain, finetune, eval, export-embeddings.
Any subcommand accepts ``--config FILE`` holding flat ``key = value`` lines
(keys are flag names without the leading dashes); explicit flags win.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .branches import build_branches, default_layer_spec, encode, load_branch, pretrain, save_branch
from .errors import AlignmentError, CheckpointError, ConfigError, DataError, DivergenceError, ParseError
from .metrics import evaluate
from .trainer import (
    Finetuner,
    TrainingConfig,
    format_record_csv,
    init_cluster_state,
    load_checkpoint,
    save_finetuner,
)

log = logging.getLogger("mvsc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_DIVERGENCE = 4


# ---------------------------------------------------------------- config file


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(parser, key, value):
    for action in parser._actions:
        if action.dest != key:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            return value.lower() in ("1", "true", "yes", "on")
        if action.nargs in ("+", "*"):
            items = value.replace(",", " ").split()
            return [action.type(v) if action.type else v for v in items]
        return action.type(value) if action.type else value
    raise ConfigError(f"unknown config key {key!r}")


def _layer_specs(text, dims):
    """``"64,64,80:10;64,64:15"`` -> per-view (hidden, embedding)."""
    if not text:
        return [default_layer_spec(v, d) for v, d in enumerate(dims)]
    specs = []
    for chunk in text.split(";"):
        hidden, _, emb = chunk.partition(":")
        if not emb:
            raise ConfigError(f"layer spec {chunk!r} needs 'hidden,...:embedding'")
        specs.append(([int(h) for h in hidden.split(",") if h.strip()], int(emb)))
    if len(specs) != len(dims):
        raise ConfigError(f"{len(specs)} layer specs for {len(dims)} views")
    return specs


# ------------------------------------------------------------------ commands


def _load_dataset(args, rescale=True):
    if not args.views:
        raise ConfigError("--views is required")
    for p in args.views:
        if not Path(p).exists():
            raise ConfigError(f"view file {p} does not exist")
    labels = getattr(args, "labels", None)
    if labels is not None and not Path(labels).exists():
        raise ConfigError(f"label file {labels} does not exist")
    ds = data.load_views(args.views, labels)
    return data.rescale(ds) if rescale else ds


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")


def _out_dir(args) -> Path:
    _require(args, "out")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_synth(args):
    dims = args.dims or [20 + 10 * v for v in range(args.num_views)]
    ds = data.make_blobs(
        args.n, args.num_views, args.k, dims, args.separation, args.noise, args.seed
    )
    out = _out_dir(args)
    paths = data.save_views(ds, out)
    data.save_labels(ds.labels, out / "labels.txt")
    if args.beta is not None:
        cs = data.generate_constraints(ds.labels, args.beta, args.seed)
        data.save_constraints(cs, out / "constraints.txt")
    print(json.dumps({"views": [str(p) for p in paths], "labels": str(out / "labels.txt")}))


def cmd_constraints(args):
    _require(args, "labels", "out")
    labels = data.load_labels(args.labels)
    cs = data.generate_constraints(labels, args.beta, args.seed)
    data.save_constraints(cs, args.out)
    ml = int(np.sum(cs.c == 1))
    print(json.dumps({"pairs": len(cs), "must_link": ml, "cannot_link": len(cs) - ml}))


def cmd_pretrain(args):
    ds = _load_dataset(args)
    out = _out_dir(args)
    branches = build_branches(ds.dims, seed=args.seed, layer_specs=_layer_specs(args.layers, ds.dims))
    history = pretrain(
        branches, data.MultiViewDataset(ds.views), epochs=args.epochs, batch_size=args.batch,
        lr=args.eta, seed=args.seed,
    )
    for v, b in enumerate(branches):
        save_branch(b, out / f"branch_{v}.ckpt")
    header = "epoch," + ",".join(f"view_{v}" for v in range(len(branches)))
    rows = [f"{e}," + ",".join(repr(float(x)) for x in row) for e, row in enumerate(history)]
    (out / "pretrain_loss.csv").write_text("\n".join([header] + rows) + "\n")
    print(json.dumps({"final_loss": [float(x) for x in history[-1]], "out": str(out)}))


def _load_pretrained(directory, n_views):
    directory = Path(directory)
    branches = []
    for v in range(n_views):
        p = directory / f"branch_{v}.ckpt"
        if not p.exists():
            raise ConfigError(f"missing pretrained checkpoint {p}")
        branches.append(load_branch(p))
    return branches


def _training_config(args, ds) -> TrainingConfig:
    k = args.k
    if k is None:
        if ds.labels is None:
            raise ConfigError("--k is required when no labels are given")
        k = int(np.unique(ds.labels).size)
    return TrainingConfig(
        k=k, gamma=args.gamma, lam=args.lam, alpha=args.alpha, beta=args.beta, lr=args.eta,
        batch_size=args.batch, update_interval=args.interval, delta=args.delta,
        max_iter=args.max_iter, seed=args.seed, fsp=not args.no_fsp, semi=not args.no_semi,
    ).validate()


def cmd_finetune(args):
    ds = _load_dataset(args)
    out = _out_dir(args)
    config = _training_config(args, ds)
    branches = _load_pretrained(args.pretrained or out, ds.n_views)
    for b, d in zip(branches, ds.dims):
        if b.input_dim != d:
            raise ConfigError(f"checkpoint expects input width {b.input_dim}, view has {d}")

    constraints = None
    if config.uses_constraints:
        if args.constraints:
            if not Path(args.constraints).exists():
                raise ConfigError(f"constraint file {args.constraints} does not exist")
            constraints = data.load_constraints(args.constraints, n=ds.n)
        elif ds.labels is not None:
            constraints = data.generate_constraints(ds.labels, config.beta, config.seed)
        if constraints is None or len(constraints) == 0:
            raise ConfigError(
                "constraint loss enabled but no constraints available "
                "(pass --constraints, or --labels with --beta > 0, or use --no-semi)"
            )

    state, init_labels = init_cluster_state(branches, ds, config.k, config.seed, config.alpha)
    ft = Finetuner(branches, ds, constraints, config, state, init_labels)
    result = ft.run()
    save_finetuner(out / "final.ckpt", ft)
    (out / "train_record.csv").write_text(format_record_csv(result.history))
    data.save_labels(result.labels, out / "labels.txt")
    summary = {"iterations": result.iterations, "halted": result.halted}
    if ds.labels is not None:
        summary["initial"] = evaluate(ds.labels, init_labels)
        summary["final"] = evaluate(ds.labels, result.labels)
    print(json.dumps(summary))


def cmd_eval(args):
    _require(args, "labels", "predictions")
    y = data.load_labels(args.labels)
    s = data.load_labels(args.predictions)
    if y.size != s.size:
        raise AlignmentError(f"{y.size} labels vs {s.size} predictions")
    report = evaluate(y, s)
    print(json.dumps(report))
    print(f"{'metric':<8}{'value':>10}")
    for key, val in report.items():
        print(f"{key:<8}{val:>10.4f}")


def cmd_export_embeddings(args):
    ds = _load_dataset(args)
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
        branches = load_checkpoint(args.checkpoint).branches
    elif args.pretrained:
        branches = _load_pretrained(args.pretrained, ds.n_views)
    else:
        raise ConfigError("pass --checkpoint or --pretrained")
    if len(branches) != ds.n_views:
        raise ConfigError(f"checkpoint has {len(branches)} branches for {ds.n_views} views")
    out = _out_dir(args)
    zs = []
    for v, (b, x) in enumerate(zip(branches, ds.views)):
        if b.input_dim != x.shape[1]:
            raise ConfigError(f"view {v} has width {x.shape[1]}, branch expects {b.input_dim}")
        z = encode(b, x)
        data.save_view(z, out / f"z_view_{v}.txt")
        zs.append(z)
    data.save_view(np.hstack(zs), out / "z_concat.txt")
    print(json.dumps({"out": str(out), "n": ds.n, "widths": [z.shape[1] for z in zs]}))


# -------------------------------------------------------------------- parser


def _add_training_flags(p):
    p.add_argument("--k", type=int, default=None, help="number of clusters (default: label count)")
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-6)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--interval", type=int, default=None, help="refresh interval (default ceil(n/batch))")
    p.add_argument("--delta", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=20000)
    p.add_argument("--no-fsp", action="store_true", help="drop reconstruction loss, freeze decoders")
    p.add_argument("--no-semi", action="store_true", help="disable the pairwise-constraint loss")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvsc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, help="key = value file; flags override it")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("synth", cmd_synth, "write synthetic multi-view blobs")
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--num-views", type=int, default=2)
    p.add_argument("--dims", type=int, nargs="+", default=None)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=1.5)
    p.add_argument("--beta", type=float, default=None, help="also write constraints.txt")
    p.add_argument("--out", default=None)

    p = add("constraints", cmd_constraints, "sample pairwise constraints from labels")
    p.add_argument("--labels", default=None)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--out", default=None)

    p = add("pretrain", cmd_pretrain, "pretrain one autoencoder per view")
    p.add_argument("--views", nargs="+", default=None)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--eta", type=float, default=1e-3)
    p.add_argument("--layers", default=None, help='per-view "h1,h2:emb" joined by ";"')
    p.add_argument("--out", default=None)

    p = add("finetune", cmd_finetune, "joint finetuning with clustering and constraint losses")
    p.add_argument("--views", nargs="+", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--constraints", default=None)
    p.add_argument("--pretrained", default=None, help="directory with branch_<v>.ckpt (default --out)")
    _add_training_flags(p)
    p.add_argument("--out", default=None)

    p = add("eval", cmd_eval, "score predictions against labels")
    p.add_argument("--labels", default=None)
    p.add_argument("--predictions", default=None)

    p = add("export-embeddings", cmd_export_embeddings, "write per-view and concatenated embeddings")
    p.add_argument("--views", nargs="+", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--pretrained", default=None)
    p.add_argument("--out", default=None)
    return parser


def parse_args(argv=None):
    """Parse flags, seeding each subcommand's defaults from ``--config`` if given."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        subparsers = parser._subparsers._group_actions[0].choices
        command = next((tok for tok in argv if tok in subparsers), None)
        if command is not None:
            sub = subparsers[command]
            values = read_config_file(known.config)
            sub.set_defaults(**{k: _coerce(sub, k, v) for k, v in values.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
