"""Command-line entry point: ``mofs <verb> ...``.

Exit codes: 0 success, 2 usage/configuration error, 3 numerical failure,
1 any other package error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .config import ABLATION_FLAGS, TrainConfig
from .data import generate_darcy, generate_navier_stokes, load_data_dir, load_dataset, save_dataset
from .errors import ConfigurationError, MOFSError, NumericalError

log = logging.getLogger("mofs")


def _config_arguments(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="JSON file mirroring TrainConfig")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, action="store_true", default=None)
        elif f.type in ("int", int):
            g.add_argument(flag, dest=f.name, type=int)
        elif f.type in ("float", float):
            g.add_argument(flag, dest=f.name, type=float)
        else:
            g.add_argument(flag, dest=f.name)


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    return cfg.override(**overrides)


def _datasets(args):
    data = load_data_dir(args.data)
    if not data:
        raise ConfigurationError(f"no *.mofs datasets found in {args.data}")
    return data


def _split_train(data, leave_out):
    names = [d.name for d in data]
    for name in leave_out or []:
        if name not in names:
            raise ConfigurationError(f"unknown operator {name!r}; have {names}")
    return [d for d in data if d.name not in (leave_out or [])]


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.family == "darcy":
        ds = generate_darcy(args.beta, args.n, args.size, seed=args.seed)
    else:
        ds = generate_navier_stokes(args.ic_seed, args.n, args.size, T_final=args.t_final)
    if out.suffix != ".mofs":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{ds.name}.mofs"
    print(save_dataset(ds, out))
    return 0


def cmd_pretrain(args) -> int:
    from .training import pretrain_encoder

    cfg = _config(args)
    torch.manual_seed(cfg.seed)
    train = _split_train(_datasets(args), args.leave_out)
    res = pretrain_encoder(train, cfg)
    path = ckpt.save_pretrain(res.encoder, res.heads, args.out,
                              meta={"config": cfg.to_dict(), "operators": [d.name for d in train]})
    _write_rows(res.trace, Path(args.out).with_suffix(".trace.csv"))
    print(f"pretrain loss {res.trace[0]['L_pretrain']:.4f} -> {res.trace[-1]['L_pretrain']:.4f}; wrote {path}")
    return 0


def _write_rows(rows, path: Path) -> None:
    import csv

    if not rows:
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


def cmd_train(args) -> int:
    from .training import build_model, default_text_encoder, prepare_operator, train_stage, write_trace

    cfg = _config(args)
    train = _split_train(_datasets(args), args.leave_out)
    enc = default_text_encoder(cfg)
    operators = [prepare_operator(d, enc) for d in train]
    if args.stage == 1:
        state = None
        if args.init:
            encoder, _, _ = ckpt.load_pretrain(args.init)
            state = encoder.state_dict()
        elif not cfg.no_pretrain:
            log.warning("stage 1 without --init: the encoder starts from random weights")
        model = build_model(cfg, operators, state)
    else:
        if not args.init:
            raise ConfigurationError("stage 2 needs --init <stage-1 checkpoint>")
        model, _, _ = ckpt.load_model(args.init)
        torch.manual_seed(cfg.seed)
    res = train_stage(model, operators, cfg, args.stage, args.stage_epochs)
    path = ckpt.save_model(model, args.out, meta={"stage": args.stage, "config": cfg.to_dict(),
                                                  "operators": [d.name for d in train]})
    write_trace(res.trace, Path(args.out).with_suffix(".trace.csv"))
    print(f"stage {args.stage} loss {res.trace[0]['total']:.4f} -> {res.trace[-1]['total']:.4f}; wrote {path}")
    return 0


def _emit_report(report, out) -> None:
    print(report.to_text(), end="")
    if out:
        out = Path(out)
        report.write_csv(out.with_suffix(".csv"))
        out.with_suffix(".txt").write_text(report.to_text())


def cmd_eval(args) -> int:
    from .evaluation import evaluate_leave_one_out

    cfg = _config(args)
    report = evaluate_leave_one_out(_datasets(args), cfg, runs=args.runs, leave_out=args.leave_out,
                                    baselines=args.baselines)
    _emit_report(report, args.out)
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import run_ablation

    cfg = _config(args)
    flags = [tuple(f.split("+")) for f in args.flags] if args.flags else None
    report = run_ablation(_datasets(args), cfg, flags, runs=args.runs, leave_out=args.leave_out,
                          baselines=args.baselines)
    _emit_report(report, args.out)
    return 0


def cmd_plot(args) -> int:
    from .plotting import emit_plots

    data = _datasets(args)
    names = [d.name for d in data]
    if args.operator and args.operator not in names:
        raise ConfigurationError(f"unknown operator {args.operator!r}")
    ds = data[names.index(args.operator)] if args.operator else data[0]
    pre = s1 = s2 = None
    if args.pretrain:
        enc, heads, _ = ckpt.load_pretrain(args.pretrain)
        pre = (enc, heads)
    if args.stage1:
        s1 = ckpt.load_model(args.stage1)[0]
    if args.stage2:
        s2 = ckpt.load_model(args.stage2)[0]
    for path in emit_plots(args.out, ds, pre, s1, s2, index=args.index, rho=args.rho, J=args.J):
        print(path)
    return 0


def cmd_describe(args) -> int:
    from .text import HashTextEncoder, TextProjection, compute_statistics, pooled_text_features, render_description

    ds = load_dataset(args.data)
    sentence = render_description(ds.name, compute_statistics(ds))
    print(sentence)
    if args.checkpoint:
        model = ckpt.load_model(args.checkpoint)[0]
        proj, d_bert = model.text_proj, model.config.d_bert
    else:
        torch.manual_seed(args.seed)
        proj, d_bert = TextProjection(args.d_bert, args.d), args.d_bert
    with torch.no_grad():
        e = proj(pooled_text_features([sentence], HashTextEncoder(d_bert=d_bert))).mean(0)
    path = Path(str(args.data) + ".textvec")
    path.write_bytes(e.numpy().astype("<f4").tobytes())
    print(path)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mofs", description="Few-shot multimodal operator learning.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="write one synthetic operator dataset")
    g.add_argument("--family", choices=("darcy", "ns"), required=True)
    g.add_argument("--beta", type=float, default=1.0, help="Darcy forcing constant")
    g.add_argument("--ic-seed", type=int, default=0, help="Navier-Stokes initial-condition seed")
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--t-final", type=float, default=1.0)
    g.add_argument("--out", required=True, type=Path, help="*.mofs file or a directory")
    g.set_defaults(func=cmd_generate)

    def with_data(sp):
        sp.add_argument("--data-dir", "--data", dest="data", required=True, type=Path,
                        help="directory of *.mofs files")
        sp.add_argument("--leave-out", action="append", help="operator name (repeatable)")
        _config_arguments(sp)
        return sp

    sp = with_data(sub.add_parser("pretrain", help="masked-reconstruction pretraining"))
    sp.add_argument("--epochs", dest="pretrain_epochs", type=int)
    sp.add_argument("--out", required=True, type=Path)
    sp.set_defaults(func=cmd_pretrain)

    sp = with_data(sub.add_parser("train", help="few-shot training stage"))
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--epochs", dest="stage_epochs", type=int)
    sp.add_argument("--init", type=Path, help="pretrain checkpoint (stage 1) or stage-1 checkpoint (stage 2)")
    sp.add_argument("--out", required=True, type=Path)
    sp.set_defaults(func=cmd_train)

    for verb, fn, helptext in (("eval", cmd_eval, "leave-one-operator-out evaluation"),
                               ("ablate", cmd_ablate, "ablation columns under the same protocol")):
        sp = with_data(sub.add_parser(verb, help=helptext))
        sp.add_argument("--runs", type=int, default=3)
        sp.add_argument("--baselines", nargs="*", default=["fno", "deeponet", "unet", "mean"],
                        choices=["fno", "deeponet", "unet", "mean"])
        sp.add_argument("--out", type=Path, help="report path prefix (.csv and .txt)")
        if verb == "ablate":
            sp.add_argument("--flags", nargs="*",
                            help=f"flag sets, '+'-joined for combinations; from {', '.join(ABLATION_FLAGS)}")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("plot", help="diagnostic figures from checkpoints")
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--operator")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--pretrain", type=Path)
    sp.add_argument("--stage1", type=Path)
    sp.add_argument("--stage2", type=Path)
    sp.add_argument("--rho", type=float, default=0.5)
    sp.add_argument("--J", type=int, default=4)
    sp.add_argument("--out", required=True, type=Path)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("describe", help="print an operator's statistics sentence")
    sp.add_argument("--data", required=True, type=Path, help="a single *.mofs file")
    sp.add_argument("--checkpoint", type=Path, help="model checkpoint providing the text projection")
    sp.add_argument("--d", type=int, default=32)
    sp.add_argument("--d-bert", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"mofs: error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"mofs: numerical failure: {exc}", file=sys.stderr)
        return 3
    except MOFSError as exc:
        print(f"mofs: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
