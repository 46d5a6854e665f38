"""Command-line entry point.

Every training/eval subcommand reads an optional ``--config`` file (JSON or
YAML with ``RunConfig`` keys) and applies flag overrides on top; nested model
settings can be overridden with ``--set recon.num_slots=500``.  Failures are
reported as one JSON object on stderr with exit code 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError

logger = logging.getLogger("flowvad")


def _csv(cast):
    def parse(text):
        try:
            return [cast(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass
    return key.strip(), value


def _run_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--preset", help="named base configuration (e.g. synth-desk); --config and flags override it")
    g.add_argument("--config", type=Path, help="JSON/YAML file with RunConfig keys")
    g.add_argument("--data-dir", help="dataset root (default: $HF2VAD_DATA_DIR)")
    g.add_argument("--out-dir", help="directory for checkpoints and outputs")
    g.add_argument("--t", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--k", dest="recon_flow_count", type=int, help="number of reconstructed flows (1..t)")
    g.add_argument("--sample-mode", choices=("deterministic", "stochastic"))
    g.add_argument("--set", dest="overrides", type=_kv, action="append", default=[], metavar="KEY=VALUE")


FLAG_KEYS = (
    "data_dir",
    "out_dir",
    "t",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "recon_flow_count",
    "sample_mode",
    "finetune_epochs",
    "finetune_lr_scale",
    "w_r",
    "w_p",
    "smooth_window",
    "score_norm",
)


def build_config(args, stage: str):
    from .config import RunConfig, load_config
    from .presets import preset

    try:
        data = preset(args.preset) if args.preset else {}
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    for key, value in (load_config(args.config) if args.config else {}).items():
        if key in ("recon", "pred"):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    for key in FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    for key, value in args.overrides:
        head, _, tail = key.partition(".")
        if tail:
            if head not in ("recon", "pred"):
                raise ConfigError(f"nested override only for recon.* / pred.*, got {key}")
            data.setdefault(head, {})[tail] = value
        else:
            data[head] = value
    data["stage"] = stage
    return RunConfig.from_dict(data)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowvad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-recon", help="stage 1: train the flow reconstruction network")
    _run_args(p)

    p = sub.add_parser("train-pred", help="stage 2: train the frame predictor")
    _run_args(p)
    p.add_argument("--recon", type=Path, required=True, help="reconstruction checkpoint")
    p.add_argument("--k-sweep", type=_csv(int), help="comma list of k values; trains and evaluates each")

    p = sub.add_parser("finetune", help="stage 3: joint finetuning")
    _run_args(p)
    p.add_argument("--recon", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--finetune-lr-scale", type=float)

    p = sub.add_parser("eval", help="score the test split")
    _run_args(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--w-r", type=float)
    p.add_argument("--w-p", type=float)
    p.add_argument("--smooth-window", type=int)
    p.add_argument("--score-norm", choices=("global", "per_video"))
    p.add_argument("--out", type=Path, help="output directory (default: <out-dir>/eval)")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("toy-mnist", help="digit-2 normality ablation over variants")
    p.add_argument("--variants", type=_csv(str), default=["a", "c", "f"])
    p.add_argument("--seeds", type=_csv(int), default=[0])
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--subset", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--data-dir", help="folder holding mnist/ (default: $HF2VAD_DATA_DIR)")
    p.add_argument("--out", type=Path, default=Path("runs/toy"))
    p.add_argument("--set", dest="overrides", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="ReconConfig override, e.g. num_slots=100")

    p = sub.add_parser("synth-gen", help="write the synthetic sprite benchmark")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--config", type=Path, help="JSON/YAML file with SynthConfig keys")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--video-length", type=int)
    p.add_argument("--anomalies", type=_csv(str), help="subset of speed,reverse,teleport")

    p = sub.add_parser("plot", help="anomaly curves from a score dump")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _train_recon(args):
    from .stages import train_recon

    cfg = build_config(args, "train_recon")
    ckpt = train_recon(cfg)
    return {"checkpoint": str(Path(cfg.out_dir) / "recon"), "final_loss": ckpt.history["recon_loss"][-1]}


def _train_pred(args):
    from .stages import k_sweep, train_pred

    cfg = build_config(args, "train_pred")
    if args.k_sweep:
        return {"k_sweep": k_sweep(cfg, args.recon, args.k_sweep)}
    ckpt = train_pred(cfg, args.recon)
    return {"checkpoint": str(Path(cfg.out_dir) / "pred"), "final_loss": ckpt.history["pred_loss"][-1]}


def _finetune(args):
    from .stages import finetune

    cfg = build_config(args, "finetune")
    ckpt = finetune(cfg, args.recon, args.pred)
    return {"checkpoint": str(Path(cfg.out_dir) / "finetune"), "final_loss": ckpt.history["joint_loss"][-1]}


def _eval(args):
    from .stages import evaluate

    cfg = build_config(args, "eval")
    res = evaluate(cfg, args.ckpt, args.out, make_plots=not args.no_plots)
    return {"scores": str(res.dump_path), "auroc": res.metrics["auroc"]}


def _toy(args):
    from ..synthlab.toy import load_mnist, run_mnist_toy

    data = load_mnist(args.data_dir)
    overrides = dict(args.overrides)
    reports = []
    for seed in args.seeds:
        report = run_mnist_toy(
            args.variants,
            epochs=args.epochs,
            subset_size=args.subset,
            seed=seed,
            data=data,
            out_dir=args.out,
            batch_size=args.batch_size,
            lr=args.lr,
            **overrides,
        )
        reports.append(report.to_dict())
    return {"reports": reports}


def _synth(args):
    from ..synthlab import SynthConfig, gen_synthetic
    from .config import load_config

    data = load_config(args.config) if args.config else {}
    data["seed"] = args.seed
    for key, value in (
        ("n_train", args.n_train),
        ("n_test", args.n_test),
        ("video_length", args.video_length),
        ("anomaly_kinds", args.anomalies),
    ):
        if value is not None:
            data[key] = value
    cfg = SynthConfig(**data)
    manifests = gen_synthetic(cfg, args.out)
    return {k: str(args.out / f"{k}.jsonl") for k in manifests}


def _plot(args):
    from .plots import plot_score_dump

    return {"plots": plot_score_dump(args.scores, args.out)}


COMMANDS = {
    "train-recon": _train_recon,
    "train-pred": _train_pred,
    "finetune": _finetune,
    "eval": _eval,
    "toy-mnist": _toy,
    "synth-gen": _synth,
    "plot": _plot,
}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - reported as structured error
        logger.debug("command failed", exc_info=True)
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
