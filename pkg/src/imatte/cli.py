"""Command-line entry points: train, evaluate, simulate, synth, serve.

Every command resolves its flags against an optional TOML/JSON config file
(CLI flags win), rejects unknown config keys, and writes the resolved config
next to its outputs. Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import simulate as sim_mod, synth as synth_mod, training
from .conflict import empty_conflict_map
from .core import AlphaMatte, InstanceMask, binarize, list_sample_dirs, load_sample
from .localizer import InstanceLocalizer, IscnConfig
from .metrics import compute_report, reports_to_csv, reports_to_json
from .pipeline import InteractivePipeline
from .refiner import MatteRefiner, MrnConfig

COMMAND_DEFAULTS = {
    "train": {
        "data": None, "regime": "decoupled", "steps_iscn": 200, "steps_mrn": 200,
        "lr": training.BASE_LR, "batch_size": 4, "prompt_mode": "click", "sim_rounds": 1,
        "seed": 0, "out": "runs/train",
    },
    "evaluate": {
        "data": None, "checkpoint_iscn": None, "checkpoint_mrn": None, "oracle": False,
        "prompt_mode": "click", "seed": 0, "out": "runs/evaluate",
    },
    "simulate": {
        "data": None, "checkpoint_iscn": None, "checkpoint_mrn": None, "oracle": False,
        "mode": "click", "rounds": 5, "noc_threshold": 0.9, "noc_cap": sim_mod.DEFAULT_NOC_CAP,
        "aggregate": False, "seed": 0, "out": "runs/simulate",
    },
    "synth": {
        "count": 10, "instances": "2:6", "size": 64, "seed": 0, "out": "runs/synth",
    },
    "serve": {
        "checkpoint_iscn": None, "checkpoint_mrn": None, "host": "127.0.0.1", "port": 8000,
        "ttl": 3600.0, "persist_dir": None, "seed": 0, "out": "runs/serve",
    },
}


class CliError(RuntimeError):
    pass


def load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def resolve_config(command: str, file_cfg: dict, cli_values: dict, parser) -> dict:
    defaults = COMMAND_DEFAULTS[command]
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        parser.error(f"unknown config keys for {command}: {sorted(unknown)}")
    resolved = dict(defaults)
    resolved.update(file_cfg)
    for key, value in cli_values.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _write_resolved(out_dir: Path, command: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}_config.json").write_text(json.dumps(cfg, indent=2, default=str))


def _load_dataset(data_dir: str):
    if not data_dir:
        raise CliError("--data is required")
    dirs = list_sample_dirs(data_dir)
    if not dirs:
        raise CliError(f"no samples found under {data_dir}")
    return [(d.name, *load_sample(d)) for d in dirs]


def _load_pipeline(cfg: dict) -> InteractivePipeline:
    if cfg.get("checkpoint_iscn"):
        localizer = training.load_localizer(cfg["checkpoint_iscn"])
    else:
        print("warning: no localizer checkpoint given; using untrained weights", file=sys.stderr)
        localizer = InstanceLocalizer()
    if cfg.get("checkpoint_mrn"):
        refiner = training.load_refiner(cfg["checkpoint_mrn"])
    else:
        print("warning: no refiner checkpoint given; using untrained weights", file=sys.stderr)
        refiner = MatteRefiner()
    return InteractivePipeline(localizer, refiner)


class OracleModel:
    """Returns ground truth regardless of prompts; used to validate plumbing."""

    def __init__(self, record):
        self.record = record

    def predict_round(self, image, prompts, prev_mask, conflict):
        mask = InstanceMask(binarize(self.record.matte.alpha).astype(np.float32))
        return mask, self.record.matte


def cmd_train(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    _write_resolved(out_dir, "train", cfg)
    torch.manual_seed(cfg["seed"])
    samples = [(img, recs) for _, img, recs in _load_dataset(cfg["data"])]
    settings = training.TrainSettings(
        regime=cfg["regime"], steps_iscn=int(cfg["steps_iscn"]), steps_mrn=int(cfg["steps_mrn"]),
        lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]),
        prompt_mode=cfg["prompt_mode"], sim_rounds=int(cfg["sim_rounds"]),
    )

    history: dict[str, list[float]] = {}
    checkpoints: list[str] = []
    if settings.regime == "decoupled":
        localizer = InstanceLocalizer()
        history["iscn"] = training.train_localizer(localizer, samples, settings)
        refiner = MatteRefiner()
        history["mrn"] = training.train_refiner(localizer, refiner, samples, settings)
        training.save_checkpoint(out_dir / "localizer.npz", localizer, "localizer",
                                 localizer.cfg.to_dict())
        training.save_checkpoint(out_dir / "refiner.npz", refiner, "refiner",
                                 refiner.cfg.to_dict())
        checkpoints = ["localizer.npz", "refiner.npz"]
    elif settings.regime == "coupled-training":
        localizer = InstanceLocalizer()
        refiner = MatteRefiner()
        history["joint"] = training.train_coupled_training(localizer, refiner, samples, settings)
        training.save_checkpoint(out_dir / "localizer.npz", localizer, "localizer",
                                 localizer.cfg.to_dict())
        training.save_checkpoint(out_dir / "refiner.npz", refiner, "refiner",
                                 refiner.cfg.to_dict())
        checkpoints = ["localizer.npz", "refiner.npz"]
    else:  # coupled-network
        model = training.DirectMattingNetwork()
        history["direct"] = training.train_coupled_network(model, samples, settings)
        training.save_checkpoint(out_dir / "direct.npz", model, "direct",
                                 model.localizer.cfg.to_dict())
        checkpoints = ["direct.npz"]

    first_loss = next(iter(history.values()))[0]
    (out_dir / "train_history.json").write_text(json.dumps(
        {"regime": settings.regime, "first_step_loss": first_loss, "history": history}, indent=2))
    print(f"regime={settings.regime} first_step_loss={first_loss:.10f}")
    for phase, losses in history.items():
        print(f"{phase}: {len(losses)} steps, final loss {losses[-1]:.6f}")
    print(f"checkpoints: {', '.join(str(out_dir / c) for c in checkpoints)}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    _write_resolved(out_dir, "evaluate", cfg)
    dataset = _load_dataset(cfg["data"])
    if not cfg["oracle"] and not cfg.get("checkpoint_iscn"):
        raise CliError("evaluate needs --checkpoint-iscn/--checkpoint-mrn or --oracle")
    pipeline = None if cfg["oracle"] else _load_pipeline(cfg)

    rows = []
    for i, (name, image, records) in enumerate(dataset):
        for j, record in enumerate(records):
            rng = np.random.default_rng([int(cfg["seed"]), i, j])
            prompts = training.draw_prompts(record, cfg["prompt_mode"], rng)
            model = OracleModel(record) if cfg["oracle"] else pipeline
            mask, matte = model.predict_round(
                image, prompts, None, empty_conflict_map(image.height, image.width))
            rows.append((f"{name}/inst{j}",
                         compute_report(matte, record.matte, mask,
                                        InstanceMask(binarize(record.matte.alpha).astype(np.float32)))))

    (out_dir / "metrics.csv").write_text(reports_to_csv(rows))
    (out_dir / "metrics.json").write_text(reports_to_json(rows))
    print(f"evaluated {len(rows)} instances; wrote {out_dir / 'metrics.csv'}")
    return 0


def cmd_simulate(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    _write_resolved(out_dir, "simulate", cfg)
    dataset = _load_dataset(cfg["data"])
    if not cfg["oracle"] and not cfg.get("checkpoint_iscn"):
        raise CliError("simulate needs --checkpoint-iscn/--checkpoint-mrn or --oracle")
    pipeline = None if cfg["oracle"] else _load_pipeline(cfg)

    traces = []
    for i, (name, image, records) in enumerate(dataset):
        for j, record in enumerate(records):
            policy = sim_mod.SimulationPolicy(mode=cfg["mode"], rounds=int(cfg["rounds"]),
                                              seed=int(cfg["seed"]) * 100003 + i * 101 + j)
            model = OracleModel(record) if cfg["oracle"] else pipeline
            traces.append(sim_mod.run_session(model, policy, image, record,
                                              aggregate=bool(cfg["aggregate"])))

    (out_dir / "traces.jsonl").write_text(sim_mod.traces_to_jsonl(traces))
    n_rounds = max(len(t) for t in traces)
    round_iou = [float(np.mean([t.rounds[r].iou for t in traces if len(t) > r]))
                 for r in range(n_rounds)]
    round_sad = [float(np.mean([t.rounds[r].sad for t in traces if len(t) > r]))
                 for r in range(n_rounds)]
    summary = {
        "sessions": len(traces),
        "mode": cfg["mode"],
        "noc": sim_mod.noc_at(traces, float(cfg["noc_threshold"]), int(cfg["noc_cap"])),
        "noc_threshold": cfg["noc_threshold"],
        "round_mean_iou": round_iou,
        "round_mean_sad": round_sad,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    _plot_rounds(out_dir / "rounds.png", round_iou, round_sad)
    print(f"simulated {len(traces)} sessions; NoC@{cfg['noc_threshold']:g} = {summary['noc']:.3f}")
    return 0


def _plot_rounds(path: Path, round_iou: list[float], round_sad: list[float]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rounds = list(range(1, len(round_iou) + 1))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(rounds, round_sad, marker="o")
    ax1.set_xlabel("round")
    ax1.set_ylabel("mean SAD")
    ax2.plot(rounds, round_iou, marker="o")
    ax2.set_xlabel("round")
    ax2.set_ylabel("mean IoU")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_synth(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    _write_resolved(out_dir, "synth", cfg)
    try:
        lo, hi = (int(x) for x in str(cfg["instances"]).split(":"))
    except ValueError:
        raise CliError(f"--instances expects LO:HI, got {cfg['instances']!r}")
    dirs = synth_mod.synthesize_dataset(out_dir, count=int(cfg["count"]), seed=int(cfg["seed"]),
                                        size=int(cfg["size"]), instance_range=(lo, hi))
    print(f"wrote {len(dirs)} samples under {out_dir}")
    return 0


def cmd_serve(cfg: dict) -> int:
    import uvicorn

    from .service import create_app

    out_dir = Path(cfg["out"])
    _write_resolved(out_dir, "serve", cfg)
    torch.manual_seed(cfg["seed"])
    pipeline = _load_pipeline(cfg)
    app = create_app(pipeline, ttl_seconds=float(cfg["ttl"]), persist_dir=cfg["persist_dir"])
    uvicorn.run(app, host=cfg["host"], port=int(cfg["port"]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imatte",
                                     description="interactive matting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train networks under a regime")
    add_common(p)
    p.add_argument("--data", help="dataset directory of samples")
    p.add_argument("--regime", choices=training.REGIMES)
    p.add_argument("--steps-iscn", type=int, dest="steps_iscn")
    p.add_argument("--steps-mrn", type=int, dest="steps_mrn")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--prompt-mode", dest="prompt_mode",
                   choices=("click", "scribble", "box", "mixed"))
    p.add_argument("--sim-rounds", type=int, dest="sim_rounds")

    p = sub.add_parser("evaluate", help="single-round metric report over a dataset")
    add_common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint-iscn", dest="checkpoint_iscn")
    p.add_argument("--checkpoint-mrn", dest="checkpoint_mrn")
    p.add_argument("--oracle", action="store_const", const=True)
    p.add_argument("--prompt-mode", dest="prompt_mode",
                   choices=("click", "scribble", "box", "mixed"))

    p = sub.add_parser("simulate", help="multi-round simulated-user sessions")
    add_common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint-iscn", dest="checkpoint_iscn")
    p.add_argument("--checkpoint-mrn", dest="checkpoint_mrn")
    p.add_argument("--oracle", action="store_const", const=True)
    p.add_argument("--mode", choices=sim_mod.MODES)
    p.add_argument("--rounds", type=int)
    p.add_argument("--noc-threshold", type=float, dest="noc_threshold")
    p.add_argument("--noc-cap", type=int, dest="noc_cap")
    p.add_argument("--aggregate", action="store_const", const=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--instances", help="instance count range LO:HI")
    p.add_argument("--size", type=int)

    p = sub.add_parser("serve", help="run the HTTP session service")
    add_common(p)
    p.add_argument("--checkpoint-iscn", dest="checkpoint_iscn")
    p.add_argument("--checkpoint-mrn", dest="checkpoint_mrn")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--ttl", type=float)
    p.add_argument("--persist-dir", dest="persist_dir")

    return parser


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "synth": cmd_synth,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    cli_values = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_cfg = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(command, file_cfg, cli_values, parser)
        return COMMANDS[command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures exit 1 with a message
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
