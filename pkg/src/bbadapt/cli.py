"""Experiment driver.

Subcommands cover the full pipeline: train source models, serve one as a
black-box endpoint, cache its predictions, run the two-phase adaptation,
fine-tune an existing checkpoint, and summarize finished runs. Every
adaptation run writes a manifest sufficient to reproduce it exactly;
rerunning a manifest yields byte-identical metrics files.

Per-seed randomness is split into fixed named streams (source init,
source training, target init, distillation, fine-tuning), so changing one
phase's consumption never shifts another's.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .distill import AdaptConfig, run_distillation
from .errors import ContractError, StartupError, TransportError
from .finetune import FinetuneConfig, run_finetune
from .nets import (
    SourceNet,
    TargetNet,
    load_checkpoint,
    net_state,
    save_checkpoint,
    train_source_net,
)
from .predictors import InProcessPredictor, init_teacher, read_cache, write_cache
from .scenarios import (
    PRESET_NAMES,
    DomainData,
    ScenarioSpec,
    bank_accuracy,
    evaluate,
    generate,
    holdout,
    preset,
)
from .service import PredictionServer, RemotePredictor

# rng stream tags, composed as default_rng([seed, tag, domain])
_SOURCE_INIT = 11
_SOURCE_TRAIN = 13
_TARGET_INIT = 31
_DISTILL = 41
_FINETUNE = 43

TEACHERS = ("adals", "hard", "ls")


@dataclass
class ExperimentConfig:
    """Everything one adaptation run depends on."""

    scenario: ScenarioSpec
    seeds: tuple = (2019, 2020, 2021)
    source_epochs: int = 30
    ls_alpha: float = 0.1
    teacher: str = "adals"
    disclosure: str = "auto"  # auto resolves from teacher and r
    r: int = 1
    beta: float = 1.0
    gamma: float = 0.6
    mixup_alpha: float = 0.3
    drop_mix: bool = False
    drop_mi: bool = False
    adapt_epochs: int = 30
    finetune_epochs: int = 30
    batch_size: int = 64
    lr_backbone: float = 1e-3
    freeze_bn_stats: bool = False
    hidden: tuple = (64, 64)
    bottleneck_dim: int = 32

    def validate(self):
        k = self.scenario.num_classes
        if self.teacher not in TEACHERS:
            raise ContractError(f"unknown teacher {self.teacher!r}, expected one of {TEACHERS}")
        if not 1 <= self.r <= k:
            raise ContractError(f"r must lie in [1, {k}], got {self.r}")
        if self.teacher in ("hard", "ls") and self.disclosure not in ("auto", "hard"):
            raise ContractError(f"teacher {self.teacher!r} requires hard disclosure")
        if self.teacher == "adals" and self.disclosure == "hard":
            raise ContractError("an adaptive-smoothing teacher needs probabilities, not hard labels")
        if not self.seeds:
            raise ContractError("at least one seed is required")

    def resolved_disclosure(self) -> str:
        if self.teacher in ("hard", "ls"):
            return "hard"
        if self.disclosure == "auto":
            return "full-soft" if self.r >= self.scenario.num_classes else "top-r"
        return self.disclosure

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "seeds": list(self.seeds),
            "source_epochs": self.source_epochs,
            "ls_alpha": self.ls_alpha,
            "teacher": self.teacher,
            "disclosure": self.disclosure,
            "r": self.r,
            "beta": self.beta,
            "gamma": self.gamma,
            "mixup_alpha": self.mixup_alpha,
            "drop_mix": self.drop_mix,
            "drop_mi": self.drop_mi,
            "adapt_epochs": self.adapt_epochs,
            "finetune_epochs": self.finetune_epochs,
            "batch_size": self.batch_size,
            "lr_backbone": self.lr_backbone,
            "freeze_bn_stats": self.freeze_bn_stats,
            "hidden": list(self.hidden),
            "bottleneck_dim": self.bottleneck_dim,
        }

    @staticmethod
    def from_dict(obj: dict) -> "ExperimentConfig":
        if "config" in obj and "scenario" not in obj:
            obj = obj["config"]  # accept a whole manifest
        kwargs = dict(obj)
        kwargs["scenario"] = ScenarioSpec.from_dict(obj["scenario"])
        kwargs["seeds"] = tuple(int(s) for s in obj.get("seeds", (2019, 2020, 2021)))
        kwargs["hidden"] = tuple(int(h) for h in obj.get("hidden", (64, 64)))
        return ExperimentConfig(**kwargs)


# pipeline building blocks ----------------------------------------------


def train_source_models(cfg: ExperimentConfig, sources, seed: int) -> list:
    """One trained source net per source domain, all streams seeded."""
    scn = cfg.scenario
    nets = []
    for m, domain in enumerate(sources):
        net = SourceNet(
            domain.features.shape[1],
            scn.num_classes,
            hidden=cfg.hidden,
            rng=np.random.default_rng([seed, _SOURCE_INIT, m]),
        )
        train_source_net(
            net,
            domain.features,
            domain.labels,
            epochs=cfg.source_epochs,
            batch_size=cfg.batch_size,
            ls_alpha=cfg.ls_alpha,
            lr_backbone=cfg.lr_backbone,
            seed=[seed, _SOURCE_TRAIN, m],
        )
        nets.append(net)
    return nets


def handles_from_nets(cfg: ExperimentConfig, nets) -> list:
    disclosure = cfg.resolved_disclosure()
    r = cfg.r if disclosure == "top-r" else None
    return [
        InProcessPredictor(net, disclosure=disclosure, r=r, predictor_id=f"source{m}")
        for m, net in enumerate(nets)
    ]


def _check_handle_disclosures(cfg: ExperimentConfig, handles):
    want = cfg.resolved_disclosure()
    for h in handles:
        if h.disclosure != want or (want == "top-r" and h.r != cfg.r):
            raise ContractError(
                f"handle '{h.predictor_id}' discloses {h.disclosure} (r={h.r}), "
                f"config expects {want} (r={cfg.r})"
            )


def run_seed(cfg: ExperimentConfig, target: DomainData, handles, seed: int) -> dict:
    """One full adaptation for one seed: teacher init, distillation,
    fine-tuning. Labels are touched only by the baseline computation and
    the evaluation callback."""
    cfg.validate()
    _check_handle_disclosures(cfg, handles)
    k = handles[0].num_classes
    hard_mode = "onehot" if cfg.teacher == "hard" else "ls"
    bank = init_teacher(handles, target.features, r=cfg.r, hard_mode=hard_mode)
    no_adapt = bank_accuracy(bank.rows, target.labels)

    def eval_fn(net):
        return evaluate(net, target)["accuracy"]

    net = TargetNet(
        target.features.shape[1],
        k,
        hidden=cfg.hidden,
        bottleneck_dim=cfg.bottleneck_dim,
        rng=np.random.default_rng([seed, _TARGET_INIT]),
    )
    adapt_cfg = AdaptConfig(
        beta=0.0 if cfg.drop_mix else cfg.beta,
        gamma=cfg.gamma,
        mixup_alpha=cfg.mixup_alpha,
        r=cfg.r,
        epochs=cfg.adapt_epochs,
        batch_size=cfg.batch_size,
        seed=[seed, _DISTILL],
        drop_mi=cfg.drop_mi,
        lr_backbone=cfg.lr_backbone,
    )
    metrics = run_distillation(adapt_cfg, bank, net, target.features, eval_fn=eval_fn)
    distilled = evaluate(net, target)
    distilled_state = net_state(net, seed=seed)
    ft_cfg = FinetuneConfig(
        epochs=cfg.finetune_epochs,
        batch_size=cfg.batch_size,
        seed=[seed, _FINETUNE],
        freeze_bn_stats=cfg.freeze_bn_stats,
        lr_backbone=cfg.lr_backbone,
    )
    metrics = metrics + run_finetune(ft_cfg, net, target.features, eval_fn=eval_fn)
    final = evaluate(net, target)
    summary = {
        "seed": seed,
        "no_adapt": no_adapt,
        "accuracy_distilled": distilled["accuracy"],
        "accuracy_final": final["accuracy"],
        "per_class_final": final["per_class_accuracy"],
    }
    return {
        "summary": summary,
        "metrics": metrics,
        "net": net,
        "bank": bank,
        "distilled_state": distilled_state,
    }


def run_experiment(cfg: ExperimentConfig, outdir: str, fixed_handles=None, save_nets: bool = True) -> dict:
    """Run every seed, persist manifest, metrics, checkpoints, report.

    `fixed_handles` (cache/remote/checkpoint backings) are shared across
    seeds; otherwise fresh source models are trained per seed.
    """
    cfg.validate()
    os.makedirs(outdir, exist_ok=True)
    _write_json(os.path.join(outdir, "manifest.json"), {"version": __version__, "config": cfg.to_dict()})
    sources, target = generate(cfg.scenario)
    per_seed = []
    for seed in cfg.seeds:
        if fixed_handles is None:
            handles = handles_from_nets(cfg, train_source_models(cfg, sources, seed))
        else:
            handles = fixed_handles
        out = run_seed(cfg, target, handles, seed)
        _write_metrics(os.path.join(outdir, f"metrics_seed{seed}.ndjson"), seed, out["metrics"])
        if save_nets:
            _write_json(os.path.join(outdir, f"distilled_seed{seed}.json"), out["distilled_state"])
            save_checkpoint(out["net"], os.path.join(outdir, f"target_seed{seed}.json"), seed=seed)
        per_seed.append(out["summary"])
    finals = np.array([row["accuracy_final"] for row in per_seed])
    distilled = np.array([row["accuracy_distilled"] for row in per_seed])
    baselines = np.array([row["no_adapt"] for row in per_seed])
    report = {
        "version": __version__,
        "seeds": list(cfg.seeds),
        "per_seed": per_seed,
        "no_adapt_mean": float(baselines.mean()),
        "distilled_mean": float(distilled.mean()),
        "distilled_std": float(distilled.std()),
        "final_mean": float(finals.mean()),
        "final_std": float(finals.std()),
    }
    _write_json(os.path.join(outdir, "report.json"), report)
    return report


# persistence helpers ----------------------------------------------------


def _write_json(path: str, obj: dict):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_metrics(path: str, seed: int, records: list):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"seed": seed, **rec}, sort_keys=True))
            fh.write("\n")


def _print_report(report: dict):
    print(f"seeds: {report['seeds']}")
    header = f"{'seed':>6} {'no-adapt':>10} {'distilled':>10} {'final':>10}"
    print(header)
    for row in report["per_seed"]:
        print(
            f"{row['seed']:>6} {row['no_adapt']:>10.2f} "
            f"{row['accuracy_distilled']:>10.2f} {row['accuracy_final']:>10.2f}"
        )
    print(
        f"{'mean':>6} {report['no_adapt_mean']:>10.2f} "
        f"{report['distilled_mean']:>10.2f} {report['final_mean']:>10.2f}"
    )
    print(f"final accuracy: {report['final_mean']:.2f} +/- {report['final_std']:.2f}")


# subcommands ------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_dict(json.load(fh))
    elif getattr(args, "preset", None):
        scenario_seed = getattr(args, "scenario_seed", None)
        cfg = ExperimentConfig(scenario=preset(args.preset, seed=scenario_seed if scenario_seed is not None else 2020))
    else:
        raise ContractError("pass --config FILE or --preset NAME")
    overrides = {}
    for name in (
        "teacher",
        "disclosure",
        "r",
        "beta",
        "gamma",
        "mixup_alpha",
        "drop_mix",
        "drop_mi",
        "source_epochs",
        "adapt_epochs",
        "finetune_epochs",
        "batch_size",
        "lr_backbone",
        "freeze_bn_stats",
    ):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _split_paths(value):
    return [p for p in value.split(",") if p] if value else None


def cmd_train_source(args) -> int:
    cfg = _load_config(args)
    scn = cfg.scenario
    sources, _ = generate(scn)
    nets = train_source_models(cfg, sources, args.seed)
    os.makedirs(args.outdir, exist_ok=True)
    rows = []
    for m, (net, domain) in enumerate(zip(nets, sources)):
        path = os.path.join(args.outdir, f"source{m}_seed{args.seed}.json")
        save_checkpoint(net, path, seed=args.seed)
        train_acc = evaluate(net, domain)["accuracy"]
        test_acc = evaluate(net, holdout(scn, m, max(200, scn.n_source // 2)))["accuracy"]
        rows.append({"domain": m, "checkpoint": path, "train_accuracy": train_acc, "test_accuracy": test_acc})
        print(f"source {m}: train {train_acc:.2f}  test {test_acc:.2f}  -> {path}")
    _write_json(os.path.join(args.outdir, f"sources_seed{args.seed}.json"), {"sources": rows})
    return 0


def cmd_serve(args) -> int:
    net = load_checkpoint(args.checkpoint)
    r = args.r if args.disclosure == "top-r" else None
    handle = InProcessPredictor(net, disclosure=args.disclosure, r=r, predictor_id=args.predictor_id)
    server = PredictionServer(handle, host=args.host, port=args.port)
    host, port = server.endpoint
    print(f"serving {args.disclosure} predictions on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_cache_predictions(args) -> int:
    cfg = _load_config(args)
    _, target = generate(cfg.scenario)
    k = cfg.scenario.num_classes
    disclosure = cfg.resolved_disclosure()
    r = cfg.r if disclosure == "top-r" else None
    if args.endpoint:
        host, port = args.endpoint.rsplit(":", 1)
        handle = RemotePredictor(host, int(port), k, disclosure=disclosure, r=r)
    elif args.checkpoint:
        handle = InProcessPredictor(load_checkpoint(args.checkpoint), disclosure=disclosure, r=r)
    else:
        raise ContractError("pass --checkpoint FILE or --endpoint HOST:PORT")
    count = write_cache(args.out, handle, target.features)
    print(f"cached {count} predictions ({disclosure}) at {args.out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_config(args)
    k = cfg.scenario.num_classes
    disclosure = cfg.resolved_disclosure()
    r = cfg.r if disclosure == "top-r" else None
    fixed_handles = None
    caches = _split_paths(args.caches)
    endpoints = _split_paths(args.endpoints)
    checkpoints = _split_paths(args.source_checkpoints)
    if caches:
        fixed_handles = [read_cache(path, k) for path in caches]
    elif endpoints:
        fixed_handles = []
        for i, ep in enumerate(endpoints):
            host, port = ep.rsplit(":", 1)
            fixed_handles.append(
                RemotePredictor(host, int(port), k, disclosure=disclosure, r=r, predictor_id=f"remote{i}")
            )
    elif checkpoints:
        fixed_handles = [
            InProcessPredictor(load_checkpoint(path), disclosure=disclosure, r=r, predictor_id=f"source{i}")
            for i, path in enumerate(checkpoints)
        ]
    report = run_experiment(cfg, args.outdir, fixed_handles=fixed_handles)
    _print_report(report)
    return 0


def cmd_finetune_only(args) -> int:
    cfg = _load_config(args)
    net = load_checkpoint(args.checkpoint)
    _, target = generate(cfg.scenario)

    def eval_fn(n):
        return evaluate(n, target)["accuracy"]

    before = evaluate(net, target)["accuracy"]
    ft_cfg = FinetuneConfig(
        epochs=cfg.finetune_epochs,
        batch_size=cfg.batch_size,
        seed=[args.seed, _FINETUNE],
        freeze_bn_stats=cfg.freeze_bn_stats,
        lr_backbone=cfg.lr_backbone,
    )
    metrics = run_finetune(ft_cfg, net, target.features, eval_fn=eval_fn)
    after = evaluate(net, target)["accuracy"]
    os.makedirs(args.outdir, exist_ok=True)
    _write_metrics(os.path.join(args.outdir, f"metrics_seed{args.seed}.ndjson"), args.seed, metrics)
    save_checkpoint(net, os.path.join(args.outdir, f"target_seed{args.seed}.json"), seed=args.seed)
    print(f"accuracy before {before:.2f} -> after {after:.2f}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for rundir in args.rundirs:
        path = os.path.join(rundir, "report.json")
        if not os.path.exists(path):
            rows.append((rundir, None))
            continue
        with open(path) as fh:
            rows.append((rundir, json.load(fh)))
    name_width = max(len(os.path.basename(os.path.normpath(r))) or 3 for r, _ in rows)
    name_width = max(name_width, 3)
    print(f"{'run':<{name_width}} {'no-adapt':>10} {'distilled':>16} {'final':>16}")
    for rundir, report in rows:
        name = os.path.basename(os.path.normpath(rundir))
        if report is None:
            print(f"{name:<{name_width}} {'absent':>10}")
            continue
        print(
            f"{name:<{name_width}} {report['no_adapt_mean']:>10.2f} "
            f"{report['distilled_mean']:>9.2f}+/-{report['distilled_std']:<4.2f} "
            f"{report['final_mean']:>9.2f}+/-{report['final_std']:<4.2f}"
        )
    if args.curves:
        with open(args.curves, "w") as fh:
            fh.write("run\tseed\tphase\tepoch\tloss\taccuracy\n")
            for rundir, report in rows:
                if report is None:
                    continue
                name = os.path.basename(os.path.normpath(rundir))
                for seed in report["seeds"]:
                    mpath = os.path.join(rundir, f"metrics_seed{seed}.ndjson")
                    if not os.path.exists(mpath):
                        continue
                    with open(mpath) as fh_in:
                        for line in fh_in:
                            rec = json.loads(line)
                            fh.write(
                                f"{name}\t{seed}\t{rec['phase']}\t{rec['epoch']}\t"
                                f"{rec['loss']!r}\t{rec.get('accuracy', '')!r}\n"
                            )
        print(f"curves written to {args.curves}")
    return 0


# parser -----------------------------------------------------------------


def _add_config_args(sub, with_overrides: bool = False):
    sub.add_argument("--config", help="experiment config or manifest JSON")
    sub.add_argument("--preset", choices=PRESET_NAMES, help="built-in scenario preset")
    sub.add_argument("--scenario-seed", type=int, default=None, help="data seed for --preset")
    if with_overrides:
        sub.add_argument("--seeds", help="comma-separated training seeds")
        sub.add_argument("--teacher", choices=TEACHERS, default=None)
        sub.add_argument("--disclosure", choices=("auto", "full-soft", "top-r", "hard"), default=None)
        sub.add_argument("--r", type=int, default=None)
        sub.add_argument("--beta", type=float, default=None)
        sub.add_argument("--gamma", type=float, default=None)
        sub.add_argument("--mixup-alpha", dest="mixup_alpha", type=float, default=None)
        sub.add_argument("--drop-mi", dest="drop_mi", action=argparse.BooleanOptionalAction, default=None)
        sub.add_argument("--drop-mix", dest="drop_mix", action=argparse.BooleanOptionalAction, default=None)
        sub.add_argument("--source-epochs", dest="source_epochs", type=int, default=None)
        sub.add_argument("--adapt-epochs", dest="adapt_epochs", type=int, default=None)
        sub.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, default=None)
        sub.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        sub.add_argument("--lr", dest="lr_backbone", type=float, default=None)
        sub.add_argument(
            "--freeze-bn-stats", dest="freeze_bn_stats", action=argparse.BooleanOptionalAction, default=None
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbadapt", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("train-source", help="train source models on their own domains")
    _add_config_args(sub, with_overrides=True)
    sub.add_argument("--seed", type=int, default=2020)
    sub.add_argument("--outdir", required=True)
    sub.set_defaults(func=cmd_train_source)

    sub = subs.add_parser("serve", help="serve a checkpoint as a black-box predictor")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--host", default="127.0.0.1")
    sub.add_argument("--port", type=int, default=0)
    sub.add_argument("--disclosure", choices=("full-soft", "top-r", "hard"), default="top-r")
    sub.add_argument("--r", type=int, default=1)
    sub.add_argument("--predictor-id", dest="predictor_id", default="service")
    sub.set_defaults(func=cmd_serve)

    sub = subs.add_parser("cache-predictions", help="query a predictor over the target set, write a cache")
    _add_config_args(sub, with_overrides=True)
    sub.add_argument("--checkpoint", help="source checkpoint for an in-process predictor")
    sub.add_argument("--endpoint", help="HOST:PORT of a served predictor")
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_cache_predictions)

    sub = subs.add_parser("adapt", help="run the full two-phase adaptation")
    _add_config_args(sub, with_overrides=True)
    sub.add_argument("--outdir", required=True)
    sub.add_argument("--caches", help="comma-separated prediction cache files, one per source")
    sub.add_argument("--endpoints", help="comma-separated HOST:PORT endpoints, one per source")
    sub.add_argument("--source-checkpoints", dest="source_checkpoints", help="comma-separated checkpoints")
    sub.set_defaults(func=cmd_adapt)

    sub = subs.add_parser("finetune-only", help="fine-tune a distilled checkpoint")
    _add_config_args(sub, with_overrides=True)
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--seed", type=int, default=2020)
    sub.add_argument("--outdir", required=True)
    sub.set_defaults(func=cmd_finetune_only)

    sub = subs.add_parser("report", help="summarize finished runs")
    sub.add_argument("rundirs", nargs="+")
    sub.add_argument("--curves", help="write epoch curves as TSV to this path")
    sub.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, TransportError, StartupError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
