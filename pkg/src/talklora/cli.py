"""Command-line surface: config-driven experiments, checkpoints, reports.

Subcommands
-----------
params     parameter budget of a method over a published model geometry
train      synthetic cluster-task training run (loss CSV, routing CSV,
           trainlog JSON, binary checkpoint)
analyze    stability / nonexpansive / routing / heatmap / degeneracy
           reports from a checkpoint
gradcheck  analytic-vs-numeric gradient verification across all families
           and ablation flags
ckpt       checkpoint roundtrip verification and header inspection

Every command reads a single JSON config (see ``parse_run_config`` for
the schema and defaults); ``--seed`` is the only flag override and is
echoed into all outputs.  Exit codes are a stable contract: 0 success,
2 config/input error, 3 numerical failure, 4 artifact corruption.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis
from .adapters import (
    AdapterConfig,
    AdapterStack,
    build_adapter_stack,
    build_frozen_stack,
    build_stack_from_slots,
    frozen_stack_slots,
)
from .autodiff import LossSpec, NonFiniteLossError, gradcheck, model_forward
from .checkpoint import (
    CorruptCheckpointError,
    VersionMismatchError,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from .geometry import BUNDLED_GEOMETRIES, bundled_geometry, load_geometry
from .linalg import RngState
from .tasks import (
    ClusterTaskSpec,
    DivergenceError,
    TrainConfig,
    generate_cluster_task,
    loss_csv_lines,
    routing_csv_lines,
    train,
    trainlog_to_dict,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CORRUPT = 4

GRADCHECK_TOL = 1e-6
GRADCHECK_DIM_CAP = 32
# central-difference settings for the verification suite: at eps=1e-5 in
# float64 the eps^2 truncation term alone reaches ~2e-6 relative error on
# curvature-heavy entries, while shrinking eps runs into the float64
# roundoff floor on near-zero gradients; evaluating the reference forward
# in extended precision removes the floor so a smaller eps can kill
# truncation too
GRADCHECK_EPSILON = 1e-6
GRADCHECK_DTYPE = np.longdouble

ANALYZE_REPORTS = ("stability", "nonexpansive", "routing", "heatmap", "degeneracy")


class ConfigError(ValueError):
    """Invalid or missing configuration field; names the offending key."""


_REQUIRED = object()


def _take(doc: dict, key: str, default=_REQUIRED, section: str = "config"):
    if key in doc:
        return doc.pop(key)
    if default is _REQUIRED:
        raise ConfigError(f"missing required field {section}.{key}")
    return default


def _reject_unknown(doc: dict, section: str) -> None:
    if doc:
        raise ConfigError(f"unknown field {section}.{sorted(doc)[0]}")


@dataclass
class RunConfig:
    method: str
    seed: int
    output_dir: str
    adapter: AdapterConfig
    targets: Optional[list]
    geometry: Optional[str]
    task: Optional[ClusterTaskSpec]
    model_depth: int
    train: TrainConfig
    loss: LossSpec

    def effective_dict(self) -> dict:
        """Full configuration with every default applied, for echoing."""
        doc = {
            "method": self.method,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "adapter": {
                "total_rank": self.adapter.total_rank,
                "experts": self.adapter.experts,
                "lora_alpha": self.adapter.lora_alpha,
                "share_b": self.adapter.share_b,
                "talking_enabled": self.adapter.talking_enabled,
                "spectral_clip_c": self.adapter.spectral_clip_c,
            },
            "model_depth": self.model_depth,
            "train": {
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "lr": self.train.lr,
                "warmup_steps": self.train.warmup_steps,
                "eval_every": self.train.eval_every,
                "seed": self.train.seed,
                "lr_schedule": self.train.lr_schedule,
                "weight_decay": self.train.weight_decay,
                "dropout": self.train.dropout,
            },
            "loss": self.loss.kind,
        }
        if self.targets is not None:
            doc["targets"] = list(self.targets)
        if self.geometry is not None:
            doc["geometry"] = self.geometry
        if self.task is not None:
            doc["task"] = {
                "clusters": self.task.clusters,
                "input_dim": self.task.input_dim,
                "output_dim": self.task.output_dim,
                "samples_per_cluster": self.task.samples_per_cluster,
                "noise_std": self.task.noise_std,
                "seed": self.task.seed,
            }
        return doc


def parse_run_config(doc: dict, seed_override: Optional[int] = None) -> RunConfig:
    """Strict parse of the single-document JSON config.

    Top level: method (required), seed (0), output_dir ("out"), adapter,
    targets, geometry, task, model_depth (4), train, loss ("mean-squared-
    error").  Unknown keys anywhere are rejected with the field name.
    ``task.seed`` and ``train.seed`` default to the top-level seed.
    """
    doc = dict(doc)
    method = _take(doc, "method")
    if method not in ("lora", "moelora", "talklora"):
        raise ConfigError(f"config.method must be lora|moelora|talklora, got {method!r}")
    seed = int(_take(doc, "seed", 0))
    if seed_override is not None:
        seed = seed_override
    output_dir = str(_take(doc, "output_dir", "out"))

    adapter_doc = dict(_take(doc, "adapter", {}))
    try:
        adapter = AdapterConfig(
            total_rank=int(_take(adapter_doc, "total_rank", 16, "adapter")),
            experts=int(_take(adapter_doc, "experts", 4, "adapter")),
            lora_alpha=float(_take(adapter_doc, "lora_alpha", 16.0, "adapter")),
            share_b=bool(_take(adapter_doc, "share_b", True, "adapter")),
            talking_enabled=bool(_take(adapter_doc, "talking_enabled", True, "adapter")),
            spectral_clip_c=_take(adapter_doc, "spectral_clip_c", None, "adapter"),
        )
    except ValueError as exc:
        raise ConfigError(f"config.adapter: {exc}") from exc
    _reject_unknown(adapter_doc, "adapter")

    targets = _take(doc, "targets", None)
    if targets is not None:
        targets = [str(t) for t in targets]
    geometry = _take(doc, "geometry", None)

    task = None
    task_doc = _take(doc, "task", None)
    if task_doc is not None:
        task_doc = dict(task_doc)
        try:
            task = ClusterTaskSpec(
                clusters=int(_take(task_doc, "clusters", 4, "task")),
                input_dim=int(_take(task_doc, "input_dim", 16, "task")),
                output_dim=int(_take(task_doc, "output_dim", 16, "task")),
                samples_per_cluster=int(
                    _take(task_doc, "samples_per_cluster", 250, "task")
                ),
                noise_std=float(_take(task_doc, "noise_std", 0.3, "task")),
                seed=int(_take(task_doc, "seed", seed, "task")),
            )
        except ValueError as exc:
            raise ConfigError(f"config.task: {exc}") from exc
        _reject_unknown(task_doc, "task")

    model_depth = int(_take(doc, "model_depth", 4))
    if model_depth < 1:
        raise ConfigError("config.model_depth must be positive")

    train_doc = dict(_take(doc, "train", {}))
    try:
        train_cfg = TrainConfig(
            epochs=int(_take(train_doc, "epochs", 2, "train")),
            batch_size=int(_take(train_doc, "batch_size", 32, "train")),
            lr=float(_take(train_doc, "lr", 3e-4, "train")),
            warmup_steps=int(_take(train_doc, "warmup_steps", 100, "train")),
            eval_every=int(_take(train_doc, "eval_every", 50, "train")),
            seed=int(_take(train_doc, "seed", seed, "train")),
            lr_schedule=str(_take(train_doc, "lr_schedule", "linear", "train")),
            weight_decay=float(_take(train_doc, "weight_decay", 0.0, "train")),
            dropout=float(_take(train_doc, "dropout", 0.05, "train")),
        )
    except ValueError as exc:
        raise ConfigError(f"config.train: {exc}") from exc
    _reject_unknown(train_doc, "train")

    try:
        loss = LossSpec(str(_take(doc, "loss", "mean-squared-error")))
    except ValueError as exc:
        raise ConfigError(f"config.loss: {exc}") from exc
    _reject_unknown(doc, "config")
    return RunConfig(
        method=method,
        seed=seed,
        output_dir=output_dir,
        adapter=adapter,
        targets=targets,
        geometry=geometry,
        task=task,
        model_depth=model_depth,
        train=train_cfg,
        loss=loss,
    )


def _load_config_file(path: str, seed_override: Optional[int]) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return parse_run_config(doc, seed_override)


def _resolve_geometry(name_or_path: str):
    if name_or_path.lower() in BUNDLED_GEOMETRIES:
        return bundled_geometry(name_or_path)
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigError(f"geometry fixture not found: {name_or_path}")
    return load_geometry(path)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, lines: list) -> None:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_params(config: RunConfig) -> int:
    if config.geometry is None:
        raise ConfigError("missing required field config.geometry")
    if not config.targets:
        raise ConfigError("missing required field config.targets")
    geom = _resolve_geometry(config.geometry)
    try:
        budget = analysis.count_params(
            geom, config.method, config.adapter, config.targets
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    doc = analysis.budget_to_dict(budget)
    doc["method"] = config.method
    doc["geometry"] = geom.name
    doc["targets"] = sorted(config.targets)
    doc["config"] = config.effective_dict()
    print(json.dumps(doc, sort_keys=True, indent=2))
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "param_budget.json", doc)
    return EXIT_OK


def _build_training_pieces(config: RunConfig):
    if config.task is None:
        raise ConfigError("missing required field config.task")
    data = generate_cluster_task(config.task)
    rng = RngState(config.seed)
    frozen = build_frozen_stack(
        config.task.input_dim, config.task.output_dim, config.model_depth, rng
    )
    stack = build_stack_from_slots(
        config.method, config.adapter, frozen_stack_slots(frozen), rng
    )
    return data, frozen, stack


def cmd_train(config: RunConfig) -> int:
    data, frozen, stack = _build_training_pieces(config)
    log = train(stack, frozen, data, config.train, config.loss)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.tlkl"
    save_checkpoint(ckpt_path, stack, config.effective_dict())
    log.checkpoint = str(ckpt_path)
    _write_csv(out / "loss.csv", loss_csv_lines(log))
    _write_csv(out / "routing.csv", routing_csv_lines(log))
    _write_json(out / "trainlog.json", trainlog_to_dict(log))
    summary = {
        "steps": log.steps[-1].step,
        "final_loss": log.steps[-1].loss,
        "final_eval_loss": log.snapshots[-1].eval_loss if log.snapshots else None,
        "checkpoint": str(ckpt_path),
        "outputs": ["loss.csv", "routing.csv", "trainlog.json", "checkpoint.tlkl"],
    }
    print(json.dumps(summary, sort_keys=True, indent=2))
    return EXIT_OK


def _restore(checkpoint: str):
    stack, echoed = load_checkpoint(checkpoint)
    config = parse_run_config(echoed)
    return stack, config


def cmd_analyze(checkpoint: str, report: str, out_dir: Optional[str],
                trials: int = 1000) -> int:
    stack, config = _restore(checkpoint)
    out = Path(out_dir) if out_dir else Path(checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"report": report, "checkpoint": checkpoint}

    if report in ("stability", "nonexpansive", "heatmap", "degeneracy"):
        if stack.method != "talklora":
            raise ConfigError(f"report {report!r} needs a talklora checkpoint")

    if report == "stability":
        certs = []
        for i, adapter in enumerate(stack.adapters):
            cert = analysis.stability_certificate(
                adapter,
                trials=trials,
                delta_scale=0.1,
                rng=RngState(config.seed).split(f"stability.L{i:02d}"),
                talking_enabled=config.adapter.talking_enabled,
            )
            doc = analysis.certificate_to_dict(cert)
            doc["layer"] = stack.slots[i].layer
            doc["tag"] = stack.slots[i].tag
            certs.append(doc)
        _write_json(out / "stability.json", {"certificates": certs})
        summary["all_verdicts_pass"] = all(c["verdict"] for c in certs)
        summary["max_observed_ratio"] = max(c["max_observed_ratio"] for c in certs)
    elif report == "nonexpansive":
        audit = analysis.nonexpansive_audit(stack)
        _write_csv(out / "nonexpansive.csv", analysis.nonexpansive_csv_lines(audit))
        summary["fraction_within"] = audit.fraction_within
        summary["max_sigma"] = max(sigma for _, _, sigma in audit.rows)
    elif report == "routing":
        if config.task is None:
            raise ConfigError("checkpoint config carries no task; cannot rebuild data")
        data = generate_cluster_task(config.task)
        frozen = build_frozen_stack(
            config.task.input_dim, config.task.output_dim,
            config.model_depth, RngState(config.seed),
        )
        rep = analysis.routing_load(stack, frozen, data)
        _write_csv(out / "routing_load.csv", analysis.routing_load_csv_lines(rep))
        summary["mean_entropy"] = rep.mean_entropy
        summary["load_cv"] = rep.load_cv
    elif report == "heatmap":
        heat = analysis.communication_heatmap(stack)
        _write_csv(out / "heatmap.csv", analysis.heatmap_csv_lines(heat))
        summary["layers"] = len(heat)
    elif report == "degeneracy":
        reports = []
        for i, adapter in enumerate(stack.adapters):
            rep = analysis.degeneracy_check(
                adapter, trials=100,
                rng=RngState(config.seed).split(f"degeneracy.L{i:02d}"),
            )
            reports.append(
                {
                    "layer": stack.slots[i].layer,
                    "tag": stack.slots[i].tag,
                    "identity_max_diff": rep.identity_max_diff,
                    "isolation_max_diff": rep.isolation_max_diff,
                    "cross_influence_min": rep.cross_influence_min,
                    "passed": rep.passed,
                }
            )
        _write_json(out / "degeneracy.json", {"layers": reports})
        summary["all_passed"] = all(r["passed"] for r in reports)
    else:
        raise ConfigError(
            f"unknown report {report!r}; expected one of {ANALYZE_REPORTS}"
        )
    print(json.dumps(summary, sort_keys=True, indent=2))
    return EXIT_OK


def run_gradcheck_suite(config: RunConfig) -> dict:
    """Gradcheck every family x sharing x talking combination.

    Uses the config's task dims, rank/expert counts and model depth on a
    small random batch; returns per-combination max relative errors.
    """
    if config.task is None:
        raise ConfigError("missing required field config.task")
    d, k = config.task.input_dim, config.task.output_dim
    if d > GRADCHECK_DIM_CAP or k > GRADCHECK_DIM_CAP:
        raise ConfigError(
            f"gradcheck dims capped at {GRADCHECK_DIM_CAP} "
            f"(got input_dim={d}, output_dim={k})"
        )
    rng = RngState(config.seed)
    gen = rng.split("gradcheck.data").generator()
    x = gen.normal(size=(4, d))
    target_noise = gen.normal(size=(4, k))
    class_targets = gen.integers(0, k, size=4)
    combos = []
    worst = 0.0
    for method in ("lora", "moelora", "talklora"):
        for share_b in (False, True):
            for talking in (False, True):
                frozen = build_frozen_stack(d, k, config.model_depth, rng)
                cfg = AdapterConfig(
                    total_rank=config.adapter.total_rank,
                    experts=config.adapter.experts,
                    lora_alpha=config.adapter.lora_alpha,
                    share_b=share_b,
                    talking_enabled=talking,
                )
                stack = build_stack_from_slots(
                    method, cfg, frozen_stack_slots(frozen), rng
                )
                for handle, arr in stack.named_parameters():
                    if ".B" in handle:  # nonzero B so every path carries gradient
                        g = rng.split(f"fill.{method}.{share_b}.{talking}.{handle}")
                        arr[:] = 0.3 * g.generator().normal(size=arr.shape)
                if config.loss.kind == "mean-squared-error":
                    # targets near the model output keep the loss small, which
                    # keeps finite-difference roundoff well under the
                    # relative-error floor while every path still has gradient
                    z0, _ = model_forward(frozen, stack, x)
                    targets = z0 + 0.3 * target_noise
                else:
                    targets = class_targets
                report = gradcheck(
                    stack, frozen, (x, targets), config.loss,
                    epsilon=GRADCHECK_EPSILON, dtype=GRADCHECK_DTYPE,
                )
                combos.append(
                    {
                        "method": method,
                        "share_b": share_b,
                        "talking_enabled": talking,
                        "max_relative_error": report.max_relative_error,
                        "worst_handle": report.worst_handle,
                    }
                )
                worst = max(worst, report.max_relative_error)
    return {
        "tolerance": GRADCHECK_TOL,
        "max_relative_error": worst,
        "passed": worst < GRADCHECK_TOL,
        "combinations": combos,
    }


def cmd_gradcheck(config: RunConfig) -> int:
    result = run_gradcheck_suite(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "gradcheck.json", result)
    print(json.dumps(
        {k: result[k] for k in ("tolerance", "max_relative_error", "passed")},
        sort_keys=True, indent=2,
    ))
    return EXIT_OK if result["passed"] else EXIT_NUMERIC


def cmd_ckpt(action: str, checkpoint: str) -> int:
    if action == "inspect":
        header = read_header(checkpoint)
        doc = {
            "format_version": header["format_version"],
            "method": header["method"],
            "adapter_config": header["adapter_config"],
            "slots": len(header["slots"]),
            "tensors": len(header["tensors"]),
            "shared_tensors": sum(
                1 for t in header["tensors"] if t["handle"].startswith("shared.")
            ),
        }
        print(json.dumps(doc, sort_keys=True, indent=2))
        return EXIT_OK
    # roundtrip: load (checksum-validating), re-save, compare bytes
    stack, echoed = load_checkpoint(checkpoint)
    copy_path = Path(checkpoint).with_suffix(".roundtrip.tlkl")
    save_checkpoint(copy_path, stack, echoed)
    identical = copy_path.read_bytes() == Path(checkpoint).read_bytes()
    copy_path.unlink()
    print(json.dumps({"roundtrip_bit_identical": identical}, indent=2))
    return EXIT_OK if identical else EXIT_CORRUPT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="talklora",
        description="Desk-scale laboratory for the LoRA/MoELoRA/TalkLoRA family",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, needs_seed in (("params", True), ("train", True), ("gradcheck", False)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        if needs_seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed (echoed into outputs)")

    p = sub.add_parser("analyze")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, choices=ANALYZE_REPORTS)
    p.add_argument("--out", default=None, help="output dir (default: checkpoint dir)")
    p.add_argument("--trials", type=int, default=1000,
                   help="perturbation trials per layer for the stability report")

    p = sub.add_parser("ckpt")
    p.add_argument("action", choices=("roundtrip", "inspect"))
    p.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "params":
            return cmd_params(_load_config_file(args.config, args.seed))
        if args.command == "train":
            return cmd_train(_load_config_file(args.config, args.seed))
        if args.command == "gradcheck":
            return cmd_gradcheck(_load_config_file(args.config, None))
        if args.command == "analyze":
            return cmd_analyze(args.checkpoint, args.report, args.out, args.trials)
        if args.command == "ckpt":
            return cmd_ckpt(args.action, args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"input not found: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteLossError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptCheckpointError, VersionMismatchError) as exc:
        print(f"artifact corruption: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
