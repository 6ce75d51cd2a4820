"""
Pipeline orchestration for the CLI commands.

This module provides:
- gen-data: deterministic corpus splits with manifests
- One StageService per training stage
- evaluate: frozen baseline and prompted bundle on a split
- ablate: depth, strategy, prompt-group and learnable-prompt baseline sweeps
- report: parameter, FLOP and inference-time accounting
- Directional acceptance checks over the reports of a finished run

Python 3.13 Compatible.
"""

from __future__ import annotations

import logging
from typing import Iterable, Optional

from diffprompt.core.exceptions import ConfigurationError, EmptySplitError
from diffprompt.models.layers import count_parameters
from diffprompt.models.prompting import PROMPT_GROUPS
from diffprompt.schemas.checkpoint import DatasetManifest
from diffprompt.schemas.config import RunConfig
from diffprompt.schemas.report import (
    AblationReport,
    AblationRow,
    AcceptanceCheck,
    ComplexityTable,
    EvalReport,
    StageReport,
)
from diffprompt.services.base_service import RunPaths, StageService
from diffprompt.services.data_service import generate_split, write_dataset
from diffprompt.services.eval_service import count_params_and_flops, evaluate, measure_inference_ms
from diffprompt.services.generator_service import GeneratorStage
from diffprompt.services.grounder_service import GrounderDetector, GrounderStage
from diffprompt.services.prompting_service import (
    BASELINE_TOKENS,
    BASELINES,
    DiffPromptDetector,
    PromptBaselineDetector,
    PromptedBundle,
    TunerStage,
    ablate_prompts,
    build_baseline,
    build_tuner,
    dump_saliency,
    train_prompt_baseline,
)
from diffprompt.services.vae_service import VAE_IOU_TARGET, VaeStage

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEPTH_SWEEP = (1, 3, 6, 9, 12)
STRATEGIES = ("sequential", "reverse")
ABLATIONS = ("depth", "strategy", "prompts", "baselines")

# R@1 differences (in points) at or below this are treated as ties.
TIE_POINTS = 0.5

# Directional targets checked by acceptance_checks.
MIN_GAIN_POINTS = 3.0
MAX_TUNABLE_FRACTION = 0.05


def strategy_soft_failures(reverse_r1: float, sequential_r1: float) -> list[str]:
    """Warnings when reverse assignment does not clearly beat sequential."""
    gap = 100.0 * (reverse_r1 - sequential_r1)
    if abs(gap) <= TIE_POINTS:
        return [f"reverse and sequential R@1 tie within {TIE_POINTS} points ({gap:+.2f})"]
    if gap < 0:
        return [f"reverse R@1 is {-gap:.2f} points below sequential"]
    return []


def depth_soft_failures(rows: list[AblationRow]) -> list[str]:
    """Warning when the deepest setting has lower R@1 than the shallowest."""
    if len(rows) > 1 and rows[-1].report.r1 < rows[0].report.r1:
        return [f"R@1 at {rows[-1].label} is below R@1 at {rows[0].label}"]
    return []


def acceptance_checks(
    baseline: EvalReport,
    prompted: EvalReport,
    *,
    strategy: Optional[AblationReport] = None,
    depth: Optional[AblationReport] = None,
    complexity: Optional[ComplexityTable] = None,
    vae: Optional[StageReport] = None,
) -> list[AcceptanceCheck]:
    """
    Directional checks of one trained run; recall differences are in points.

    Optional reports that are absent contribute no check.
    """
    checks = [
        AcceptanceCheck(name=f"r{k}_gain", value=100.0 * (prompted.r_at[k] - baseline.r_at[k]), threshold=MIN_GAIN_POINTS)
        for k in (1, 5)
    ]
    if strategy is not None:
        by_label = {row.label: row.report.r1 for row in strategy.rows}
        gap = 100.0 * (by_label["reverse"] - by_label["sequential"])
        note = "tie" if abs(gap) <= TIE_POINTS else ""
        checks.append(AcceptanceCheck(name="reverse_over_sequential", value=gap, threshold=-TIE_POINTS, note=note))
    if depth is not None and len(depth.rows) > 1:
        shallow, deep = depth.rows[0], depth.rows[-1]
        checks.append(
            AcceptanceCheck(
                name="depth_gain",
                value=100.0 * (deep.report.r1 - shallow.report.r1),
                threshold=0.0,
                note=f"{deep.label} vs {shallow.label}",
            )
        )
    if complexity is not None:
        checks.append(
            AcceptanceCheck(
                name="tunable_fraction",
                value=complexity.tunable_fraction,
                threshold=MAX_TUNABLE_FRACTION,
                upper_limit=True,
            )
        )
    if vae is not None:
        checks.append(
            AcceptanceCheck(
                name="vae_reconstruction_iou",
                value=vae.metrics["val_reconstruction_iou"],
                threshold=VAE_IOU_TARGET,
            )
        )
    return checks


def merge_checks(per_run: list[list[AcceptanceCheck]]) -> list[AcceptanceCheck]:
    """Average each named check over runs; the note counts the runs that passed."""
    merged = []
    for name in dict.fromkeys(check.name for checks in per_run for check in checks):
        group = [check for checks in per_run for check in checks if check.name == name]
        passed = sum(check.passed for check in group)
        merged.append(
            AcceptanceCheck(
                name=name,
                value=sum(check.value for check in group) / len(group),
                threshold=group[0].threshold,
                upper_limit=group[0].upper_limit,
                note=f"{passed}/{len(group)} runs pass",
            )
        )
    return merged


def generate_data(cfg: RunConfig, paths: Optional[RunPaths] = None) -> dict[str, DatasetManifest]:
    """Generate and write every split; ids are contiguous seed ranges."""
    paths = paths or RunPaths.from_config(cfg)
    corpus_hash = cfg.section_hash("corpus")
    manifests = {}
    for split in SPLITS:
        manifests[split] = write_dataset(
            generate_split(cfg.corpus, split), paths.dataset(split), cfg.corpus, split, corpus_hash
        )
    return manifests


STAGES: dict[str, type[StageService]] = {
    "pretrain": GrounderStage,
    "train-vae": VaeStage,
    "train-generator": GeneratorStage,
    "tune-prompts": TunerStage,
}


class BundleService(TunerStage):
    """Base for commands that read a trained prompted bundle."""

    def load_trained_bundle(self, cfg: Optional[RunConfig] = None) -> PromptedBundle:
        """
        Raises:
            MissingDependencyError: If any stage checkpoint is missing
            ProvenanceError: If a checkpoint does not match the config
        """
        cfg = cfg or self.cfg
        tuner = build_tuner(cfg)
        adapters_digest = self.load_component("prompt_adapters", tuner)
        bundle = self.load_bundle(cfg, tuner)
        bundle.digests["prompt_adapters"] = adapters_digest
        return bundle

    def dataset_digests(self) -> dict[str, str]:
        return {"dataset": self.dataset_digest()}


class EvaluateService(BundleService):
    """Evaluate the frozen baseline and the prompted bundle on one split."""

    def __init__(self, cfg: RunConfig, paths: Optional[RunPaths] = None, split: str = "val", dump: bool = False):
        super().__init__(cfg, paths)
        self.split = split
        self.dump = dump

    @property
    def stage_name(self) -> str:
        return "evaluate"

    def run(self) -> EvalReport:
        dataset = self.load_split(self.split)
        bundle = self.load_trained_bundle()
        digests = {**self.dataset_digests(), **bundle.digests}
        seeds = {"run": self.cfg.seed}

        baseline = evaluate(
            GrounderDetector(bundle.grounder), dataset, self.cfg, label="frozen-grounder", seeds=seeds, digests=digests
        )
        report = evaluate(DiffPromptDetector(bundle), dataset, self.cfg, label="diff-prompt", seeds=seeds, digests=digests)
        self.write_report(f"eval-{self.split}-baseline", baseline)
        self.write_report(f"eval-{self.split}", report)
        if self.dump and len(dataset):
            dump_saliency(bundle, dataset.batch(range(min(len(dataset), 8))), self.paths.saliency)
        self.logger.info(
            "Evaluation finished",
            extra={
                "split": self.split,
                "baseline_r1": baseline.r1,
                "r1": report.r1,
                "r5": report.r5,
                "ub": report.upper_bound,
            },
        )
        return report


class AblationService(BundleService):
    """Ablation sweeps on the validation split."""

    def __init__(
        self,
        cfg: RunConfig,
        kind: str,
        paths: Optional[RunPaths] = None,
        depths: Iterable[int] = DEPTH_SWEEP,
    ):
        super().__init__(cfg, paths)
        if kind not in ABLATIONS:
            raise ConfigurationError(f"Unknown ablation {kind!r}", field="ablate", value=kind)
        self.kind = kind
        self.depths = tuple(depths)

    @property
    def stage_name(self) -> str:
        return f"ablate-{self.kind}"

    def run(self) -> AblationReport:
        rows, soft_failures = getattr(self, f"_{self.kind}")()
        for message in soft_failures:
            self.logger.warning(message, extra={"ablation": self.kind, "soft_failure": True})
        report = AblationReport(kind=self.kind, rows=rows, config_hash=self.cfg.config_hash(), soft_failures=soft_failures)
        self.write_report(self.stage_name, report)
        return report

    def _tuned_row(self, label: str, cfg: RunConfig, settings: dict) -> AblationRow:
        bundle, _, report = self.train(cfg)
        if report is None:
            raise EmptySplitError("val")
        return AblationRow(
            label=label, settings=settings, tunable_params=count_parameters(bundle.tuner), report=report
        )

    def _depth(self) -> tuple[list[AblationRow], list[str]]:
        rows = [
            self._tuned_row(f"D={depth}", self.cfg.updated(prompt={"depth": depth}), {"depth": depth})
            for depth in self.depths
        ]
        return rows, depth_soft_failures(rows)

    def _strategy(self) -> tuple[list[AblationRow], list[str]]:
        rows = [
            self._tuned_row(strategy, self.cfg.updated(prompt={"strategy": strategy}), {"strategy": strategy})
            for strategy in STRATEGIES
        ]
        by_label = {row.label: row.report.r1 for row in rows}
        return rows, strategy_soft_failures(by_label["reverse"], by_label["sequential"])

    def _prompts(self) -> tuple[list[AblationRow], list[str]]:
        val = self.load_split("val")
        bundle = self.load_trained_bundle()
        tunable = count_parameters(bundle.tuner)
        drops: list[tuple[str, ...]] = [()] + [(group,) for group in PROMPT_GROUPS] + [PROMPT_GROUPS]
        rows = []
        for drop in drops:
            report = ablate_prompts(bundle, val, self.cfg, drop)
            rows.append(AblationRow(label=report.label, settings={"drop": list(drop)}, tunable_params=tunable, report=report))
        rows.append(
            AblationRow(
                label="promptless",
                settings={"drop": "removed"},
                report=evaluate(GrounderDetector(bundle.grounder), val, self.cfg, label="promptless"),
            )
        )
        # Zero substitution keeps sequence lengths, so "w/o all" and "promptless" differ.
        singles = rows[1:1 + len(PROMPT_GROUPS)]
        soft = []
        worst = min(singles, key=lambda row: row.report.r1)
        if worst.settings["drop"] != ["P_l"]:
            soft.append(f"largest single-group R@1 drop is {worst.label}, not w/o P_l")
        return rows, soft

    def _baselines(self) -> tuple[list[AblationRow], list[str]]:
        train = self.load_split("train")
        val = self.load_split("val")
        bundle = self.load_trained_bundle()
        rows = [
            AblationRow(
                label="frozen-grounder",
                report=evaluate(GrounderDetector(bundle.grounder), val, self.cfg, label="frozen-grounder"),
            )
        ]
        for kind in BASELINES:
            self.seed_torch("baseline", kind)
            baseline = build_baseline(self.cfg, kind)
            train_prompt_baseline(bundle.grounder, baseline, train, self.cfg.stage3, self.seed("baseline", kind))
            report = evaluate(PromptBaselineDetector(bundle.grounder, baseline), val, self.cfg, label=f"prompt-{kind}")
            rows.append(
                AblationRow(
                    label=f"prompt-{kind}",
                    settings={"modalities": kind, "tokens": BASELINE_TOKENS, "depth": baseline.depth},
                    tunable_params=count_parameters(baseline),
                    report=report,
                )
            )
        rows.append(
            AblationRow(
                label="diff-prompt",
                tunable_params=count_parameters(bundle.tuner),
                report=evaluate(DiffPromptDetector(bundle), val, self.cfg, label="diff-prompt"),
            )
        )
        return rows, []


class ReportService(BundleService):
    """Parameter, FLOP and inference-time table of the prompted bundle."""

    @property
    def stage_name(self) -> str:
        return "report"

    def run(self) -> ComplexityTable:
        bundle = self.load_trained_bundle()
        table = count_params_and_flops(bundle)
        val = self.load_split("val")
        if len(val):
            batch = val.batch(range(min(len(val), 4))).to(self.device)
            table = table.model_copy(
                update={
                    "inference_ms": {
                        "frozen-grounder": measure_inference_ms(GrounderDetector(bundle.grounder), batch),
                        "diff-prompt": measure_inference_ms(DiffPromptDetector(bundle), batch),
                    }
                }
            )
        self.logger.info(
            "Complexity report",
            extra={"tunable_params": table.tunable_params, "tunable_fraction": table.tunable_fraction},
        )
        self.write_report(self.stage_name, table)
        return table


def run_command(
    command: str,
    cfg: RunConfig,
    *,
    split: str = "val",
    ablation: Optional[str] = None,
    dump: bool = False,
    depths: Iterable[int] = DEPTH_SWEEP,
):
    """
    Run one CLI command and return its manifest(s) or report.

    Raises:
        ConfigurationError: On an unknown command or ablation
        MissingDependencyError: If an upstream stage has not run
        ProvenanceError: If upstream artifacts do not match the config
    """
    paths = RunPaths.from_config(cfg)
    if command == "gen-data":
        return generate_data(cfg, paths)
    if command in STAGES:
        return STAGES[command](cfg, paths).run()
    if command == "evaluate":
        return EvaluateService(cfg, paths, split=split, dump=dump).run()
    if command == "ablate":
        return AblationService(cfg, ablation or "", paths, depths=depths).run()
    if command == "report":
        return ReportService(cfg, paths).run()
    raise ConfigurationError(f"Unknown command {command!r}", field="command", value=command)
