"""JSON report schemas emitted by evaluation, ablations and training stages."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

from diffprompt.core.exceptions import OutOfRangeError

RECALL_KS = (1, 5, 10)


class CategoryMetrics(BaseModel):
    """Recall metrics restricted to one target shape kind."""

    model_config = ConfigDict(frozen=True)

    n: int
    r_at: dict[int, float]
    upper_bound: float


class EvalReport(BaseModel):
    """
    Dataset-level grounding metrics.

    ``r_at`` maps K to the fraction of samples whose ground-truth box is matched
    among the top-K predictions; ``upper_bound`` uses the whole capped list.
    """

    model_config = ConfigDict(frozen=True)

    label: str = "bundle"
    split: str = "val"
    n: int
    r_at: dict[int, float]
    upper_bound: float
    iou_threshold: float = 0.5
    per_category: dict[str, CategoryMetrics] = Field(default_factory=dict)
    config_hash: str = ""
    seeds: dict[str, int] = Field(default_factory=dict)
    digests: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_chain(self) -> "EvalReport":
        chain = [0.0] + [self.r_at[k] for k in sorted(self.r_at)] + [self.upper_bound, 1.0]
        if any(a > b for a, b in zip(chain, chain[1:])):
            raise OutOfRangeError("recall chain", chain[1:-1], "0 <= R@1 <= R@5 <= R@10 <= UB <= 1")
        return self

    @property
    def r1(self) -> float:
        return self.r_at[1]

    @property
    def r5(self) -> float:
        return self.r_at[5]


class ComplexityRow(BaseModel):
    component: str
    total_params: int
    tunable_params: int
    flops: int = Field(description="Per forward pass, 2 FLOPs per multiply-accumulate")


class ComplexityTable(BaseModel):
    """Parameter and compute accounting of a prompted bundle."""

    rows: list[ComplexityRow]
    bundle_params: int
    tunable_params: int
    tunable_fraction: float
    grounder_flops: int
    generator_flops_per_step: int
    ddim_steps: int
    prompted_flops_per_sample: int
    inference_ms: dict[str, float] = Field(default_factory=dict)


class AblationRow(BaseModel):
    label: str
    settings: dict[str, Any] = Field(default_factory=dict)
    tunable_params: int = 0
    report: EvalReport


class AblationReport(BaseModel):
    kind: str
    rows: list[AblationRow]
    config_hash: str = ""
    soft_failures: list[str] = Field(default_factory=list)


class StageReport(BaseModel):
    """Summary of one training stage."""

    stage: str
    epochs: int
    epoch_losses: list[float]
    metrics: dict[str, float] = Field(default_factory=dict)
    evaluation: Optional[EvalReport] = None
    config_hash: str = ""
    digest: str = ""
    upstream: dict[str, str] = Field(default_factory=dict)


class AcceptanceCheck(BaseModel):
    """
    One directional check over a finished run.

    ``value`` and ``threshold`` share a unit; the check passes when
    value >= threshold, or value < threshold for upper limits.
    """

    model_config = ConfigDict(frozen=True)

    name: str
    value: float
    threshold: float
    upper_limit: bool = False
    note: str = ""

    @computed_field
    @property
    def passed(self) -> bool:
        return self.value < self.threshold if self.upper_limit else self.value >= self.threshold
