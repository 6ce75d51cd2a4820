"""Run the full pipeline under several seeds, summarize recall and check the directional targets."""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from diffprompt.core.logging import configure_logging
from diffprompt.schemas.config import RunConfig
from diffprompt.schemas.report import EvalReport
from diffprompt.services.pipeline_service import acceptance_checks, merge_checks, run_command

PIPELINE = ("gen-data", "pretrain", "train-vae", "train-generator", "tune-prompts", "evaluate", "report")


def run_seed(cfg: RunConfig) -> dict:
    """Run every stage and the strategy and depth ablations for one seed."""
    results = {}
    for command in PIPELINE:
        print(f"  [{cfg.seed}] {command}")
        results[command] = run_command(command, cfg)
    print(f"  [{cfg.seed}] ablate strategy")
    results["strategy"] = run_command("ablate", cfg, ablation="strategy")
    depths = (1, cfg.prompt.depth) if cfg.prompt.depth > 1 else (1,)
    print(f"  [{cfg.seed}] ablate depth {depths}")
    results["depth"] = run_command("ablate", cfg, ablation="depth", depths=depths)

    baseline_path = Path(cfg.out_dir) / "reports" / "eval-val-baseline.json"
    baseline = EvalReport.model_validate_json(baseline_path.read_text(encoding="utf-8"))
    checks = acceptance_checks(
        baseline,
        results["evaluate"],
        strategy=results["strategy"],
        depth=results["depth"],
        complexity=results["report"],
        vae=results["train-vae"],
    )
    return {
        "baseline": baseline.model_dump(mode="json"),
        "prompted": results["evaluate"].model_dump(mode="json"),
        "checks": checks,
    }


def summarize(results: list[dict]) -> dict:
    summary = {}
    for model in ("baseline", "prompted"):
        for metric in ("1", "5", "10"):
            values = np.array([r[model]["r_at"][metric] for r in results])
            summary[f"{model}_r{metric}"] = (float(values.mean()), float(values.std()))
        ub = np.array([r[model]["upper_bound"] for r in results])
        summary[f"{model}_ub"] = (float(ub.mean()), float(ub.std()))
    return summary


def seed_sweep(config: str | None, seeds: list[int], out: str) -> bool:
    """Train and evaluate one run directory per seed; True when every check passes on the seed mean."""
    base = RunConfig.load(config)
    results = []
    try:
        for seed in seeds:
            print(f"Running seed {seed}...")
            cfg = base.updated(seed=seed, out_dir=str(Path(out) / f"seed-{seed}"))
            results.append(run_seed(cfg))
    except Exception as e:
        print(f"Error during seed sweep: {e}")
        raise

    summary = summarize(results)
    checks = merge_checks([r["checks"] for r in results])
    print("\n" + "=" * 60)
    print(f"Validation recall over {len(seeds)} seeds (mean ± std)")
    print("=" * 60)
    for key, (mean, std) in summary.items():
        print(f"  {key:<16} {100 * mean:6.2f} ± {100 * std:5.2f}")
    print("-" * 60)
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        bound = "<" if check.upper_limit else ">="
        print(f"  {status}  {check.name:<24} {check.value:8.3f} {bound} {check.threshold:<6} {check.note}")
    print("=" * 60)

    path = Path(out) / "seed-sweep.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "seeds": seeds,
        "summary": summary,
        "checks": [check.model_dump(mode="json") for check in checks],
        "per_seed_checks": [[check.model_dump(mode="json") for check in r["checks"]] for r in results],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return all(check.passed for check in checks)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="runs/seed-sweep")
    args = parser.parse_args()
    configure_logging("WARNING")
    sys.exit(0 if seed_sweep(args.config, args.seeds, args.out) else 1)
