"""Training loop, ablation harness, and alignment-layer sweep.

Every step logs the loss decomposition (l_ccl, l_ps, l_clm, l_task and
their fixed-order sum l_total); a decomposition mismatch or a non-finite
component aborts the run with a diagnostic naming the first bad term. The
best epoch is selected on validation MAE by default, and all artifacts are
written atomically (temp file, then rename).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import RunConfig
from .data import FeatureArchive, SyntheticDims, generate_synthetic, load_archive, make_batches
from .encoders import parameter_checksum, save_flat_weights
from .metrics import EvalReport, evaluate
from .model import MultimodalSentimentModel, batch_tensors, build_model

ABLATION_VARIANTS = {
    "w/o-PF": {"use_personality": False},
    "w/o-BF": {"use_prefusion": False},
    "w/o-EF": {"use_enhanced_fusion": False},
    "w/o-Lps": {"use_align_ps": False},
    "w/o-Lclm": {"use_clm": False},
}


class NonFiniteLossError(RuntimeError):
    """A loss component stopped being finite during training."""


def total_loss(l_align, l_clm, l_task, use_personality: bool = True, use_clm: bool = True):
    """Fixed-order total: alignment + cross-modal contrastive + task L1.

    Disabled toggles contribute exactly zero; works on floats and tensors.
    """
    zero = l_task * 0.0
    align = l_align if use_personality else zero
    clm = l_clm if use_clm else zero
    return align + clm + l_task


@dataclass
class StepLog:
    step: int
    epoch: int
    l_cl: float
    l_ccl: float
    l_ps: float
    l_align: float
    l_clm: float
    l_task: float
    l_total: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    steps: list[StepLog]
    epoch_means: list[dict]
    val_reports: list[dict]
    best_epoch: int
    val_report_best: dict
    test_report: dict
    train_report_final: dict
    n_steps: int
    wall_clock_sec: float
    personality_checksum_stable: bool

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["steps"] = [s.to_dict() if isinstance(s, StepLog) else s for s in self.steps]
        return out

    def loss_curve(self, key: str = "l_total") -> list[float]:
        return [getattr(s, key) for s in self.steps]


def load_data(config: RunConfig) -> FeatureArchive:
    spec = config.data
    if spec["kind"] == "archive":
        return load_archive(spec["path"])
    dims = SyntheticDims(
        d_v=int(spec.get("d_v", 35)),
        d_a=int(spec.get("d_a", 74)),
        vocab=int(spec.get("vocab", 1000)),
    )
    return generate_synthetic(int(spec.get("seed", 42)), int(spec.get("n_per_split", 64)), dims)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def eval_split(model: MultimodalSentimentModel, archive: FeatureArchive, split: str, config: RunConfig) -> EvalReport:
    model.eval()
    preds, labels = [], []
    caps = (config.max_positions, None, None)
    with torch.no_grad():
        for batch in make_batches(archive, split, config.batch_size, seed=0, max_lens=caps):
            tensors = batch_tensors(batch, dtype=next(model.parameters()).dtype)
            out = model(tensors)
            preds.extend(out.preds.tolist())
            labels.extend(tensors["labels"].tolist())
    return evaluate(preds, labels)


def _component_floats(losses) -> dict[str, float]:
    comps = {
        "l_cl": losses.l_cl.detach().item(),
        "l_ccl": losses.l_ccl.detach().item(),
        "l_ps": losses.l_ps.detach().item(),
        "l_clm": losses.l_clm.detach().item(),
        "l_task": losses.l_task.detach().item(),
    }
    comps["l_align"] = comps["l_ccl"] + comps["l_ps"]
    comps["l_total"] = comps["l_align"] + comps["l_clm"] + comps["l_task"]
    return comps


def train(config: RunConfig, archive: FeatureArchive | None = None, out_dir: str | Path | None = None) -> RunRecord:
    """Train on the configured data; returns the full run record.

    ``out_dir`` (defaulting to ``config.out_dir``) receives run.json,
    config.json and, when enabled, best-epoch weights; pass an empty string
    to skip persistence entirely.
    """
    config = config.resolved()
    if archive is None:
        archive = load_data(config)
    start = time.perf_counter()

    model = build_model(config, archive.manifest)
    personality_before = parameter_checksum(model.personality)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=config.lr)
    caps = (config.max_positions, None, None)

    steps: list[StepLog] = []
    epoch_means: list[dict] = []
    val_reports: list[dict] = []
    best_epoch = -1
    best_value = math.inf
    best_state = None
    step = 0
    done = False

    # batch order is a pure function of (archive, seed): epochs replay the
    # same order, so an lr=0 run produces an exactly periodic loss curve
    train_batches = make_batches(archive, "train", config.batch_size, seed=config.seed, max_lens=caps)

    for epoch in range(config.epochs):
        model.train()
        epoch_comps: list[dict[str, float]] = []
        batches = train_batches
        for batch in batches:
            tensors = batch_tensors(batch)
            out = model(tensors)
            comps = _component_floats(out.losses)
            for name in ("l_ccl", "l_ps", "l_clm", "l_task"):
                if not math.isfinite(comps[name]):
                    raise NonFiniteLossError(f"{name} became non-finite at step {step}")
            resum = comps["l_align"] + comps["l_clm"] + comps["l_task"]
            if abs(resum - comps["l_total"]) > 1e-9:
                raise RuntimeError(f"loss decomposition mismatch at step {step}: {resum} vs {comps['l_total']}")
            if abs(out.losses.total.detach().item() - resum) > 1e-4:
                raise RuntimeError(f"graph total diverged from logged decomposition at step {step}")

            optimizer.zero_grad()
            out.losses.total.backward()
            optimizer.step()

            steps.append(StepLog(step=step, epoch=epoch, **comps))
            epoch_comps.append(comps)
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break

        means = {
            key: sum(c[key] for c in epoch_comps) / len(epoch_comps)
            for key in ("l_cl", "l_ccl", "l_ps", "l_align", "l_clm", "l_task", "l_total")
        }
        means["epoch"] = epoch
        epoch_means.append(means)

        val_report = eval_split(model, archive, "valid", config)
        val_reports.append(val_report.to_dict())
        value = val_report.mae if config.select_metric == "mae" else -(
            val_report.acc2_excl_zero if val_report.acc2_excl_zero is not None else val_report.acc2_incl_zero
        )
        if value < best_value:
            best_value = value
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if done:
            break

    train_report_final = eval_split(model, archive, "train", config)
    if best_state is not None:
        model.load_state_dict(best_state)
    test_report = eval_split(model, archive, "test", config)

    record = RunRecord(
        config=config.to_dict(),
        config_hash=config.hash(),
        steps=steps,
        epoch_means=epoch_means,
        val_reports=val_reports,
        best_epoch=best_epoch,
        val_report_best=val_reports[best_epoch],
        test_report=test_report.to_dict(),
        train_report_final=train_report_final.to_dict(),
        n_steps=step,
        wall_clock_sec=time.perf_counter() - start,
        personality_checksum_stable=parameter_checksum(model.personality) == personality_before,
    )

    target = config.out_dir if out_dir is None else out_dir
    if target:
        run_dir = Path(target)
        run_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(run_dir / "config.json", config.to_json())
        _atomic_write(run_dir / "run.json", json.dumps(record.to_dict(), indent=2))
        if config.save_weights:
            save_flat_weights(model, run_dir / "weights.jsonl")
    return record


def _report_csv_cell(report: dict, key: str) -> str:
    value = report.get(key)
    return "" if value is None else f"{value:.6f}"


def ablate(config: RunConfig, out_dir: str | Path | None = None) -> dict[str, RunRecord]:
    """Run the full model plus the five single-removal variants.

    All runs share seed, data, and base configuration; the comparison table
    lands in ablation.csv under the output directory.
    """
    config = config.resolved()
    archive = load_data(config)
    target = Path(config.out_dir if out_dir is None else out_dir) if (out_dir or config.out_dir) else None

    records: dict[str, RunRecord] = {}
    variants = {"full": {}, **ABLATION_VARIANTS}
    for name, toggles in variants.items():
        child = dataclasses.replace(config, save_weights=False, **toggles)
        child_dir = str(target / name.replace("/", "_")) if target else ""
        records[name] = train(child, archive=archive, out_dir=child_dir)

    if target:
        target.mkdir(parents=True, exist_ok=True)
        lines = ["variant,mae,corr,acc7,acc2_incl_zero,acc2_excl_zero,f1_incl_zero,f1_excl_zero"]
        for name, record in records.items():
            cells = [
                _report_csv_cell(record.test_report, k)
                for k in ("mae", "corr", "acc7", "acc2_incl_zero", "acc2_excl_zero", "f1_incl_zero", "f1_excl_zero")
            ]
            lines.append(",".join([name] + cells))
        _atomic_write(target / "ablation.csv", "\n".join(lines) + "\n")
    return records


def layer_sweep(config: RunConfig, out_dir: str | Path | None = None) -> dict[int, RunRecord]:
    """Train once per alignment position k = 1..L+2; emit a plot-ready CSV.

    The CSV reports the zero-excluded Acc2/F1 convention from the test set.
    """
    config = config.resolved()
    archive = load_data(config)
    target = Path(config.out_dir if out_dir is None else out_dir) if (out_dir or config.out_dir) else None

    records: dict[int, RunRecord] = {}
    for k in range(1, config.layers + 3):
        child = dataclasses.replace(config, alignment_layer=k, save_weights=False)
        child_dir = str(target / f"layer_{k:02d}") if target else ""
        records[k] = train(child, archive=archive, out_dir=child_dir)

    if target:
        target.mkdir(parents=True, exist_ok=True)
        lines = ["layer,acc2,f1"]
        for k, record in records.items():
            acc2 = _report_csv_cell(record.test_report, "acc2_excl_zero")
            f1 = _report_csv_cell(record.test_report, "f1_excl_zero")
            lines.append(f"{k},{acc2},{f1}")
        _atomic_write(target / "layer_sweep.csv", "\n".join(lines) + "\n")
    return records
