"""Condition grids: plan files, per-seed runs, median aggregation and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import metrics
from .datasets import (LabeledDataset, SyntheticShapesSpec, generate_synthetic, load_image_folder, split,
                       with_noisy_labels)
from .errors import InvalidSpecError
from .evaluation import Evaluator, train_eval_classifier
from .losses import LossWeights, Variant
from .networks import EvalClassifier
from .noise import NoiseKind, NoiseSpec, apply_noise, save_sidecar
from .trainer import TrainConfig, run_training

log = logging.getLogger(__name__)

OUT_ENV = "NOISY_I2I_OUT"
METRIC_NAMES = ("ca", "fid", "is_score", "kid")

# a mixed variant at alpha=1 is its plain-cycle counterpart, at alpha=0 it is RMIT
_ALPHA_ENDPOINTS = {
    Variant.RMIT_CYC_VCYC: Variant.STARGAN,
    Variant.RMIT_RECYC_VCYC: Variant.STARGAN_RECYC,
}


@dataclass(frozen=True)
class Cell:
    variant: Variant
    classifier: str = "naive"
    noise: str = "none"
    rate: float = 0.0
    alpha: float | None = None
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise InvalidSpecError("a cell needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidSpecError("duplicate seeds in a cell")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise InvalidSpecError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def condition(self) -> str:
        return "clean" if self.noise == "none" else f"{self.noise} {self.rate:g}"

    @property
    def row(self) -> str:
        return self.variant.value if self.classifier == "naive" else f"{self.variant.value}+{self.classifier}"

    def as_dict(self) -> dict:
        return {"variant": self.variant.value, "classifier": self.classifier, "noise": self.noise,
                "rate": self.rate, "alpha": self.alpha, "seeds": list(self.seeds)}


@dataclass
class ExperimentPlan:
    """Declarative plan; see ``plans/*.yaml`` for the key schema."""

    cells: list[Cell]
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    train: dict = field(default_factory=dict)  # TrainConfig overrides shared by all cells
    weights: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    aggregation: str = "median"
    output_root: str = "runs"
    name: str = "plan"

    def __post_init__(self):
        if not self.cells:
            raise InvalidSpecError("plan has no cells")
        if self.aggregation != "median":
            raise InvalidSpecError("only median aggregation is supported")
        if self.dataset.get("kind", "synthetic") not in ("synthetic", "folder"):
            raise InvalidSpecError(f"unknown dataset kind {self.dataset.get('kind')!r}")
        for cell in self.cells:
            for seed in cell.seeds:
                self.config_for(cell, seed)  # every cell must resolve

    @property
    def num_domains(self) -> int:
        if self.dataset.get("kind", "synthetic") == "folder":
            return int(self.dataset["num_domains"])
        return int(self.dataset.get("num_domains", 3))

    def config_for(self, cell: Cell, seed: int) -> TrainConfig:
        try:
            weights = dict(self.weights)
            if cell.alpha is not None:
                weights["alpha"] = cell.alpha
            c = self.num_domains
            kind = NoiseKind(cell.noise)
            noise = NoiseSpec(kind, cell.rate if kind is not NoiseKind.NONE else 0.0, c)
            ds = self.dataset
            return TrainConfig(
                variant=cell.variant, weights=LossWeights(**weights), robust_method=cell.classifier,
                noise=noise, seed=seed, num_domains=c,
                image_size=int(ds.get("image_size", 32)), image_channels=int(ds.get("channels", 3)),
                **self.train,
            )
        except InvalidSpecError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise InvalidSpecError(f"cell {cell.as_dict()} does not resolve: {e}") from e

    def runs(self):
        for cell in self.cells:
            for seed in cell.seeds:
                yield cell, seed, self.config_for(cell, seed)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        if not isinstance(d, dict) or "cells" not in d:
            raise InvalidSpecError("plan must be a mapping with a 'cells' list")
        d = dict(d)
        defaults = d.pop("cell_defaults", {})
        cells = []
        for raw in d.pop("cells"):
            if not isinstance(raw, dict):
                raise InvalidSpecError(f"cell must be a mapping, got {raw!r}")
            merged = {**defaults, **raw}
            # list-valued variant / rate expand into one cell per combination
            variants = merged.pop("variant", None)
            rates = merged.pop("rate", 0.0)
            variants = variants if isinstance(variants, list) else [variants]
            rates = rates if isinstance(rates, list) else [rates]
            for v, r in itertools.product(variants, rates):
                try:
                    cells.append(Cell(variant=v, rate=float(r), **merged))
                except TypeError as e:
                    raise InvalidSpecError(f"bad cell {raw}: {e}") from e
        known = {"dataset", "train", "weights", "eval", "aggregation", "output_root", "name"}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpecError(f"unknown plan keys: {sorted(unknown)}")
        return cls(cells=cells, **d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentPlan":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as e:
            raise InvalidSpecError(f"cannot parse {path}: {e}") from e
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {"name": self.name, "dataset": self.dataset, "train": self.train, "weights": self.weights,
                "eval": self.eval, "aggregation": self.aggregation, "output_root": self.output_root,
                "cells": [c.as_dict() for c in self.cells]}


def resolve_output_root(plan: ExperimentPlan, out: str | Path | None = None) -> Path:
    """``--out`` beats the environment override, which beats the plan."""
    if out is not None:
        return Path(out)
    return Path(os.environ.get(OUT_ENV) or plan.output_root)


# --- data -----------------------------------------------------------------

def load_samples(dataset: dict):
    kind = dataset.get("kind", "synthetic")
    if kind == "synthetic":
        spec = SyntheticShapesSpec(
            num_domains=int(dataset.get("num_domains", 3)),
            samples_per_domain=int(dataset.get("samples_per_domain", 220)),
            image_size=int(dataset.get("image_size", 32)),
            seed=int(dataset.get("seed", 0)),
        )
        samples = generate_synthetic(spec)
    else:
        samples = load_image_folder(dataset["root"], int(dataset.get("image_size", 32)),
                                    int(dataset.get("channels", 3)))
    return split(samples, float(dataset.get("train_fraction", 0.9)), seed=int(dataset.get("split_seed", 0)),
                 train_size=dataset.get("train_size"))


def data_key(plan: ExperimentPlan) -> str:
    """Hash of everything outside TrainConfig that changes a run's outcome."""
    blob = json.dumps({"dataset": plan.dataset, "eval": plan.eval}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _eval_classifier(plan: ExperimentPlan, train, root: Path) -> EvalClassifier:
    """Train once per (output root, data settings); every run reuses the same weights."""
    path = root / f"eval_classifier-{data_key(plan)}.pt"
    c = plan.num_domains
    width = int(plan.eval.get("width", 16))
    model = EvalClassifier(train[0].image.shape[0], train[0].image.shape[-1], c, width)
    if path.exists():
        model.load_state_dict(torch.load(path))
        model.eval()
        model.trained = True
        return model
    model = train_eval_classifier(LabeledDataset(train, expose_clean=True), c,
                                  epochs=int(plan.eval.get("classifier_epochs", 8)),
                                  seed=int(plan.eval.get("seed", 0)), width=width)
    root.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(model.state_dict(), tmp)
    tmp.replace(path)
    return model


def run_id(plan: ExperimentPlan, config: TrainConfig) -> str:
    return hashlib.sha256(f"{config.config_hash()}:{data_key(plan)}".encode()).hexdigest()[:16]


def run_dir(root: Path, plan: ExperimentPlan, config: TrainConfig) -> Path:
    return root / "runs" / run_id(plan, config)


def _run_one(plan_dict: dict, cell_index: int, seed: int, root: str, resume: bool) -> dict:
    """Train one (cell, seed); returns the result record. Runs in a worker process."""
    torch.set_num_threads(1)
    plan = ExperimentPlan.from_dict(plan_dict)
    cell = plan.cells[cell_index]
    config = plan.config_for(cell, seed)
    root = Path(root)
    out = run_dir(root, plan, config)
    done = out / "result.json"
    if done.exists():
        return json.loads(done.read_text())
    train_s, test_s = load_samples(plan.dataset)
    eval_cls = _eval_classifier(plan, train_s, root)
    clean = [s.clean_label for s in train_s]
    # corruption is re-drawn for every trial seed
    noisy = apply_noise(clean, config.noise, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    save_sidecar(out / "labels.json", [s.sample_id for s in train_s], clean, noisy)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    train = LabeledDataset(with_noisy_labels(train_s, noisy))
    evaluator = Evaluator(eval_cls, LabeledDataset(train_s, expose_clean=True),
                          LabeledDataset(test_s, expose_clean=True), plan.num_domains,
                          kid_splits=int(plan.eval.get("kid_splits", metrics.KID_SPLITS)),
                          kid_split_size=int(plan.eval.get("kid_split_size", metrics.KID_SPLIT_SIZE)))
    result = run_training(config, train, evaluator, out_dir=out, resume=resume)
    reports = result.state.reports
    record = {
        "cell": cell.as_dict(), "cell_index": cell_index, "seed": seed,
        "config_hash": config.config_hash(), "run_id": run_id(plan, config), "row": cell.row, "condition": cell.condition,
        "final": {k: reports[-1][k] for k in METRIC_NAMES} if reports else None,
        "reports": reports,
        "trajectory": [list(p) for p in result.trajectory.points],
    }
    tmp = done.with_suffix(".tmp")
    tmp.write_text(json.dumps(record))
    tmp.replace(done)
    return record


@dataclass
class PlanOutcome:
    root: Path
    results: list[dict]
    failures: list[dict]

    @property
    def complete(self) -> bool:
        return not self.failures


def run_plan(plan: ExperimentPlan, workers: int = 1, out: str | Path | None = None,
             resume: bool = False) -> PlanOutcome:
    """Train every (cell, seed) not already finished, then write the report.

    Failed runs are recorded in ``failures.json`` and left out of the medians.
    """
    root = resolve_output_root(plan, out)
    root.mkdir(parents=True, exist_ok=True)
    (root / "plan.json").write_text(json.dumps(plan.to_dict(), indent=1))
    train_s, _ = load_samples(plan.dataset)
    _eval_classifier(plan, train_s, root)  # before forking so workers share one copy
    jobs = [(i, seed) for i, cell in enumerate(plan.cells) for seed in cell.seeds]
    plan_dict = plan.to_dict()
    results, failures = [], []

    def collect(job, fn):
        try:
            results.append(fn())
        except Exception as e:  # a failed run must not sink the whole plan
            log.error("run cell=%d seed=%d failed: %s", job[0], job[1], e)
            failures.append({"cell": plan.cells[job[0]].as_dict(), "seed": job[1], "error": repr(e),
                             "traceback": traceback.format_exc()})

    if workers <= 1:
        for job in jobs:
            collect(job, lambda job=job: _run_one(plan_dict, *job, str(root), resume))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(job, pool.submit(_run_one, plan_dict, *job, str(root), resume)) for job in jobs]
            for job, fut in futures:
                collect(job, fut.result)
    results.sort(key=lambda r: (r["cell_index"], r["seed"]))
    (root / "failures.json").write_text(json.dumps(failures, indent=1))
    write_report(root, results, expected=plan)
    return PlanOutcome(root, results, failures)


def load_results(root: str | Path) -> list[dict]:
    """Finished runs under ``root``, restricted to its current plan.json when there is one."""
    root = Path(root)
    paths = sorted(root.glob("runs/*/result.json"))
    if (root / "plan.json").exists():
        plan = ExperimentPlan.from_dict(json.loads((root / "plan.json").read_text()))
        wanted = {run_id(plan, plan.config_for(c, seed)) for c in plan.cells for seed in c.seeds}
        paths = [p for p in paths if p.parent.name in wanted]
    results = [json.loads(p.read_text()) for p in paths]
    return sorted(results, key=lambda r: (r["cell_index"], r["seed"], r["config_hash"]))


# --- aggregation ----------------------------------------------------------

def lower_median(values) -> float:
    """Median; for an even count the lower of the two middle values."""
    vals = sorted(values)
    if not vals:
        raise InvalidSpecError("median of an empty set")
    return vals[(len(vals) - 1) // 2]


def aggregate(results: list[dict]) -> list[dict]:
    """One row per cell: lower medians of the final metrics over its seeds."""
    groups: dict = {}
    for r in results:
        if r.get("final") is None:
            continue
        key = (r["row"], r["condition"], r["cell"]["alpha"])
        groups.setdefault(key, []).append(r)
    rows = []
    for (row, condition, alpha), runs in groups.items():
        entry = {"model": row, "condition": condition, "alpha": alpha, "trials": len(runs),
                 "config_hashes": ";".join(sorted(r["config_hash"] for r in runs))}
        for m in METRIC_NAMES:
            entry[m] = lower_median(r["final"][m] for r in runs)
        rows.append(entry)
    return rows


def _ordered(values):
    return list(dict.fromkeys(values))


def format_table(rows: list[dict], metric_cols=("ca", "fid")) -> str:
    """Models down, noise conditions across, each group ``CA | FID``."""
    models = _ordered(r["model"] + ("" if r["alpha"] is None else f" (alpha={r['alpha']:g})") for r in rows)
    conditions = _ordered(r["condition"] for r in rows)
    lookup = {(r["model"] + ("" if r["alpha"] is None else f" (alpha={r['alpha']:g})"), r["condition"]): r
              for r in rows}
    headers = {"ca": "CA", "fid": "FID", "is_score": "IS", "kid": "KID"}
    width = 9
    name_w = max(len("model"), *(len(m) for m in models))
    group_w = len(metric_cols) * (width + 3) - 3
    lines = ["medians over trials (lower median for even trial counts)"]
    lines.append(" " * name_w + " || " + " || ".join(c.center(group_w) for c in conditions))
    sub = " | ".join(headers[m].rjust(width) for m in metric_cols)
    lines.append("model".ljust(name_w) + " || " + " || ".join(sub for _ in conditions))
    lines.append("-" * len(lines[-1]))
    for m in models:
        cells = []
        for c in conditions:
            r = lookup.get((m, c))
            if r is None:
                cells.append(" | ".join("-".rjust(width) for _ in metric_cols))
            else:
                cells.append(" | ".join(_fmt(r[k]).rjust(width) for k in metric_cols))
        lines.append(m.ljust(name_w) + " || " + " || ".join(cells))
    return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return f"{v:.4f}" if abs(v) < 1 else f"{v:.1f}"


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["model", "condition", "alpha", "trials", *METRIC_NAMES, "config_hashes"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else r[k]) for k in cols})
    return buf.getvalue()


def write_report(root: str | Path, results: list[dict], expected: ExperimentPlan | None = None) -> list[dict]:
    root = Path(root)
    rows = aggregate(results)
    if not rows:
        (root / "report.txt").write_text("no completed runs\n")
        return rows
    text = format_table(rows, ("ca", "fid", "is_score", "kid"))
    if expected is not None:
        have = {(r["cell_index"], r["seed"]) for r in results}
        missing = [(c.as_dict(), s) for i, c in enumerate(expected.cells) for s in c.seeds if (i, s) not in have]
        if missing:
            text += f"\nincomplete: {len(missing)} run(s) missing\n"
            text += "".join(f"  {c['variant']} {c['classifier']} {c['noise']} {c['rate']} seed={s}\n"
                            for c, s in missing)
    (root / "report.csv").write_text(report_csv(rows))
    (root / "report.txt").write_text(text)
    return rows


# --- sweeps and correlations ---------------------------------------------

def alpha_sweep(base: Cell, alphas) -> list[Cell]:
    """Cells for a mixture-rate sweep; the endpoints become the unmixed variants."""
    if base.variant not in _ALPHA_ENDPOINTS:
        raise InvalidSpecError(f"{base.variant.value} has no mixture rate")
    cells = []
    for a in alphas:
        a = float(a)
        if not 0.0 <= a <= 1.0:
            raise InvalidSpecError(f"alpha must lie in [0, 1], got {a}")
        if a == 1.0:
            cells.append(replace(base, variant=_ALPHA_ENDPOINTS[base.variant], alpha=None))
        elif a == 0.0:
            cells.append(replace(base, variant=Variant.RMIT, alpha=None))
        else:
            cells.append(replace(base, alpha=a))
    return cells


def sweep_plan(plan: ExperimentPlan, alphas) -> ExperimentPlan:
    cells = list(itertools.chain.from_iterable(
        alpha_sweep(c, alphas) if c.variant in _ALPHA_ENDPOINTS else [c] for c in plan.cells))
    return replace(plan, cells=_ordered(cells))


def sweep_rows(results: list[dict], alphas) -> list[dict]:
    """Median CA/FID per mixture rate, endpoint runs mapped back to alpha 0 / 1."""
    out = []
    for a in alphas:
        a = float(a)
        picked = [r for r in results if _alpha_of(r) == a and r.get("final")]
        if picked:
            out.append({"alpha": a, "trials": len(picked),
                        **{m: lower_median(r["final"][m] for r in picked) for m in ("ca", "fid")}})
    return out


def _alpha_of(r: dict) -> float | None:
    cell = r["cell"]
    if cell["alpha"] is not None:
        return float(cell["alpha"])
    v = Variant.parse(cell["variant"])
    if v is Variant.RMIT:
        return 0.0
    if v in _ALPHA_ENDPOINTS.values():
        return 1.0
    return None


def correlation_report(results: list[dict]) -> tuple[dict, list]:
    """Pairwise ``|rho|`` across every completed run; constant series are flagged."""
    points = [r["final"] for r in results if r.get("final")]
    if len(points) < 5:
        raise InvalidSpecError(f"need at least 5 result points, got {len(points)}")
    table = {m: np.array([p[m] for p in points], dtype=np.float64) for m in METRIC_NAMES}
    rho, flagged = {}, []
    for a, b in itertools.combinations(METRIC_NAMES, 2):
        try:
            rho[(a, b)] = metrics.spearman_abs(table[a], table[b])
        except metrics.ConstantSeriesError:
            flagged.append((a, b))
    return rho, flagged
