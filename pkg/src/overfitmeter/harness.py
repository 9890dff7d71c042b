"""Experiment pipelines: pool training, label-noise retraining, input sweeps, reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import subprocess
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import ExperimentConfig, PoolEntry
from .data import RANGE_MAX, Dataset, inject_label_noise, load_cifar_binary, load_idx, split, subsample, synth_blobs
from .metrics import METRIC_COLUMNS, AccuracyCurve, OverfitReport, median_report
from .nn import Model, build_model, evaluate, load_model, save_model, train
from .perturb import CorruptionSpec, SpatialParams, corrupt, fgsm, gaussian_noise, spatial_attack

log = logging.getLogger(__name__)

INPUT_METHODS = ("fgsm", "spatial", "gaussian", "corruption")
RESULTS_COLUMNS = ["model_id", "method", "level", "accuracy", "seed"]
METRICS_COLUMNS = ["model_id", "gap", *METRIC_COLUMNS, "train_accuracy", "val_accuracy", "fgsm_error_rate"]

# rank direction: True -> larger is the better fit
RANK_METRICS = {
    "pmv-slope": ("pmv_slope", True),
    "ptv-slope": ("ptv_slope", False),
    "max-decrease": ("{method}_max_decrease", False),
    "sse": ("{method}_sse", False),
}


class PipelineError(RuntimeError):
    pass


@dataclass
class CellFailure:
    model_id: str
    seed: int
    stage: str
    level: Optional[float]
    error: str

    def describe(self) -> str:
        at = "" if self.level is None else f" at level {self.level:g}"
        return f"{self.model_id} seed {self.seed} {self.stage}{at}: {self.error}"


# --------------------------------------------------------------------- data


@dataclass(frozen=True)
class PreparedData:
    full: Dataset
    reduced: Dataset
    validation: Dataset

    def train_set(self, entry: PoolEntry) -> Dataset:
        return self.full if entry.spec.train_size == "full" else self.reduced


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """Load the configured source and derive (S_full, S_reduced, V), all in unit range."""
    dc = config.data
    if dc.source == "synthetic":
        ds = synth_blobs(dc.classes, dc.per_class, dc.image_side, dc.seed, dc.jitter, dc.channels)
    elif dc.source == "idx":
        if not dc.images or not dc.labels:
            raise PipelineError("data.source idx needs data.images and data.labels")
        ds = load_idx(dc.images, dc.labels, num_classes=dc.classes)
    else:
        if not dc.paths:
            raise PipelineError("data.source cifar needs data.paths")
        ds = load_cifar_binary(dc.paths)
    ds = ds.to_range("unit")
    if dc.limit is not None and dc.limit < len(ds):
        ds = subsample(ds, dc.limit, dc.seed)
    full, val = split(ds, dc.train_fraction, dc.seed)
    n_reduced = max(1, int(math.floor(dc.reduced_fraction * len(full) + 0.5)))
    reduced = subsample(full, n_reduced, dc.seed + 1)
    return PreparedData(full, reduced, val)


# --------------------------------------------------------------- seeding


def training_seed(run_seed: int, model_id: str) -> int:
    """Initialisation/shuffle seed shared by every retraining of one model."""
    return int(np.random.SeedSequence([run_seed, zlib.crc32(model_id.encode())]).generate_state(1)[0])


def noise_seed(run_seed: int, level: float) -> np.random.SeedSequence:
    """Independent label-noise draw per (run seed, level)."""
    return np.random.SeedSequence([run_seed, int(round(level * 1_000_000)), 0x4E])


def fresh_model(entry: PoolEntry, train_set: Dataset, run_seed: int) -> Model:
    cfg = dataclasses.replace(entry.training, seed=training_seed(run_seed, entry.model_id))
    model = build_model(entry.spec, train_set.image_shape, train_set.num_classes, cfg)
    model.pool_id = entry.model_id
    return model


# ------------------------------------------------------------- label noise


@dataclass
class NoiseCell:
    model_id: str
    seed: int
    level: float
    pmv: float
    ptv: float
    val: Optional[float] = None


def _noise_cell(entry: PoolEntry, data: PreparedData, seed: int, level: float,
                checkpoint: Optional[str] = None):
    """One retraining at one noise level; returns NoiseCell or CellFailure."""
    try:
        clean = data.train_set(entry)
        if level == 0 and checkpoint and Path(checkpoint).exists():
            model = load_model(checkpoint)
            noisy = clean
        else:
            noisy, _ = inject_label_noise(clean, level, noise_seed(seed, level))
            model = train(fresh_model(entry, clean, seed), noisy, None)
            if level == 0 and checkpoint:
                save_model(model, checkpoint)
        val = evaluate(model, data.validation) if level == 0 else None
        return NoiseCell(entry.model_id, seed, level, evaluate(model, noisy), evaluate(model, clean), val)
    except Exception as exc:  # isolate one grid cell
        log.debug("cell failed\n%s", traceback.format_exc())
        return CellFailure(entry.model_id, seed, "label_noise", level, f"{type(exc).__name__}: {exc}")


def _pool_map(fn, jobs: List[tuple], workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, *zip(*jobs)))


def checkpoint_path(out_dir, model_id: str, seed: int) -> Path:
    return Path(out_dir) / "models" / f"{model_id}_s{seed}.ofm"


def run_label_noise(
    config: ExperimentConfig,
    data: Optional[PreparedData] = None,
    out_dir=None,
) -> Tuple[List[AccuracyCurve], List[AccuracyCurve], List[CellFailure], Dict[Tuple[str, int], float]]:
    """Retrain every (model, seed, level) once and evaluate on both label sets.

    Returns (pmv curves, ptv curves, failures, validation accuracies of the
    level-0 models).  A curve with a failed level is dropped.
    """
    data = data or prepare_data(config)
    levels = config.schedules.noise_levels
    jobs = []
    for entry in config.pool:
        for seed in config.seeds:
            ckpt = str(checkpoint_path(out_dir, entry.model_id, seed)) if out_dir else None
            if ckpt:
                Path(ckpt).parent.mkdir(parents=True, exist_ok=True)
            for level in levels:
                jobs.append((entry, data, seed, float(level), ckpt))
    results = _pool_map(_noise_cell, jobs, config.workers)
    failures = [r for r in results if isinstance(r, CellFailure)]
    cells = {(r.model_id, r.seed, r.level): r for r in results if isinstance(r, NoiseCell)}
    pmv, ptv, val = [], [], {}
    for entry in config.pool:
        for seed in config.seeds:
            row = [cells.get((entry.model_id, seed, float(lv))) for lv in levels]
            if any(c is None for c in row):
                continue
            pmv.append(AccuracyCurve(levels, [c.pmv for c in row], "pmv", entry.model_id, seed))
            ptv.append(AccuracyCurve(levels, [c.ptv for c in row], "ptv", entry.model_id, seed))
            val[(entry.model_id, seed)] = row[0].val
    return pmv, ptv, failures, val


def run_pmv(config: ExperimentConfig, data: Optional[PreparedData] = None) -> List[AccuracyCurve]:
    """Accuracy on the noisy training labels after retraining on them."""
    pmv, _, failures, _ = run_label_noise(config, data)
    _raise_if_all_failed(pmv, failures)
    return pmv


def run_ptv(config: ExperimentConfig, data: Optional[PreparedData] = None) -> List[AccuracyCurve]:
    """Accuracy on the clean training labels after retraining on noisy ones."""
    _, ptv, failures, _ = run_label_noise(config, data)
    _raise_if_all_failed(ptv, failures)
    return ptv


def _raise_if_all_failed(curves, failures):
    if failures and not curves:
        raise PipelineError("; ".join(f.describe() for f in failures))


# --------------------------------------------------------------- sweeps


def sweep_subset(train_set: Dataset, count: int, seed: int) -> Dataset:
    if count >= len(train_set):
        return train_set
    return subsample(train_set, count, seed)


def run_input_sweep(
    model,
    method: str,
    schedule: Sequence[float],
    dataset: Dataset,
    seed: int = 0,
    spatial_mode: str = "worst_case",
    shift_step: int = 1,
    angle_step: Optional[float] = None,
    corruption_kinds: Sequence[str] = ("gaussian_noise_c", "defocus_blur", "fog", "contrast"),
) -> AccuracyCurve:
    """Accuracy of a trained ``model`` on ``dataset`` perturbed at each strength.

    FGSM and Gaussian strengths are in unit-range units and rescaled to the
    model's input range; spatial strengths are pixels/degrees; corruption
    strengths are severities averaged over ``corruption_kinds``.
    """
    if method not in INPUT_METHODS:
        raise ValueError(f"unknown sweep method {method!r}")
    data = dataset.to_range(model.input_range)
    x, y = data.images, data.labels
    scale = RANGE_MAX[model.input_range]
    accs = []
    for level in schedule:
        if level == 0:
            accs.append(evaluate(model, data))
            continue
        if method == "fgsm":
            xs = [fgsm(model, x, y, level * scale)]
        elif method == "gaussian":
            xs = [gaussian_noise(x, level * scale, np.random.SeedSequence([seed, int(level * 1e6)]),
                                 model.input_range)]
        elif method == "spatial":
            params = SpatialParams(level, shift_step, angle_step, spatial_mode)
            xs = [spatial_attack(model, x, y, params, seed=seed)]
        else:
            xs = [corrupt(x, CorruptionSpec(kind, int(level)), model.input_range, seed=seed)
                  for kind in corruption_kinds]
        accs.append(float(np.mean([evaluate(model, dataclasses.replace(data, images=xi)) for xi in xs])))
    return AccuracyCurve(schedule, accs, method, getattr(model, "pool_id", ""), seed)


def sweep_methods(method: str) -> List[Tuple[str, dict]]:
    """(curve name, extra kwargs) pairs produced for one CLI sweep method."""
    if method == "spatial":
        return [("spatial", {"spatial_mode": "worst_case"}), ("spatial_random", {"spatial_mode": "random"})]
    return [(method, {})]


def _sweep_cell(entry: PoolEntry, data: PreparedData, seed: int, method: str,
                config: ExperimentConfig, checkpoint: str):
    try:
        model = load_model(checkpoint)
        subset = sweep_subset(data.train_set(entry), config.schedules.sweep_samples, config.data.seed + 2)
        sch = config.schedules
        out = []
        for name, extra in sweep_methods(method):
            if method == "spatial":
                schedule = entry.spatial or sch.spatial
                extra = dict(extra, shift_step=sch.spatial_shift_step, angle_step=sch.spatial_angle_step)
            elif method == "corruption":
                schedule = sch.corruption
                extra = dict(extra, corruption_kinds=sch.corruption_kinds)
            else:
                schedule = getattr(sch, method)
            curve = run_input_sweep(model, method, schedule, subset, seed=seed, **extra)
            out.append(dataclasses.replace(curve, kind=name, model_id=entry.model_id))
        if method == "corruption" and len(sch.corruption_kinds) > 1:
            for kind in sch.corruption_kinds:
                curve = run_input_sweep(model, "corruption", sch.corruption, subset, seed=seed,
                                        corruption_kinds=(kind,))
                out.append(dataclasses.replace(curve, kind=f"corruption_{kind}", model_id=entry.model_id))
        return out
    except Exception as exc:
        log.debug("sweep failed\n%s", traceback.format_exc())
        return CellFailure(entry.model_id, seed, f"sweep:{method}", None, f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------- pipeline


class Pipeline:
    """Stateful driver writing intermediate artefacts under ``out_dir``."""

    def __init__(self, config: ExperimentConfig, out_dir=None):
        self.config = config
        self.out = Path(out_dir or config.output_dir)
        self.failures: List[CellFailure] = []
        self._data: Optional[PreparedData] = None

    @property
    def data(self) -> PreparedData:
        if self._data is None:
            self._data = prepare_data(self.config)
        return self._data

    def _ckpt(self, model_id: str, seed: int) -> Path:
        return checkpoint_path(self.out, model_id, seed)

    def train_pool(self) -> List[dict]:
        """Train (or reuse) the clean baseline of every model and seed."""
        data = self.data  # data errors abort the run instead of failing every cell
        (self.out / "models").mkdir(parents=True, exist_ok=True)
        rows = []
        for entry in self.config.pool:
            for seed in self.config.seeds:
                path = self._ckpt(entry.model_id, seed)
                try:
                    if path.exists():
                        model = load_model(path)
                    else:
                        clean = data.train_set(entry)
                        model = train(fresh_model(entry, clean, seed), clean, None)
                        save_model(model, path)
                    rows.append({
                        "model_id": entry.model_id,
                        "seed": seed,
                        "train_accuracy": evaluate(model, data.train_set(entry)),
                        "val_accuracy": evaluate(model, data.validation),
                        "parameters": model.num_parameters(),
                        "train_size": len(data.train_set(entry)),
                    })
                except Exception as exc:
                    self.failures.append(CellFailure(entry.model_id, seed, "train", None,
                                                     f"{type(exc).__name__}: {exc}"))
        _write_csv(self.out / "baseline.csv",
                   ["model_id", "seed", "train_accuracy", "val_accuracy", "parameters", "train_size"],
                   sorted(rows, key=lambda r: (r["model_id"], r["seed"])))
        return rows

    def label_noise(self) -> Tuple[List[AccuracyCurve], List[AccuracyCurve]]:
        pmv, ptv, failures, _ = run_label_noise(self.config, self.data, self.out)
        self.failures.extend(failures)
        write_curves(self.out / "curves" / "pmv.csv", pmv)
        write_curves(self.out / "curves" / "ptv.csv", ptv)
        return pmv, ptv

    def sweep(self, method: str) -> List[AccuracyCurve]:
        if method not in INPUT_METHODS:
            raise ValueError(f"unknown sweep method {method!r}")
        if any(not self._ckpt(e.model_id, s).exists() for e in self.config.pool for s in self.config.seeds):
            self.train_pool()
        jobs = [
            (entry, self.data, seed, method, self.config, str(self._ckpt(entry.model_id, seed)))
            for entry in self.config.pool
            for seed in self.config.seeds
            if self._ckpt(entry.model_id, seed).exists()
        ]
        curves = []
        for res in _pool_map(_sweep_cell, jobs, self.config.workers):
            if isinstance(res, CellFailure):
                self.failures.append(res)
            else:
                curves.extend(res)
        write_curves(self.out / "curves" / f"{method}.csv", curves)
        return curves

    def collect_reports(self) -> List[OverfitReport]:
        """Per (model, seed) reports from every curve file and the baseline table."""
        baseline = {}
        base_path = self.out / "baseline.csv"
        if base_path.exists():
            with base_path.open(newline="") as fh:
                for row in csv.DictReader(fh):
                    baseline[(row["model_id"], int(row["seed"]))] = row
        curves: List[AccuracyCurve] = []
        for path in sorted((self.out / "curves").glob("*.csv")):
            curves.extend(read_curves(path))
        return build_reports(curves, baseline)

    def report(self) -> Dict[str, Path]:
        reports = self.collect_reports()
        manifest = {
            "package_version": __version__,
            "code_revision": _code_revision(),
            "config": self.config.to_dict(),
            "seeds": list(self.config.seeds),
            "failures": [dataclasses.asdict(f) for f in self.failures],
        }
        return emit_report(reports, self.out, manifest=manifest)

    def run_all(self, methods: Iterable[str] = INPUT_METHODS) -> Dict[str, Path]:
        self.train_pool()
        self.label_noise()
        for method in methods:
            self.sweep(method)
        return self.report()


def build_reports(curves: Iterable[AccuracyCurve], baseline: Optional[dict] = None) -> List[OverfitReport]:
    baseline = baseline or {}
    grouped: Dict[Tuple[str, int], OverfitReport] = {}
    for c in curves:
        key = (c.model_id, c.seed)
        grouped.setdefault(key, OverfitReport(c.model_id)).curves[c.kind] = c
    for key, row in baseline.items():
        rep = grouped.setdefault(key, OverfitReport(key[0]))
        rep.train_accuracy = float(row["train_accuracy"])
        rep.val_accuracy = float(row["val_accuracy"])
    out = []
    for key in sorted(grouped):
        rep = grouped[key]
        if rep.train_accuracy is None and "pmv" in rep.curves:
            rep.train_accuracy = float(rep.curves["pmv"].accuracies[0])
        out.append(rep.compute())
    return out


# -------------------------------------------------------------- ranking


def rank_models(reports: Sequence[OverfitReport], metric: str = "pmv-slope",
                method: str = "spatial") -> List[OverfitReport]:
    """Best fit first.  Slope of PMV ranks descending; every other metric ascending."""
    if metric not in RANK_METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(RANK_METRICS)}")
    if len(reports) < 2:
        raise ValueError("ranking needs at least two reports")
    column, larger_better = RANK_METRICS[metric]
    column = column.format(method=method)
    for rep in reports:
        if column not in rep.scalars or not math.isfinite(rep.scalars[column]):
            raise KeyError(f"model {rep.model_id!r} has no {column} value")
    sign = -1.0 if larger_better else 1.0
    return sorted(reports, key=lambda r: (sign * r.scalars[column], r.model_id))


# ---------------------------------------------------------------- output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(row.get(c)) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def curve_rows(curves: Iterable[AccuracyCurve]) -> List[dict]:
    rows = [
        {"model_id": c.model_id, "method": c.kind, "level": float(lv), "accuracy": float(acc), "seed": c.seed}
        for c in curves
        for lv, acc in zip(c.levels, c.accuracies)
    ]
    rows.sort(key=lambda r: (r["model_id"], r["method"], r["seed"], r["level"]))
    return rows


def write_curves(path, curves: Iterable[AccuracyCurve]) -> None:
    _write_csv(Path(path), RESULTS_COLUMNS, curve_rows(curves))


def read_curves(path) -> List[AccuracyCurve]:
    groups: Dict[Tuple[str, str, int], List[Tuple[float, float]]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULTS_COLUMNS:
            raise ValueError(f"{path}: expected columns {RESULTS_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            key = (row["model_id"], row["method"], int(row["seed"]))
            groups.setdefault(key, []).append((float(row["level"]), float(row["accuracy"])))
    curves = []
    for (model_id, method, seed), pts in sorted(groups.items()):
        pts.sort()
        curves.append(AccuracyCurve([p[0] for p in pts], [p[1] for p in pts], method, model_id, seed))
    return curves


def _svg_plot(method: str, curves: Dict[str, List[AccuracyCurve]]) -> str:
    """Accuracy vs level, one polyline per model (mean over seeds)."""
    width, height, pad = 480, 320, 48
    series = {}
    for model_id in sorted(curves):
        cs = curves[model_id]
        series[model_id] = (cs[0].levels, np.mean([c.accuracies for c in cs], axis=0))
    all_levels = np.concatenate([lv for lv, _ in series.values()])
    x0, x1 = float(all_levels.min()), float(all_levels.max())
    x1 = x1 if x1 > x0 else x0 + 1.0

    def px(lv, acc):
        x = pad + (lv - x0) / (x1 - x0) * (width - 2 * pad)
        y = height - pad - acc * (height - 2 * pad)
        return f"{x:.2f},{y:.2f}"

    palette = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<title>{method}: accuracy vs perturbation level</title>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">{method} level</text>',
        f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" text-anchor="middle">accuracy</text>',
        f'<text x="{pad - 6}" y="{height - pad}" font-size="10" text-anchor="end">0</text>',
        f'<text x="{pad - 6}" y="{pad + 4}" font-size="10" text-anchor="end">1</text>',
    ]
    for i, (model_id, (levels, accs)) in enumerate(series.items()):
        color = palette[i % len(palette)]
        pts = " ".join(px(lv, a) for lv, a in zip(levels, accs))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"><title>{model_id}</title></polyline>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{color}">{model_id}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


_TABLE_GROUPS = [
    ("PMV", "k_S", "pmv_slope"),
    ("PTV", "k_PTV", "ptv_slope"),
    ("Spatial", "k_max", "spatial_max_decrease"),
    ("Spatial", "SSE", "spatial_sse"),
    ("FGSM", "k_max", "fgsm_max_decrease"),
    ("FGSM", "SSE", "fgsm_sse"),
    ("Gaussian", "k_max", "gaussian_max_decrease"),
    ("Gaussian", "SSE", "gaussian_sse"),
    ("Corruption*", "k_max", "corruption_max_decrease"),
    ("Corruption*", "SSE", "corruption_sse"),
]


def _metrics_table(rows: List[dict]) -> str:
    head1 = ["Approach"] + [g[0] for g in _TABLE_GROUPS] + ["Acc(S) %", "Acc(V) %", "Gap %"]
    head2 = ["Metric"] + [g[1] for g in _TABLE_GROUPS] + ["", "", ""]
    body = []
    for row in rows:
        cells = [row["model_id"]]
        for _, _, col in _TABLE_GROUPS:
            v = row.get(col)
            cells.append("-" if v is None else f"{v:.4f}")
        for col in ("train_accuracy", "val_accuracy", "gap"):
            v = row.get(col)
            cells.append("-" if v is None else f"{100 * v:.2f}")
        body.append(cells)
    table = [head1, head2] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(head1))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in table]
    lines.insert(2, "-+-".join("-" * w for w in widths))
    lines.append("")
    lines.append("* corruption severities are not equally spaced perturbation strengths;")
    lines.append("  their k_max / SSE values are not comparable with the other approaches.")
    return "\n".join(lines) + "\n"


def emit_report(reports: Sequence[OverfitReport], out_dir, manifest: Optional[dict] = None) -> Dict[str, Path]:
    """Write results.csv, metrics.csv, per-method SVG plots and a run manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: Dict[str, Path] = {}

    curves = [c for rep in reports for c in rep.curves.values()]
    write_curves(out / "results.csv", curves)
    files["results"] = out / "results.csv"
    write_curves(out / "results_normalized.csv", [c.normalized() for c in curves])
    files["results_normalized"] = out / "results_normalized.csv"

    by_model: Dict[str, List[OverfitReport]] = {}
    for rep in reports:
        by_model.setdefault(rep.model_id, []).append(rep)
    rows = []
    for model_id in sorted(by_model):
        agg = median_report(by_model[model_id])
        row = {"model_id": model_id, "gap": agg.gap, "train_accuracy": agg.train_accuracy,
               "val_accuracy": agg.val_accuracy}
        row.update(agg.scalars)
        rows.append(row)
    _write_csv(out / "metrics.csv", METRICS_COLUMNS, rows)
    files["metrics"] = out / "metrics.csv"
    (out / "metrics_table.txt").write_text(_metrics_table(rows))
    files["table"] = out / "metrics_table.txt"

    plots: Dict[str, Dict[str, List[AccuracyCurve]]] = {}
    for c in curves:
        plots.setdefault(c.kind, {}).setdefault(c.model_id, []).append(c)
    plot_dir = out / "plots"
    for method, per_model in sorted(plots.items()):
        plot_dir.mkdir(exist_ok=True)
        path = plot_dir / f"{method}.svg"
        path.write_text(_svg_plot(method, per_model))
        files[f"plot:{method}"] = path

    manifest = dict(manifest or {})
    manifest.setdefault("package_version", __version__)
    manifest["models"] = sorted(by_model)
    manifest["files"] = sorted(str(p.relative_to(out)) for p in files.values())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    files["manifest"] = out / "manifest.json"
    return files


def read_metrics(path) -> List[OverfitReport]:
    reports = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            rep = OverfitReport(row["model_id"])
            for key, val in row.items():
                if key == "model_id" or val in ("", None):
                    continue
                if key == "train_accuracy":
                    rep.train_accuracy = float(val)
                elif key == "val_accuracy":
                    rep.val_accuracy = float(val)
                elif key != "gap":
                    rep.scalars[key] = float(val)
            reports.append(rep)
    return reports


def _code_revision() -> str:
    try:
        res = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"
