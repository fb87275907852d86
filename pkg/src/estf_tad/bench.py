"""Scaling benchmark (TB-SSM against softmax attention) and the ablation grid runner."""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ExperimentConfig
from .instances import ActionInstance
from .metrics import AnnotationSet, VideoAnnotation, evaluate
from .numerics import NumericError, Tensor, no_grad
from .pipeline import Datasets, load_datasets, run_training, validation_predictions
from .ssm import SsmConfig, attention_baseline, init_attention_params, init_ssm_params, tb_ssm_forward
from .synthdata import asymmetry_suite, generate

log = logging.getLogger(__name__)

DEFAULT_LENGTHS = (1024, 2048, 4096, 8192, 16384, 32768)
MODULES = ("tb_ssm_forward", "attention_baseline")
# a median below this many timer ticks is not trusted
MIN_TICKS = 1000


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

@dataclass
class ScalingRow:
    module: str
    length: int
    median_ms: float
    peak_bytes: int
    flagged: bool = False


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    slopes: dict[str, float | None]
    timer_resolution: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["module", "T", "median_ms", "peak_bytes", "flagged"])
        for r in self.rows:
            w.writerow([r.module, r.length, f"{r.median_ms:.6f}", r.peak_bytes, int(r.flagged)])
        return buf.getvalue()

    def peak_ratios(self, module: str) -> list[float]:
        """peak(2T) / peak(T) for consecutive doubled lengths."""
        rows = {r.length: r.peak_bytes for r in self.rows if r.module == module}
        return [rows[2 * t] / rows[t] for t in sorted(rows) if 2 * t in rows and rows[t] > 0]

    def summary(self) -> str:
        lines = []
        for m, s in self.slopes.items():
            lines.append(f"{m}: log-log slope {'n/a' if s is None else f'{s:.3f}'}")
        return "\n".join(lines)


def loglog_slope(lengths: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(value) against log(length)."""
    x = np.log(np.asarray(lengths, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def _kernels(d_model: int, d_state: int, seed: int) -> dict[str, Callable[[Tensor], Tensor]]:
    rng = np.random.default_rng([seed, 7])
    ssm = init_ssm_params(SsmConfig(d_model=d_model, d_state=d_state), rng)
    attn = init_attention_params(d_model, rng)
    return {
        "tb_ssm_forward": lambda x: tb_ssm_forward(x, ssm),
        "attention_baseline": lambda x: attention_baseline(x, attn),
    }


def _peak_bytes(fn, x) -> int:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        fn(x)
        return tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()


def scan_scaling(
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    reps: int = 5,
    d_model: int = 8,
    d_state: int = 4,
    batch: int = 1,
    seed: int = 0,
    modules: Sequence[str] = MODULES,
) -> ScalingReport:
    """Median forward wall time over ``reps`` runs and traced peak allocation
    (from one further run) for each module and length, inference mode, one
    BLAS thread.  Inputs are built before the clock starts."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    unknown = [m for m in modules if m not in MODULES]
    if unknown:
        raise ValueError(f"unknown modules {unknown}; choose from {MODULES}")
    kernels = _kernels(d_model, d_state, seed)
    resolution = time.get_clock_info("perf_counter").resolution
    rows = []
    with threadpool_limits(limits=1), no_grad():
        for module in modules:
            fn = kernels[module]
            for t in lengths:
                x = Tensor(np.random.default_rng([seed, 8, t]).normal(size=(batch, t, d_model)))
                fn(x)  # warm caches and lazy imports
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    fn(x)
                    times.append(time.perf_counter() - t0)
                med = statistics.median(times)
                peak = _peak_bytes(fn, x)
                flagged = med < MIN_TICKS * resolution
                if flagged:
                    log.warning("%s T=%d: median %.3g s is within timer resolution; row flagged", module, t, med)
                rows.append(ScalingRow(module, int(t), med * 1e3, int(peak), flagged))
    slopes = {}
    for module in modules:
        good = [r for r in rows if r.module == module and not r.flagged]
        slopes[module] = loglog_slope([r.length for r in good], [r.median_ms for r in good]) if len(good) >= 2 else None
    return ScalingReport(rows, slopes, resolution)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

# name -> adapter overrides; "ssm.tied" reaches into the nested scan config
COMPONENT_VARIANTS: dict[str, dict] = {
    "full": {},
    "no-spatial": {"spatial": False},
    "no-temporal": {"temporal": "none"},
    "no-fusion": {"fusion": "none"},
    "tied-A": {"ssm.tied": True},
}
STRATEGY_VARIANTS: dict[str, dict] = {
    "none": {"temporal": "none"},
    "attention": {"temporal": "attention"},
    "TB-SSM": {},
}


def variant_config(cfg: ExperimentConfig, overrides: dict | None) -> ExperimentConfig:
    """``None`` drops the adapters entirely."""
    if overrides is None:
        return replace(cfg, adapter=None)
    if cfg.adapter is None:
        raise ValueError("ablation needs an adapter section in the base config")
    ssm_kw = {k[4:]: v for k, v in overrides.items() if k.startswith("ssm.")}
    top = {k: v for k, v in overrides.items() if not k.startswith("ssm.")}
    adapter = replace(cfg.adapter, ssm=replace(cfg.adapter.ssm, **ssm_kw), **top)
    return replace(cfg, adapter=adapter)


@dataclass
class VariantResult:
    group: str
    name: str
    config: ExperimentConfig
    map_per_threshold: list[float] | None = None
    average_map: float | None = None
    status: str = "ok"
    same_as: str | None = None  # row whose run this one reuses

    @property
    def failed(self) -> bool:
        return self.status != "ok"


@dataclass
class AsymmetryResult:
    independent: float | None
    tied: float | None
    gap: float | None  # independent minus tied, average mAP
    ci: tuple[float, float] | None
    n_boot: int
    status: str = "ok"


@dataclass
class AblationReport:
    thresholds: list[float]
    rows: list[VariantResult]
    reference: list[VariantResult] = field(default_factory=list)
    asymmetry: AsymmetryResult | None = None

    def row(self, name: str, group: str | None = None) -> VariantResult:
        for r in self.rows + self.reference:
            if r.name == name and (group is None or r.group == group):
                return r
        raise KeyError(name)

    def _cells(self, r: VariantResult) -> list[str]:
        a = r.config.adapter
        marks = ["-", "-", "-", "-"]
        if a is not None:
            marks = [
                "y" if a.spatial else "n",
                a.temporal,
                a.fusion if a.spatial and a.temporal != "none" else "n/a",
                ("tied" if a.ssm.tied else "indep") if a.temporal == "tbssm" else "n/a",
            ]
        if r.failed:
            scores = ["failed"] * (len(self.thresholds) + 1)
        else:
            scores = [f"{100 * v:.2f}" for v in r.map_per_threshold] + [f"{100 * r.average_map:.2f}"]
        return [r.group, r.name, *marks, *scores]

    def header(self) -> list[str]:
        return ["group", "variant", "spatial", "temporal", "fusion", "A", *[f"{t:.2f}" for t in self.thresholds], "Avg."]

    def to_markdown(self) -> str:
        head = self.header()
        lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
        for r in self.rows + self.reference:
            cells = self._cells(r)
            if r.same_as:
                cells[1] += f" (= {r.same_as})"
            if r.failed:
                cells[-1] = r.status
            lines.append("| " + " | ".join(cells) + " |")
        if self.asymmetry is not None:
            a = self.asymmetry
            lines.append("")
            if a.status != "ok":
                lines.append(f"Asymmetric-ramp set: {a.status}")
            else:
                lines.append(
                    f"Asymmetric-ramp set: independent A {100 * a.independent:.2f}, tied A {100 * a.tied:.2f}, "
                    f"gap {100 * a.gap:+.2f} (95% bootstrap CI {100 * a.ci[0]:+.2f} to {100 * a.ci[1]:+.2f}, "
                    f"{a.n_boot} resamples of validation videos)"
                )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header() + ["status"])
        for r in self.rows + self.reference:
            cells = self._cells(r)
            if r.failed:
                cells[6:] = [""] * (len(self.thresholds) + 1)
            w.writerow(cells + [r.status])
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = {
            "thresholds": self.thresholds,
            "rows": [
                {
                    "group": r.group,
                    "variant": r.name,
                    "status": r.status,
                    "same_as": r.same_as,
                    "map_per_threshold": r.map_per_threshold,
                    "average_map": r.average_map,
                }
                for r in self.rows + self.reference
            ],
        }
        if self.asymmetry is not None:
            out["asymmetry"] = {
                "independent": self.asymmetry.independent,
                "tied": self.asymmetry.tied,
                "gap": self.asymmetry.gap,
                "ci": list(self.asymmetry.ci) if self.asymmetry.ci else None,
                "n_boot": self.asymmetry.n_boot,
                "status": self.asymmetry.status,
            }
        return out


def _train_eval(cfg: ExperimentConfig, data: Datasets):
    model, _ = run_training(cfg, data)
    preds = validation_predictions(model, cfg, data)
    return preds, evaluate(preds, data.val[1])


def bootstrap_gap(
    preds_a: Sequence[ActionInstance],
    preds_b: Sequence[ActionInstance],
    annos: AnnotationSet,
    n_boot: int = 200,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile interval of avg-mAP(a) - avg-mAP(b) when validation videos
    are resampled with replacement."""
    by_video_a: dict[str, list] = {}
    by_video_b: dict[str, list] = {}
    for p in preds_a:
        by_video_a.setdefault(p.video, []).append(p)
    for p in preds_b:
        by_video_b.setdefault(p.video, []).append(p)
    rng = np.random.default_rng([seed, 9])
    n = len(annos.videos)
    gaps = []
    for _ in range(n_boot):
        pick = rng.integers(0, n, size=n)
        videos, pa, pb = [], [], []
        for k, i in enumerate(pick):
            v = annos.videos[i]
            vid = f"{v.id}#{k}"
            videos.append(VideoAnnotation(vid, v.duration, v.fps, [replace(g, video=vid) for g in v.instances]))
            pa.extend(replace(p, video=vid) for p in by_video_a.get(v.id, []))
            pb.extend(replace(p, video=vid) for p in by_video_b.get(v.id, []))
        sample = AnnotationSet(list(annos.labels), videos)
        gaps.append(evaluate(pa, sample).average_map - evaluate(pb, sample).average_map)
    lo, hi = np.quantile(gaps, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def ablation_run(
    cfg: ExperimentConfig,
    data: Datasets | None = None,
    asymmetry: bool = True,
    n_boot: int = 200,
    reference: bool = True,
    on_row: Callable[[VariantResult], None] | None = None,
) -> AblationReport:
    """Train every variant sequentially from the same seed and evaluate it on
    the validation split.  Rows with identical configs share one run."""
    data = data or load_datasets(cfg)
    done: dict[str, VariantResult] = {}
    rows: list[VariantResult] = []
    thresholds: list[float] | None = None

    def run(group: str, name: str, overrides: dict | None) -> VariantResult:
        nonlocal thresholds
        vcfg = variant_config(cfg, overrides)
        key = json.dumps(vcfg.to_dict(), sort_keys=True)
        if key in done:
            prev = done[key]
            res = replace(prev, group=group, name=name, same_as=f"{prev.group}/{prev.name}")
        else:
            res = VariantResult(group, name, vcfg)
            try:
                _, report = _train_eval(vcfg, data)
                res.map_per_threshold = list(report.map_per_threshold)
                res.average_map = report.average_map
                thresholds = list(report.thresholds)
            except NumericError as exc:
                res.status = f"failed: {exc}"
                log.warning("variant %s/%s failed: %s", group, name, exc)
            done[key] = res
        if on_row is not None:
            on_row(res)
        return res

    for name, ov in COMPONENT_VARIANTS.items():
        rows.append(run("component", name, ov))
    for name, ov in STRATEGY_VARIANTS.items():
        rows.append(run("strategy", name, ov))
    extra = [run("reference", "no-adapter", None)] if reference else []
    report = AblationReport(thresholds or [0.3, 0.4, 0.5, 0.6, 0.7], rows, extra)
    if asymmetry:
        report.asymmetry = _asymmetry(cfg, n_boot)
    return report


def _asymmetry(cfg: ExperimentConfig, n_boot: int) -> AsymmetryResult:
    _, asym_train = asymmetry_suite(cfg.data.train)
    _, asym_val = asymmetry_suite(cfg.data.val_spec())
    data = Datasets(generate(asym_train), generate(asym_val), asym_train.fps)
    try:
        pa, ra = _train_eval(variant_config(cfg, {}), data)
        pb, rb = _train_eval(variant_config(cfg, {"ssm.tied": True}), data)
    except NumericError as exc:
        return AsymmetryResult(None, None, None, None, n_boot, f"failed: {exc}")
    ci = bootstrap_gap(pa, pb, data.val[1], n_boot, cfg.seed)
    return AsymmetryResult(ra.average_map, rb.average_map, ra.average_map - rb.average_map, ci, n_boot)


def write_ablation(report: AblationReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(report.to_markdown())
    (out / "ablation.csv").write_text(report.to_csv())
    (out / "ablation.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return out


__all__ = [
    "COMPONENT_VARIANTS",
    "DEFAULT_LENGTHS",
    "MODULES",
    "STRATEGY_VARIANTS",
    "AblationReport",
    "AsymmetryResult",
    "ScalingReport",
    "ScalingRow",
    "VariantResult",
    "ablation_run",
    "bootstrap_gap",
    "loglog_slope",
    "scan_scaling",
    "variant_config",
    "write_ablation",
]
