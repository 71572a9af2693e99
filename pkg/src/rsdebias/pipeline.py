"""Pipeline stages: stats, recalibrate, render, update."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import blueprint as bp
from .dataset import (
    REGION_CENTER,
    REGION_MIDDLE,
    REGION_OUTER,
    BinningConfig,
    Dataset,
    group_records,
    load_annotations,
    partition_frequency,
)
from .dynamics import DynamicsConfig, read_error_stream, run_update_stream, snapshot
from .errors import DataError, DegenerateLayoutError, EmptyDatasetError
from .recalibration import (
    Layout,
    LayoutPriors,
    RecalibConfig,
    read_layouts,
    recalibrate_layout,
    rng_for,
    write_layouts,
)
from .scoring import (
    DEFAULT_BETA,
    EmbeddingStore,
    ImageDescriptorFallback,
    RsTable,
    compute_rs_table,
    lowest_groups,
)

logger = logging.getLogger(__name__)

RS_TABLE = "rs_table.json"
BIAS_REPORT = "bias_report.json"
GROUPS = "groups.jsonl"
LAYOUTS = "layouts.jsonl"
RECALIB_SUMMARY = "recalibration_summary.json"
BLUEPRINT_DIR = "blueprints"
BLUEPRINT_INDEX = "index.jsonl"
UPDATE_REPORT = "update_report.json"
MANIFEST = "manifest.json"

PATH_FIELDS = ("annotations", "embeddings", "images", "errors", "seeds", "table", "layouts", "out")


@dataclass
class PipelineConfig:
    annotations: str | None = None
    embeddings: str | None = None
    images: str | None = None
    errors: str | None = None
    seeds: str | None = None
    table: str | None = None
    layouts: str | None = None
    out: str = "out"
    binning: BinningConfig = field(default_factory=BinningConfig)
    beta: float = DEFAULT_BETA
    recalib: RecalibConfig = field(default_factory=RecalibConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    fill_alpha: float = bp.DEFAULT_FILL_ALPHA
    value_step: float = bp.DEFAULT_VALUE_STEP
    v_min: float = bp.DEFAULT_V_MIN
    num_classes: int | None = None
    variant: str = "recalib"
    report_lowest: int = 10
    plots: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0 < self.fill_alpha <= 1:
            raise ValueError("fill_alpha must lie in (0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def params(self) -> dict:
        """Everything that influences output content (no paths, no worker count)."""
        return {
            "binning": self.binning.to_dict(),
            "beta": self.beta,
            "recalib": self.recalib.to_dict(),
            "dynamics": {"mu": self.dynamics.mu, "loss_divisor": self.dynamics.loss_divisor},
            "blueprint": {
                "fill_alpha": self.fill_alpha,
                "value_step": self.value_step,
                "v_min": self.v_min,
                "variant": self.variant,
            },
            "report": {"lowest": self.report_lowest},
        }

    def digest(self) -> str:
        blob = json.dumps(self.params(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> PipelineConfig:
        d = dict(d)
        kwargs = {}
        for name in PATH_FIELDS:
            if d.get(name) is not None:
                p = Path(d[name])
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                kwargs[name] = str(p)
        if "binning" in d:
            kwargs["binning"] = BinningConfig.from_dict(d["binning"])
        if "recalib" in d:
            kwargs["recalib"] = RecalibConfig.from_dict(d["recalib"])
        if "dynamics" in d:
            kwargs["dynamics"] = DynamicsConfig(**d["dynamics"])
        blueprint_opts = d.get("blueprint", {})
        for name in ("fill_alpha", "value_step", "v_min", "variant", "num_classes"):
            if name in blueprint_opts:
                kwargs[name] = blueprint_opts[name]
        report_opts = d.get("report", {})
        if "lowest" in report_opts:
            kwargs["report_lowest"] = int(report_opts["lowest"])
        if "plots" in report_opts:
            kwargs["plots"] = bool(report_opts["plots"])
        for name in ("beta", "workers", "num_classes"):
            if name in d:
                kwargs[name] = d[name]
        if "seed" in d:
            kwargs["recalib"] = replace(kwargs.get("recalib", RecalibConfig()), rng_seed=int(d["seed"]))
        unknown = set(d) - {f.name for f in fields(cls)} - {"blueprint", "report", "seed"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> PipelineConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON config ({exc.msg})") from exc
        return cls.from_dict(d, base_dir=path.parent)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(value, what):
    if value is None:
        raise ValueError(f"missing required input: {what}")
    return value


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_dataset(cfg: PipelineConfig) -> Dataset:
    return load_annotations(_require(cfg.annotations, "--annotations"), cfg.binning)


def load_store(cfg: PipelineConfig, ds: Dataset) -> EmbeddingStore:
    fallback = ImageDescriptorFallback(ds, cfg.images) if cfg.images else None
    if cfg.embeddings:
        return EmbeddingStore.load_jsonl(cfg.embeddings, fallback=fallback)
    return EmbeddingStore(fallback=fallback)


def bias_report(ds: Dataset, table: RsTable, cfg: PipelineConfig) -> dict:
    records = group_records(ds, cfg.binning)
    class_counts = ds.class_counts()
    size_hist = [0] * cfg.binning.s_bins
    pos_hist = [0] * cfg.binning.u_bins
    regions = {REGION_CENTER: 0, REGION_MIDDLE: 0, REGION_OUTER: 0}
    for r in records:
        size_hist[r["size_bin"]] += 1
        pos_hist[r["pos_bin"]] += 1
        regions[r["region"]] += 1
    partition = partition_frequency(ds)
    return {
        "config_digest": cfg.digest(),
        "dataset_digest": ds.digest(),
        "table_digest": table.digest(),
        "totals": {
            "images": len(ds.images),
            "instances": ds.total_instances,
            "classes": ds.num_classes,
            "dropped_boxes": ds.dropped_boxes,
            "occupied_groups": sum(1 for g in table.groups.values() if g.count),
            "groups": len(table.groups),
        },
        "histograms": {
            "class": {ds.classes[c]: n for c, n in enumerate(class_counts)},
            "size_bin": size_hist,
            "pos_bin": pos_hist,
            "region": regions,
        },
        "frequency_partition": [
            {"class_id": c, "name": ds.classes[c], "count": class_counts[c], "partition": partition[c]}
            for c in range(ds.num_classes)
        ],
        "lowest_rs": [g.to_dict() for g in lowest_groups(table, cfg.report_lowest)],
        "lowest_rs_occupied": [
            g.to_dict() for g in lowest_groups(table, cfg.report_lowest, occupied_only=True)
        ],
    }


def _plot_histograms(report: dict, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, hist in report["histograms"].items():
        labels = list(hist) if isinstance(hist, dict) else [str(i) for i in range(len(hist))]
        values = list(hist.values()) if isinstance(hist, dict) else hist
        fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(labels)), 3))
        ax.bar(range(len(values)), values)
        ax.set_xticks(range(len(values)), labels, rotation=90 if len(labels) > 8 else 0)
        ax.set_title(f"instances per {name.replace('_', ' ')}")
        fig.tight_layout()
        path = out_dir / f"{name}_hist.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_stats(cfg: PipelineConfig, out_dir=None) -> list[Path]:
    out = Path(out_dir or cfg.out)
    ds = load_dataset(cfg)
    if ds.total_instances == 0:
        raise EmptyDatasetError(f"{cfg.annotations} contains no usable instances")
    table = compute_rs_table(ds, load_store(cfg, ds), cfg.beta, cfg.binning)
    table.meta["config_digest"] = cfg.digest()
    report = bias_report(ds, table, cfg)

    out.mkdir(parents=True, exist_ok=True)
    table.save(out / RS_TABLE)
    outputs = [out / RS_TABLE, _write_json(out / BIAS_REPORT, report)]
    with open(out / GROUPS, "w", encoding="utf-8") as f:
        for r in group_records(ds, cfg.binning):
            r["config_digest"] = report["config_digest"]
            f.write(json.dumps(r, sort_keys=True) + "\n")
    outputs.append(out / GROUPS)
    if cfg.plots:
        outputs += _plot_histograms(report, out / "plots")
    logger.info("stats: %d instances in %d groups", ds.total_instances, len(table.groups))
    return outputs


_WORKER_STATE: dict = {}


def _init_recalib_worker(priors, table, recalib):
    _WORKER_STATE.update(priors=priors, table=table, recalib=recalib)


def _recalibrate_one(seed: Layout):
    st = _WORKER_STATE
    rng = rng_for(st["recalib"].rng_seed, seed.image_id)
    try:
        return recalibrate_layout(seed, st["priors"], st["table"], st["recalib"], rng), None
    except DegenerateLayoutError as exc:
        return None, str(exc)


def _map(func, items, workers, initializer, initargs):
    if workers <= 1 or len(items) <= 1:
        initializer(*initargs)
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=initializer,
                             initargs=initargs) as pool:
        return list(pool.map(func, items, chunksize=max(1, len(items) // (4 * workers))))


def cmd_recalibrate(cfg: PipelineConfig, table: RsTable | None = None, out_dir=None,
                    ds: Dataset | None = None) -> list[Path]:
    out = Path(out_dir or cfg.out)
    ds = ds or load_dataset(cfg)
    if table is None:
        table = RsTable.load(_require(cfg.table, "--table"), ds.digest())
    elif table.dataset_digest != ds.digest():
        raise DataError("RS table was computed from a different dataset")
    seeds = read_layouts(cfg.seeds) if cfg.seeds else [Layout.from_image(img) for img in ds.images]
    for s in seeds:
        s.validate(ds.num_classes)

    results = _map(_recalibrate_one, seeds, cfg.workers, _init_recalib_worker,
                   (LayoutPriors.from_dataset(ds), table, cfg.recalib))
    layouts = [lay for lay, _ in results if lay is not None]
    degenerate = [
        {"image_id": s.image_id, "error": err} for s, (_, err) in zip(seeds, results) if err
    ]
    summary = {
        "config": cfg.params(),
        "config_digest": cfg.digest(),
        "table_digest": table.digest(),
        "seeds": len(seeds),
        "layouts": len(layouts),
        "placement_failures": sum(lay.placement_failures for lay in layouts),
        "degenerate_layouts": degenerate,
        "entries": {
            prov: sum(1 for lay in layouts for e in lay.entries if e.provenance == prov)
            for prov in ("seed", "moved", "injected")
        },
    }
    out.mkdir(parents=True, exist_ok=True)
    write_layouts(layouts, out / LAYOUTS,
                  {"config_digest": summary["config_digest"], "table_digest": summary["table_digest"]})
    _write_json(out / RECALIB_SUMMARY, summary)
    logger.info("recalibrate: %d layouts, %d placement failures, %d degenerate",
                len(layouts), summary["placement_failures"], len(degenerate))
    return [out / LAYOUTS, out / RECALIB_SUMMARY]


def resolve_num_classes(cfg: PipelineConfig) -> int:
    if cfg.num_classes is not None:
        return int(cfg.num_classes)
    if cfg.table:
        return RsTable.load(cfg.table).num_classes
    if cfg.annotations:
        return load_dataset(cfg).num_classes
    raise ValueError("render needs --num-classes, --table or --annotations to size the palette")


def _init_render_worker(palette, fill_alpha, blue_dir):
    _WORKER_STATE.update(palette=palette, fill_alpha=fill_alpha, blue_dir=blue_dir)


def _render_one(job):
    layout, name = job
    st = _WORKER_STATE
    try:
        layout.validate(st["palette"].num_classes)
        canvas = bp.render_blueprint(layout, st["palette"], st["fill_alpha"])
    except (DataError, ValueError) as exc:
        return None, str(exc)
    path = Path(st["blue_dir"]) / name
    bp.write_png(canvas, path)
    return file_digest(path), None


def cmd_render(cfg: PipelineConfig, layouts_path=None, out_dir=None,
               num_classes: int | None = None) -> list[Path]:
    out = Path(out_dir or cfg.out)
    layouts = read_layouts(_require(layouts_path or cfg.layouts, "--layouts"))
    palette = bp.build_palette(num_classes or resolve_num_classes(cfg), cfg.value_step, cfg.v_min)
    blue_dir = out / BLUEPRINT_DIR
    blue_dir.mkdir(parents=True, exist_ok=True)

    names, seen = [], {}
    for lay in layouts:
        base = f"{lay.image_id}_{cfg.variant}"
        n = seen.get(base, 0)
        seen[base] = n + 1
        names.append(f"{base}.png" if n == 0 else f"{base}-{n}.png")
    results = _map(_render_one, list(zip(layouts, names)), cfg.workers, _init_render_worker,
                   (palette, cfg.fill_alpha, str(blue_dir)))

    failures = 0
    index_path = blue_dir / BLUEPRINT_INDEX
    with open(index_path, "w", encoding="utf-8") as f:
        for lay, name, (digest, err) in zip(layouts, names, results):
            if err:
                failures += 1
                logger.warning("render: layout %s skipped: %s", lay.image_id, err)
                continue
            f.write(json.dumps({
                "file": name,
                "image_id": lay.image_id,
                "variant": cfg.variant,
                "png_sha256": digest,
                "layout_digest": lay.digest(),
                "palette_digest": palette.digest(),
                "fill_alpha": cfg.fill_alpha,
                "config_digest": cfg.digest(),
            }, sort_keys=True) + "\n")
    logger.info("render: %d blueprints, %d failures", len(layouts) - failures, failures)
    pngs = [blue_dir / n for n, (d, _) in zip(names, results) if d]
    return [index_path] + pngs


def cmd_update(cfg: PipelineConfig, table_path=None, errors_path=None, out_dir=None) -> list[Path]:
    out = Path(out_dir or cfg.out)
    table = RsTable.load(_require(table_path or cfg.table, "--table"))
    records = read_error_stream(_require(errors_path or cfg.errors, "--errors"))
    report = run_update_stream(table, records, cfg.dynamics)
    out.mkdir(parents=True, exist_ok=True)
    updated = report.table
    updated.meta["config_digest"] = cfg.digest()
    written = snapshot(updated, out / RS_TABLE, cfg.dynamics, report.records_applied)
    summary = report.to_dict()
    summary.update(config_digest=cfg.digest(), table_digest=written.digest(),
                   input_table_digest=table.digest())
    _write_json(out / UPDATE_REPORT, summary)
    logger.info("update: %d records applied, %d rejected", report.records_applied, report.rejected)
    return [out / RS_TABLE, out / UPDATE_REPORT]


def pipeline_plan(cfg: PipelineConfig) -> list[tuple[str, Path]]:
    out = Path(cfg.out)
    plan = [("stats", out / "stats"), ("recalibrate", out / "recalibrate"), ("render", out / "render")]
    if cfg.errors:
        plan.append(("update", out / "update"))
    return plan


def _manifest(cfg, stages, status) -> dict:
    return {
        "config": cfg.params(),
        "config_digest": cfg.digest(),
        "status": status,
        "stages": stages,
    }


def cmd_pipeline(cfg: PipelineConfig) -> Path:
    """stats -> recalibrate -> render (-> update when an error stream is given).

    The manifest is rewritten after every stage; it stays ``partial`` until
    the last stage finishes, so an interrupted run keeps earlier outputs and
    says so.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / MANIFEST
    stages: list[dict] = []

    def record(name, paths):
        stages.append({
            "stage": name,
            "outputs": [
                {"path": os.path.relpath(p, out), "sha256": file_digest(p)} for p in paths
            ],
        })
        _write_json(manifest_path, _manifest(cfg, stages, "partial"))

    _write_json(manifest_path, _manifest(cfg, stages, "partial"))
    plan = dict(pipeline_plan(cfg))
    record("stats", cmd_stats(cfg, plan["stats"]))
    table_path = plan["stats"] / RS_TABLE
    stage_cfg = replace(cfg, table=str(table_path))
    record("recalibrate", cmd_recalibrate(stage_cfg, out_dir=plan["recalibrate"]))
    ds_classes = RsTable.load(table_path).num_classes
    record("render", cmd_render(stage_cfg, plan["recalibrate"] / LAYOUTS, plan["render"], ds_classes))
    if "update" in plan:
        record("update", cmd_update(stage_cfg, table_path, cfg.errors, plan["update"]))
    _write_json(manifest_path, _manifest(cfg, stages, "complete"))
    return manifest_path
