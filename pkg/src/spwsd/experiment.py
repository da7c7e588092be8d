"""Experiment configuration, runs over variants and seeds, and reporting.

A run directory looks like::

    config.yaml              resolved configuration
    records.jsonl            one record per (variant, seed, t), t = 0..M
    summary.csv              seed-aggregated metrics, one row per (variant, t)
    per_seed.csv             the same metrics without aggregation
    ap_tables/<V>.csv        per-class AP at W_0..W_M, averaged over seeds
    seed_<s>/W_0.ckpt        shared starting model of seed s
    seed_<s>/<V>/W_<t>.ckpt  models of variant V
    seed_<s>/<V>/training_sets.jsonl

Everything is a pure function of the configuration, so two runs of the same
config produce byte-identical CSVs and checkpoints.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import yaml

from spwsd.data import SyntheticConfig, WeaklyLabeledDataset, generate_splits, load, mirror
from spwsd.detector import DetectorModel, NonFiniteError, load_checkpoint, save_checkpoint
from spwsd.metrics import MetricsReport, ap_table_csv, evaluate, pseudo_gt_precision
from spwsd.protocol import IterationRecord, ProtocolConfig
from spwsd.sampling import SamplerConfig
from spwsd.variants import (
    DEFAULT_NMS_THRESHOLD,
    BagClassifier,
    OracleScorer,
    Variant,
    init_pseudo_gt,
    run_variant,
    train_init,
    variant_spec,
)

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


_SCALARS = {"float": float, "int": int, "bool": bool, "str": str}


def _coerce(cls, data: Mapping, where: str) -> dict:
    """Check keys against the dataclass and cast scalars to their declared type."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    types = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    out = {}
    for key, value in data.items():
        kind = _SCALARS.get(types[key])
        if kind is bool and not isinstance(value, bool):
            raise ConfigError(f"{where}.{key}: expected true/false, got {value!r}")
        if kind in (int, float) and isinstance(value, bool):
            raise ConfigError(f"{where}.{key}: expected a number, got {value!r}")
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{where}.{key}: expected an integer, got {value!r}")
        if kind is not None and value is not None:
            try:
                value = kind(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{where}.{key}: cannot read {value!r} as {types[key]}") from None
        out[key] = value
    return out


def _from_mapping(cls, data: Mapping, where: str):
    return cls(**_coerce(cls, data, where))


@dataclass
class ProtocolSettings:
    r1: float = 0.5
    iterations: int = 4
    extra_iteration: bool = False
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_drop_factor: float = 10.0
    images_per_batch: int = 2
    batch_size: int = 128
    fg_fraction: float = 0.25
    fg_iou_min: float = 0.5
    bg_iou_low: float = 0.1
    bg_iou_high: float = 0.5
    init_std: float = 0.01
    init_reg_std: float = 0.01

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            self.images_per_batch, self.batch_size, self.fg_fraction,
            self.fg_iou_min, self.bg_iou_low, self.bg_iou_high,
        )

    def protocol(self, seed: int) -> ProtocolConfig:
        return ProtocolConfig(
            r1=self.r1, iterations=self.iterations, extra_iteration=self.extra_iteration,
            lr_drop_factor=self.lr_drop_factor, sampler=self.sampler(), seed=seed,
        )


@dataclass
class InitSettings:
    """How the static pseudo ground truth and ``W_0`` are built.

    ``scorer`` is ``bag`` (image-level linear classifier applied to boxes) or
    ``oracle`` (noisy IoU with the hidden annotations, for controlled studies).
    """

    scorer: str = "bag"
    epochs: float = 2.0
    bag_steps: int = 500
    bag_lr: float = 0.5
    bag_l2: float = 1e-3
    oracle_noise: float = 0.0
    oracle_gain: float = 8.0


@dataclass
class EvalSettings:
    nms_threshold: float = DEFAULT_NMS_THRESHOLD
    use_11_point: bool = False
    mining_nms_threshold: float = DEFAULT_NMS_THRESHOLD


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    output_dir: str = "runs/demo"
    variants: list = field(default_factory=lambda: ["SP", "MIL", "CURRICULUM"])
    seeds: list = field(default_factory=lambda: [0])
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    mirror: bool = True
    workers: int = 1
    protocol: ProtocolSettings = field(default_factory=ProtocolSettings)
    init: InitSettings = field(default_factory=InitSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def validate(self) -> "ExperimentConfig":
        """Raise :class:`ConfigError` on the first invalid field; returns ``self``."""
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version!r} (expected {CONFIG_VERSION})")
        if not self.variants:
            raise ConfigError("variants: at least one variant is required")
        try:
            self.variants = [Variant.parse(v).value for v in self.variants]
        except ValueError as exc:
            raise ConfigError(f"variants: {exc}") from None
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("variants: duplicates")
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds: need a non-empty list of non-negative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: duplicates")
        if (self.train_path is None) != (self.test_path is None):
            raise ConfigError("train_path and test_path must be given together")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.synthetic.validate()
            self.protocol.sampler()
            self.protocol.protocol(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        p = self.protocol
        if p.lr <= 0 or not 0 <= p.momentum < 1 or p.weight_decay < 0 or min(p.init_std, p.init_reg_std) < 0:
            raise ConfigError("protocol: need lr > 0, 0 <= momentum < 1, weight_decay >= 0, init_std >= 0")
        if self.init.scorer not in ("bag", "oracle"):
            raise ConfigError(f"init.scorer must be 'bag' or 'oracle', got {self.init.scorer!r}")
        if self.init.epochs < 0 or self.init.oracle_noise < 0:
            raise ConfigError("init: epochs and oracle_noise must be non-negative")
        for name in ("nms_threshold", "mining_nms_threshold"):
            if not 0.0 <= getattr(self.evaluation, name) <= 1.0:
                raise ConfigError(f"evaluation.{name} must lie in [0, 1]")
        return self

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        out = asdict(self)
        out["synthetic"] = self.synthetic.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        data = dict(data)
        if "version" not in data:
            raise ConfigError("missing 'version'")
        nested = {"protocol": ProtocolSettings, "init": InitSettings, "evaluation": EvalSettings}
        for key, sub in nested.items():
            if key in data:
                data[key] = _from_mapping(sub, data[key] or {}, key)
        if "synthetic" in data:
            try:
                data["synthetic"] = SyntheticConfig.from_dict(_coerce(SyntheticConfig, data["synthetic"] or {}, "synthetic"))
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"synthetic: {exc}") from None
        return _from_mapping(cls, data, "config").validate()

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        data = yaml.safe_load(text)
        if data is None:
            data = {}
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """Return a new config with dotted-key overrides applied (``protocol.lr``, ``seeds``, ...)."""
    data = config.to_dict()
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(data)


def demo_config_path() -> Path:
    return Path(__file__).parent / "configs" / "demo.yaml"


# ---------------------------------------------------------------------------
# data and initialization


def load_splits(config: ExperimentConfig, seed: int) -> tuple[WeaklyLabeledDataset, WeaklyLabeledDataset]:
    """Training split (mirrored if configured) and held-out test split for ``seed``.

    Synthetic data is regenerated per seed; file data is the same for every seed.
    """
    if config.train_path is not None:
        train, test = load(config.train_path), load(config.test_path)
        if (train.num_classes, train.feature_dim) != (test.num_classes, test.feature_dim):
            raise ConfigError("train and test files disagree on num_classes/feature_dim")
    else:
        train, test = generate_splits(replace(config.synthetic, seed=seed))
    if config.mirror:
        train = mirror(train)
    return train, test


def build_scorer(config: ExperimentConfig, train: WeaklyLabeledDataset, seed: int):
    init = config.init
    if init.scorer == "oracle":
        return OracleScorer(train, noise=init.oracle_noise, gain=init.oracle_gain, seed=seed)
    return BagClassifier(train.num_classes, train.feature_dim, l2=init.bag_l2).fit(
        train, steps=init.bag_steps, lr=init.bag_lr
    )


def initial_model(config: ExperimentConfig, train: WeaklyLabeledDataset, seed: int) -> DetectorModel:
    p = config.protocol
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return DetectorModel.initialize(
        train.num_classes, train.feature_dim, rng, std=p.init_std, reg_std=p.init_reg_std,
        lr=p.lr, momentum=p.momentum, weight_decay=p.weight_decay,
    )


# ---------------------------------------------------------------------------
# running


@dataclass
class RunRecord:
    """Metrics of one model ``W_t`` of one variant and seed, plus how it was trained."""

    variant: str
    seed: int
    t: int
    r: Optional[float]
    pool_size: Optional[int]
    pool_filtered: Optional[int]
    n_t: int
    classes: list
    easiness: list
    sgd_iterations: int
    mean_loss: Optional[float]
    lr: float
    checkpoint: str
    mAP: float
    ap: list
    mean_corloc: float
    corloc: list
    precision: float
    num_detections: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunRecord":
        return cls(**{f.name: data[f.name] for f in fields(cls)})


def _metrics(report: MetricsReport) -> dict:
    return {
        "mAP": report.mean_ap, "ap": report.ap, "mean_corloc": report.mean_corloc,
        "corloc": report.corloc, "num_detections": report.num_detections,
    }


def _rel(path: Path, root: Path) -> str:
    return Path(os.path.relpath(path, root)).as_posix()


def run_seed(config: ExperimentConfig, seed: int, out_dir: str | Path) -> list[RunRecord]:
    """Build ``W_0`` for one seed and run every configured variant from it."""
    out_dir = Path(out_dir)
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    train, test = load_splits(config, seed)
    ev = config.evaluation

    scorer = build_scorer(config, train, seed)
    init_labels = init_pseudo_gt(scorer, train)
    init_precision = pseudo_gt_precision([p for v in init_labels.values() for p in v], train)
    try:
        w0, init_losses = train_init(
            initial_model(config, train, seed), train, init_labels, config.protocol.sampler(),
            epochs=config.init.epochs, seed=seed,
        )
    except NonFiniteError:
        logger.error("seed %d: non-finite weights while training W_0 (Init); run aborted", seed)
        raise
    w0_path = save_checkpoint(w0, seed_dir / "W_0.ckpt")
    logger.info("seed %d: Init precision %.3f, %d SGD steps", seed, init_precision, len(init_losses))

    records: list[RunRecord] = []
    for name in config.variants:
        spec = variant_spec(name)
        var_dir = seed_dir / name

        def evaluate_model(model: DetectorModel) -> dict:
            return _metrics(evaluate(model, test, spec.test_regression, ev.nms_threshold, ev.use_11_point))

        records.append(RunRecord(
            variant=name, seed=seed, t=0, r=None, pool_size=None, pool_filtered=None, n_t=len(train),
            classes=list(range(1, train.num_classes + 1)), easiness=[], sgd_iterations=len(init_losses),
            mean_loss=float(np.mean(init_losses)) if init_losses else None, lr=w0.lr,
            checkpoint=_rel(w0_path, out_dir), precision=init_precision, **evaluate_model(w0),
        ))
        var_dir.mkdir(parents=True, exist_ok=True)
        sets_path = var_dir / "training_sets.jsonl"
        sets_path.write_text("")
        progress = {"t": 1}

        def on_iteration(model: DetectorModel, rec: IterationRecord) -> None:
            with open(sets_path, "a") as fh:
                fh.write(json.dumps({"t": rec.t, "training_set": rec.to_dict()["training_set"]}) + "\n")
            records.append(RunRecord(
                variant=name, seed=seed, t=rec.t, r=rec.r, pool_size=rec.pool_size,
                pool_filtered=rec.pool_filtered, n_t=rec.n_t, classes=rec.classes, easiness=rec.easiness,
                sgd_iterations=rec.sgd_iterations, mean_loss=rec.mean_loss, lr=rec.lr,
                checkpoint=_rel(Path(rec.checkpoint), out_dir),
                precision=pseudo_gt_precision(rec.pseudo_labels(), train), **evaluate_model(model),
            ))
            logger.info("%s seed %d t=%d mAP %.4f precision %.4f |T_t|=%d",
                        name, seed, rec.t, records[-1].mAP, records[-1].precision, rec.n_t)
            progress["t"] = rec.t + 1

        try:
            run_variant(
                spec, w0, train, config.protocol.protocol(seed), init_labels=init_labels,
                nms_threshold=ev.mining_nms_threshold, checkpoint_dir=var_dir, on_iteration=on_iteration,
            )
        except NonFiniteError:
            logger.error("%s seed %d: non-finite weights at iteration t=%d; run aborted", name, seed, progress["t"])
            raise
    return records


def _run_seed_job(args: tuple) -> list[dict]:
    config_dict, seed, out_dir = args
    config = ExperimentConfig.from_dict(config_dict)
    return [r.to_dict() for r in run_seed(config, seed, out_dir)]


def _check_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc


def run(config: ExperimentConfig, output_dir: Optional[str | Path] = None) -> Path:
    """Execute every (variant, seed) pair and write the run directory; returns its path."""
    config.validate()
    out_dir = Path(output_dir if output_dir is not None else config.output_dir)
    _check_writable(out_dir)
    config.save(out_dir / "config.yaml")

    if config.workers > 1 and len(config.seeds) > 1:
        jobs = [(config.to_dict(), s, str(out_dir)) for s in config.seeds]
        with ProcessPoolExecutor(max_workers=min(config.workers, len(jobs))) as pool:
            results = list(pool.map(_run_seed_job, jobs))
        records = [RunRecord.from_dict(d) for batch in results for d in batch]
    else:
        records = [r for s in config.seeds for r in run_seed(config, s, out_dir)]

    order = {v: i for i, v in enumerate(config.variants)}
    records.sort(key=lambda r: (order[r.variant], r.seed, r.t))
    write_records(records, out_dir / "records.jsonl")
    (out_dir / "per_seed.csv").write_text(per_seed_csv(records))
    (out_dir / "summary.csv").write_text(summary_csv(records))
    table_dir = out_dir / "ap_tables"
    table_dir.mkdir(exist_ok=True)
    for name in config.variants:
        (table_dir / f"{name}.csv").write_text(variant_ap_table(records, name))
    logger.info("run written to %s", out_dir)
    return out_dir


# ---------------------------------------------------------------------------
# persistence and reporting


def write_records(records: Sequence[RunRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), allow_nan=True) + "\n")


def read_records(path: str | Path) -> list[RunRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "records.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no run records at {path}")
    records = [RunRecord.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
    if not records:
        raise ValueError(f"{path} holds no records")
    return records


def _fmt(v: Optional[float]) -> str:
    if v is None:
        return ""
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def _grouped(records: Sequence[RunRecord]) -> dict[tuple[str, int], list[RunRecord]]:
    groups: dict[tuple[str, int], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.variant, r.t), []).append(r)
    return groups


SUMMARY_METRICS = ("mAP", "mean_corloc", "precision", "n_t")


def summary_csv(records: Sequence[RunRecord]) -> str:
    """Mean, min and max over seeds of each metric, one row per (variant, t)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["variant", "t", "seeds"]
    for m in SUMMARY_METRICS:
        header += [f"{m}_mean", f"{m}_min", f"{m}_max"]
    writer.writerow(header)
    for (variant, t), group in _grouped(records).items():
        row = [variant, t, len(group)]
        for m in SUMMARY_METRICS:
            vals = np.array([getattr(r, m) for r in group], dtype=np.float64)
            if np.all(np.isnan(vals)):
                row += ["nan"] * 3
            else:
                row += [_fmt(np.nanmean(vals)), _fmt(np.nanmin(vals)), _fmt(np.nanmax(vals))]
        writer.writerow(row)
    return buf.getvalue()


PER_SEED_COLUMNS = ("variant", "seed", "t", "r", "mAP", "mean_corloc", "precision", "pool_size",
                    "pool_filtered", "n_t", "sgd_iterations", "mean_loss", "lr", "checkpoint")


def per_seed_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PER_SEED_COLUMNS)
    for r in records:
        row = []
        for c in PER_SEED_COLUMNS:
            v = getattr(r, c)
            row.append(_fmt(v) if isinstance(v, float) or (v is None and c != "checkpoint") else v)
        writer.writerow(row)
    return buf.getvalue()


def variant_ap_table(records: Sequence[RunRecord], variant: str) -> str:
    """Per-class AP table of one variant, averaged over seeds."""
    groups = _grouped([r for r in records if r.variant == variant])
    ts = sorted(t for (_, t) in groups)
    columns = []
    for t in ts:
        aps = np.array([r.ap for r in groups[(variant, t)]], dtype=np.float64)
        with np.errstate(invalid="ignore"):
            columns.append([float(v) for v in np.nanmean(aps, axis=0)] if not np.all(np.isnan(aps)) else
                           [math.nan] * aps.shape[1])
    num_classes = len(columns[0]) if columns else 0
    return ap_table_csv([f"class{c}" for c in range(1, num_classes + 1)], columns)


def series(records: Sequence[RunRecord], metric: str) -> dict[str, tuple[list[int], list[float]]]:
    """Seed-mean of ``metric`` against t, per variant (in record order)."""
    out: dict[str, tuple[list[int], list[float]]] = {}
    for (variant, t), group in _grouped(records).items():
        vals = np.array([getattr(r, metric) for r in group], dtype=np.float64)
        ts, ys = out.setdefault(variant, ([], []))
        ts.append(t)
        ys.append(float(np.nanmean(vals)) if not np.all(np.isnan(vals)) else math.nan)
    return out


def plot(run_dir: str | Path, out_dir: Optional[str | Path] = None) -> list[Path]:
    """Write ``map.svg``, ``precision.svg`` and ``training_size.svg`` for a run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    records = read_records(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    charts = [
        ("map.svg", "mAP", "test mAP"),
        ("precision.svg", "precision", "Precision@0.5 of T_t"),
        ("training_size.svg", "n_t", "|T_t| (images)"),
    ]
    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "spwsd", "svg.fonttype": "none"}):
        for filename, metric, label in charts:
            fig, ax = plt.subplots(figsize=(5.0, 3.5))
            for variant, (ts, ys) in series(records, metric).items():
                ax.plot(ts, ys, marker="o", label=variant)
            ax.set_xlabel("t")
            ax.set_ylabel(label)
            ax.set_xticks(sorted({r.t for r in records}))
            ax.grid(True, alpha=0.3)
            ax.legend(fontsize="small")
            fig.tight_layout()
            path = out_dir / filename
            fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
            plt.close(fig)
            paths.append(path)
    return paths


def eval_checkpoint(
    checkpoint: str | Path,
    dataset: WeaklyLabeledDataset,
    use_regression: bool = True,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    use_11_point: bool = False,
) -> MetricsReport:
    """Re-score a saved model on a dataset carrying evaluation annotations."""
    model = load_checkpoint(checkpoint)
    if (model.num_classes, model.feature_dim) != (dataset.num_classes, dataset.feature_dim):
        raise ValueError(
            f"checkpoint is for C={model.num_classes}, d={model.feature_dim}; "
            f"dataset has C={dataset.num_classes}, d={dataset.feature_dim}"
        )
    return evaluate(model, dataset, use_regression, nms_threshold, use_11_point)
