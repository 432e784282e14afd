"""End-to-end evaluation: curate, split, fit every method, score one test set.

A plan enumerates (group, condition, seed) cells. Within a cell every
method sees the same curation and the same train/test split, so accuracy
differences come from the method, not the data. Feature permutation
augmentation is applied to the classifier's training samples only; score
baselines calibrate on the unaugmented training split, and nothing
augmented ever reaches the test side.

Reports are deterministic: rows are emitted in a fixed sort order, floats
are printed reproducibly, and no timestamps or host details are embedded,
so re-running a plan yields byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import (
    FusedGallery,
    ThresholdModel,
    calibrate_threshold,
    centroid_classify,
    classify_score,
    fit_centroid,
    fuse_gallery,
    fused_scores,
)
from .curation import (
    CurationConfig,
    CurationResult,
    RankSample,
    curate_detailed,
    permute_augment,
    stratified_split,
)
from .mlp import MlpConfig, predict, train
from .store import EmbeddingStore, ingest
from .synth import SynthConfig, degrade_probe, generate

METHODS = ("mlp", "threshold", "mean", "median", "fusion")

REPORT_FORMAT = "rankgate-eval-report-v1"


@dataclass(frozen=True)
class ConditionSpec:
    """A probe condition: a tag plus the noise level applied to probes."""

    tag: str
    probe_noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.tag:
            raise ValueError("condition tag must be non-empty")
        if self.probe_noise_sigma < 0:
            raise ValueError("probe_noise_sigma must be >= 0")


@dataclass(frozen=True)
class ExperimentPlan:
    groups: tuple[str, ...]
    conditions: tuple[ConditionSpec, ...]
    seeds: tuple[int, ...] = (0,)
    methods: tuple[str, ...] = METHODS
    d_in: int = 3
    store_path: Optional[str] = None
    store_format: str = "binary"
    synth: Optional[SynthConfig] = None
    augment_copies: int = 1
    test_fraction: float = 0.2
    target_fpir: float = 1e-4
    reuse_first_condition_threshold: bool = False
    mlp_hidden: tuple[int, ...] = (16, 16)
    mlp_dropout: float = 0.1
    mlp_learning_rate: float = 1e-3
    mlp_batch_size: int = 32
    mlp_epochs: int = 20
    mlp_folds: int = 10
    input_scaling: str = "divide_by_gallery_size"

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        if not self.groups:
            raise ValueError("plan needs at least one group")
        if not self.conditions:
            raise ValueError("plan needs at least one condition")
        if not self.seeds:
            raise ValueError("plan needs at least one seed")
        tags = [c.tag for c in self.conditions]
        if len(set(tags)) != len(tags):
            raise ValueError(f"condition tags must be unique, got {tags}")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; known: {METHODS}")
        if not self.methods:
            raise ValueError("plan needs at least one method")
        if (self.store_path is None) == (self.synth is None):
            raise ValueError("exactly one of store_path or synth must be set")


@dataclass(frozen=True)
class CellResult:
    group: str
    condition: str
    method: str
    seed: int
    accuracy: float
    n_test: int
    tp: int
    tn: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    rows: list[CellResult]
    metadata: dict
    failures: list[dict] = field(default_factory=list)


def load_plan_store(plan: ExperimentPlan) -> EmbeddingStore:
    if plan.synth is not None:
        return generate(plan.synth)
    return ingest(plan.store_path, plan.store_format)


def _fingerprints(samples: Sequence[RankSample]) -> set[tuple[str, int]]:
    return {(s.probe_identity, s.label) for s in samples}


def _confusion(pairs: Sequence[tuple[int, int]]) -> tuple[int, int, int, int]:
    tp = sum(1 for label, pred in pairs if label == 1 and pred == 1)
    tn = sum(1 for label, pred in pairs if label == 0 and pred == 0)
    fp = sum(1 for label, pred in pairs if label == 0 and pred == 1)
    fn = sum(1 for label, pred in pairs if label == 1 and pred == 0)
    return tp, tn, fp, fn


@dataclass
class _Calibration:
    image_threshold: ThresholdModel
    fused_threshold: ThresholdModel


def _calibrate_thresholds(
    cur: CurationResult,
    train_samples: Sequence[RankSample],
    fused: FusedGallery,
    target_fpir: float,
) -> _Calibration:
    """Thresholds from the training split's probes.

    Each training probe contributes one non-mated score: the maximum
    similarity it reaches against the enrolled images (or fused
    centroids) of the other identities.  Calibrating on per-search
    maxima is what makes the decision-level false-positive rate of
    ``classify_score`` match the configured target, since the decision
    itself takes the maximum score of a search.
    """
    probe_ids = sorted({s.probe_identity for s in train_samples})
    image_maxima = np.empty(len(probe_ids))
    fused_maxima = np.empty(len(probe_ids))
    fused_index = {ident: i for i, ident in enumerate(fused.identity_ids)}
    for row, ident in enumerate(probe_ids):
        vec = cur.probe_vectors[ident]
        sims = cur.gallery.matrix @ vec
        own = np.zeros(cur.gallery.size, dtype=bool)
        own[cur.gallery.identity_map[ident]] = True
        image_maxima[row] = sims[~own].max()
        fsims = fused_scores(fused, vec)
        keep = np.ones(len(fused.identity_ids), dtype=bool)
        if ident in fused_index:
            keep[fused_index[ident]] = False
        fused_maxima[row] = fsims[keep].max()
    return _Calibration(
        image_threshold=calibrate_threshold(image_maxima, target_fpir),
        fused_threshold=calibrate_threshold(fused_maxima, target_fpir),
    )


def _mlp_config(plan: ExperimentPlan, seed: int) -> MlpConfig:
    return MlpConfig(
        d_in=plan.d_in,
        hidden_sizes=plan.mlp_hidden,
        dropout_p=plan.mlp_dropout,
        learning_rate=plan.mlp_learning_rate,
        batch_size=plan.mlp_batch_size,
        epochs=plan.mlp_epochs,
        folds=plan.mlp_folds,
        rng_seed=seed,
        input_scaling=plan.input_scaling,
    )


def run_cell(
    store_group: EmbeddingStore,
    plan: ExperimentPlan,
    group: str,
    condition: ConditionSpec,
    seed: int,
    calibration: Optional[_Calibration] = None,
) -> tuple[list[CellResult], Optional[_Calibration]]:
    """Evaluate every planned method on one (group, condition, seed) cell."""
    config = CurationConfig(
        d_in=plan.d_in, rng_seed=seed, group=group, condition=condition.tag
    )
    sigma = condition.probe_noise_sigma
    degrade = None
    if sigma > 0:
        degrade = lambda v, rng: degrade_probe(v, sigma, rng)  # noqa: E731
    cur = curate_detailed(store_group, config, degrade)
    split = stratified_split(cur.samples, plan.test_fraction, seed)
    train_s, test_s = list(split.train), list(split.test)
    overlap = _fingerprints(train_s) & _fingerprints(test_s)
    if overlap:
        raise RuntimeError(f"train/test overlap on {sorted(overlap)[:3]}")

    needs_scores = "threshold" in plan.methods or "fusion" in plan.methods
    fused = None
    if needs_scores:
        fused = fuse_gallery(cur.gallery)
        if calibration is None:
            calibration = _calibrate_thresholds(
                cur, train_s, fused, plan.target_fpir
            )

    rows = []
    for method in METHODS:
        if method not in plan.methods:
            continue
        pairs: list[tuple[int, int]] = []
        if method == "mlp":
            augmented = permute_augment(train_s, plan.augment_copies, seed)
            model, _report = train(augmented, _mlp_config(plan, seed))
            for s in test_s:
                label, _probs = predict(model, s.ranks, s.gallery_size)
                pairs.append((s.label, label))
        elif method == "threshold":
            assert calibration is not None
            for s in test_s:
                pred = classify_score(calibration.image_threshold, s.top_similarity)
                pairs.append((s.label, pred))
        elif method in ("mean", "median"):
            centroids = fit_centroid(train_s, method)
            for s in test_s:
                pairs.append((s.label, centroid_classify(centroids, s.ranks)))
        elif method == "fusion":
            assert calibration is not None and fused is not None
            index = {ident: i for i, ident in enumerate(fused.identity_ids)}
            for s in test_s:
                scores = fused_scores(fused, cur.probe_vectors[s.probe_identity])
                if s.label == 0 and s.probe_identity in index:
                    scores = np.delete(scores, index[s.probe_identity])
                pred = classify_score(
                    calibration.fused_threshold, float(np.max(scores))
                )
                pairs.append((s.label, pred))
        tp, tn, fp, fn = _confusion(pairs)
        rows.append(
            CellResult(
                group=group,
                condition=condition.tag,
                method=method,
                seed=seed,
                accuracy=(tp + tn) / len(pairs),
                n_test=len(pairs),
                tp=tp,
                tn=tn,
                fp=fp,
                fn=fn,
            )
        )
    return rows, calibration


def run_experiment(
    plan: ExperimentPlan, store: Optional[EmbeddingStore] = None
) -> EvalReport:
    """Run every cell of the plan. Failed cells are recorded, not fatal."""
    if store is None:
        store = load_plan_store(plan)
    rows: list[CellResult] = []
    failures: list[dict] = []
    for seed in plan.seeds:
        for group in plan.groups:
            try:
                sub = store.filter_by_group(group)
            except ValueError as exc:
                for condition in plan.conditions:
                    failures.append(
                        _failure(group, condition.tag, seed, exc)
                    )
                continue
            carried: Optional[_Calibration] = None
            for condition in plan.conditions:
                try:
                    cell_rows, calibration = run_cell(
                        sub, plan, group, condition, seed, calibration=carried
                    )
                except Exception as exc:  # noqa: BLE001 cell isolation is the point
                    failures.append(_failure(group, condition.tag, seed, exc))
                    continue
                rows.extend(cell_rows)
                if plan.reuse_first_condition_threshold and carried is None:
                    carried = calibration
    rows.sort(key=lambda r: (r.group, r.condition, r.method, r.seed))
    failures.sort(key=lambda f: (f["group"], f["condition"], f["seed"]))
    metadata = {
        "format": REPORT_FORMAT,
        "plan": plan_to_dict(plan),
        "plan_hash": plan_hash(plan),
        "notes": _plan_notes(plan),
    }
    return EvalReport(rows=rows, metadata=metadata, failures=failures)


def _failure(group: str, condition: str, seed: int, exc: Exception) -> dict:
    return {
        "group": group,
        "condition": condition,
        "seed": seed,
        "error": f"{type(exc).__name__}: {exc}",
    }


def _plan_notes(plan: ExperimentPlan) -> list[str]:
    notes = []
    if plan.input_scaling == "divide_by_gallery_size":
        notes.append(
            "classifier inputs are ranks divided by gallery size, not raw ranks"
        )
    if plan.reuse_first_condition_threshold:
        notes.append(
            "score thresholds calibrated on the first condition and reused"
        )
    return notes


@dataclass(frozen=True)
class SweepRow:
    d_in: int
    mean_accuracy: float
    n_cells: int


def cardinality_sweep(
    plan: ExperimentPlan,
    d_in_values: Sequence[int],
    store: Optional[EmbeddingStore] = None,
) -> tuple[list[SweepRow], list[EvalReport]]:
    """Mean classifier accuracy per rank-vector width, on matched curations.

    Duplicate widths are collapsed with a warning. Any failed cell aborts
    the sweep, because a partial mean would not be comparable across widths.
    """
    values = []
    for d in d_in_values:
        d = int(d)
        if d in values:
            warnings.warn(f"duplicate d_in value {d} ignored", stacklevel=2)
            continue
        values.append(d)
    values.sort()
    if not values:
        raise ValueError("no d_in values to sweep")
    if store is None:
        store = load_plan_store(plan)
    rows = []
    reports = []
    for d in values:
        sub_plan = replace(plan, d_in=d, methods=("mlp",))
        report = run_experiment(sub_plan, store)
        if report.failures:
            first = report.failures[0]
            raise RuntimeError(
                f"sweep cell failed at d_in={d} "
                f"[group={first['group']} condition={first['condition']} "
                f"seed={first['seed']}]: {first['error']}"
            )
        accs = [r.accuracy for r in report.rows]
        rows.append(SweepRow(d, float(np.mean(accs)), len(accs)))
        reports.append(report)
    return rows, reports


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(Path(path), "w") as fh:
        fh.write("d_in,mean_accuracy_pct,n_cells\n")
        for row in rows:
            fh.write(f"{row.d_in},{row.mean_accuracy * 100:.2f},{row.n_cells}\n")


def plan_to_dict(plan: ExperimentPlan) -> dict:
    out = {
        "groups": list(plan.groups),
        "conditions": [
            {"tag": c.tag, "probe_noise_sigma": c.probe_noise_sigma}
            for c in plan.conditions
        ],
        "seeds": list(plan.seeds),
        "methods": list(plan.methods),
        "d_in": plan.d_in,
        "store_path": plan.store_path,
        "store_format": plan.store_format,
        "synth": None,
        "augment_copies": plan.augment_copies,
        "test_fraction": plan.test_fraction,
        "target_fpir": plan.target_fpir,
        "reuse_first_condition_threshold": plan.reuse_first_condition_threshold,
        "mlp_hidden": list(plan.mlp_hidden),
        "mlp_dropout": plan.mlp_dropout,
        "mlp_learning_rate": plan.mlp_learning_rate,
        "mlp_batch_size": plan.mlp_batch_size,
        "mlp_epochs": plan.mlp_epochs,
        "mlp_folds": plan.mlp_folds,
        "input_scaling": plan.input_scaling,
    }
    if plan.synth is not None:
        s = plan.synth
        out["synth"] = {
            "n_identities": s.n_identities,
            "images_per_identity": s.images_per_identity,
            "dimension": s.dimension,
            "within_noise_sigma": s.within_noise_sigma,
            "groups": [[g, c] for g, c in s.groups],
            "degradation_levels": [[t, v] for t, v in s.degradation_levels],
            "rng_seed": s.rng_seed,
        }
    return out


def plan_from_dict(payload: dict) -> ExperimentPlan:
    from .synth import config_from_dict

    synth = payload.get("synth")
    return ExperimentPlan(
        groups=tuple(payload["groups"]),
        conditions=tuple(
            ConditionSpec(c["tag"], float(c.get("probe_noise_sigma", 0.0)))
            for c in payload["conditions"]
        ),
        seeds=tuple(payload.get("seeds", [0])),
        methods=tuple(payload.get("methods", METHODS)),
        d_in=int(payload.get("d_in", 3)),
        store_path=payload.get("store_path"),
        store_format=payload.get("store_format", "binary"),
        synth=config_from_dict(synth) if synth else None,
        augment_copies=int(payload.get("augment_copies", 1)),
        test_fraction=float(payload.get("test_fraction", 0.2)),
        target_fpir=float(payload.get("target_fpir", 1e-4)),
        reuse_first_condition_threshold=bool(
            payload.get("reuse_first_condition_threshold", False)
        ),
        mlp_hidden=tuple(payload.get("mlp_hidden", (16, 16))),
        mlp_dropout=float(payload.get("mlp_dropout", 0.1)),
        mlp_learning_rate=float(payload.get("mlp_learning_rate", 1e-3)),
        mlp_batch_size=int(payload.get("mlp_batch_size", 32)),
        mlp_epochs=int(payload.get("mlp_epochs", 20)),
        mlp_folds=int(payload.get("mlp_folds", 10)),
        input_scaling=payload.get("input_scaling", "divide_by_gallery_size"),
    )


def plan_from_json(path) -> ExperimentPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))


def plan_hash(plan: ExperimentPlan) -> str:
    canonical = json.dumps(plan_to_dict(plan), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def report_to_dict(report: EvalReport) -> dict:
    return {
        "metadata": report.metadata,
        "rows": [
            {
                "group": r.group,
                "condition": r.condition,
                "method": r.method,
                "seed": r.seed,
                "accuracy": r.accuracy,
                "n_test": r.n_test,
                "tp": r.tp,
                "tn": r.tn,
                "fp": r.fp,
                "fn": r.fn,
            }
            for r in report.rows
        ],
        "failures": report.failures,
    }


def emit_report(report: EvalReport, format: str, path) -> None:
    """Write the report as ``json``, ``csv`` or ``markdown``.

    Percentages are fixed to two decimals; output bytes depend only on the
    report contents.
    """
    path = Path(path)
    if format == "json":
        path.write_text(
            json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"
        )
    elif format == "csv":
        with open(path, "w") as fh:
            fh.write("group,condition,method,seed,n_test,tp,tn,fp,fn,accuracy_pct\n")
            for r in report.rows:
                fh.write(
                    f"{r.group},{r.condition},{r.method},{r.seed},{r.n_test},"
                    f"{r.tp},{r.tn},{r.fp},{r.fn},{r.accuracy * 100:.2f}\n"
                )
    elif format == "markdown":
        lines = ["| group | condition | method | seed | n_test | accuracy |"]
        lines.append("|---|---|---|---|---|---|")
        for r in report.rows:
            lines.append(
                f"| {r.group} | {r.condition} | {r.method} | {r.seed} "
                f"| {r.n_test} | {r.accuracy * 100:.2f}% |"
            )
        for note in report.metadata.get("notes", []):
            lines.append("")
            lines.append(f"Note: {note}")
        if report.failures:
            lines.append("")
            lines.append("Failed cells:")
            for f in report.failures:
                lines.append(
                    f"- {f['group']}/{f['condition']}/seed {f['seed']}: {f['error']}"
                )
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown report format {format!r}")
