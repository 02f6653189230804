"""Iterative domain-extension loop.

Step 1 trains the detector and discriminator on labeled source patches (with
synthesized negatives). Each subsequent iteration predicts heatmaps for the
not-yet-admitted target patches, regenerates clean pseudo heatmaps from the
detected peaks, scores them with MC-dropout uncertainty, keeps the most
certain fraction, gates those through the cell-count curriculum, and
permanently admits the survivors as pseudo-labeled training data before
re-training both networks. Every iteration's checkpoints, admitted labels,
and metrics are persisted before the next iteration begins, making runs
crash-resumable, and all randomness derives from one root seed so a resumed
run reproduces an uninterrupted one byte for byte.

Scoring a pool is embarrassingly parallel over patches: the batched scoring
path feeds torch's thread pool, and callers running their own workers can
score disjoint candidate slices concurrently (each ``mc_predict`` call takes
an explicit seed) and merge results by ``source_id``.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np
import yaml

from . import curriculum as curriculum_mod
from .data import DataError, LabeledSample, Origin, Patch
from .detector import (
    DetectorModel,
    TrainConfig,
    predict_heatmaps,
    train_detector,
)
from .discriminator import (
    DiscriminatorModel,
    DiscriminatorTrainConfig,
    PseudoCandidate,
    mc_predict_batch,
    select_confident,
    train_discriminator,
)
from .evaluation import DetectionTally, match_points, pseudo_label_correct
from .heatmap import (
    PointSet,
    detect_peaks,
    generate_heatmap,
    regenerate_pseudo_heatmap,
    synthesize_negative,
)
from .seeds import substream, torch_seed


class ConfigError(DataError):
    """Invalid or inconsistent pipeline configuration."""


@dataclass
class AdaptationConfig:
    """Pipeline hyper-parameters; the first block's defaults are the paper's."""

    th_d: float = 100.0
    th_u: float = 0.1
    T: int = 10
    N_c: int = 1
    dropout_rate: float = 0.3
    iterations: int = 5
    sigma: float = 6.0
    epochs: int = 200
    lr: float = 1.0e-3
    patch: int = 128
    match_threshold: float = 10.0
    neg_min_dist: float = 15.0
    seed: int = 0
    # engineering knobs (not pinned by the protocol)
    batch_size: int = 16
    detector_width: int = 32
    detector_levels: int = 4
    discriminator_width: int = 64
    warm_start: bool = True
    curriculum: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "AdaptationConfig":
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a flat key-value mapping")
        return cls.from_dict(raw)

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)

    def validate(self) -> None:
        if not (0 < self.th_d < 255):
            raise ConfigError(f"th_d must be in (0, 255), got {self.th_d}")
        if not (0 < self.th_u <= 1):
            raise ConfigError(f"th_u must be in (0, 1], got {self.th_u}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.N_c < 0:
            raise ConfigError(f"N_c must be >= 0, got {self.N_c}")
        if not (0 <= self.dropout_rate < 1):
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.sigma <= 0 or self.epochs < 1 or self.lr <= 0:
            raise ConfigError("sigma, epochs, and lr must be positive")


@dataclass
class AuditData:
    """Optional ground truth for auditing a run; never used for training."""

    pool_gt: dict[str, PointSet] | None = None
    target_eval: list[tuple[Patch, PointSet]] | None = None
    source_eval: list[tuple[Patch, PointSet]] | None = None


@dataclass
class IterationRecord:
    iteration: int
    pool_size: int
    n_scored: int
    n_uncertainty_selected: int
    n_curriculum_admitted: int
    cumulative_pseudo: int
    f1_target: float | None = None
    f1_source: float | None = None
    selection_accuracy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptationReport:
    config: AdaptationConfig
    records: list[IterationRecord] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "config": self.config.to_dict(),
            "records": [r.to_dict() for r in self.records],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]


def make_labeled(
    patch: Patch, points: PointSet, sigma: float, origin: Origin = Origin.ANNOTATED,
    iteration_added: int = 0,
) -> LabeledSample:
    """Labeled sample with its heatmap rendered from the point annotations."""
    return LabeledSample(
        patch=patch,
        heatmap=generate_heatmap(points, sigma),
        origin=origin,
        iteration_added=iteration_added,
        points=points,
    )


def evaluate_detector(
    model: DetectorModel,
    eval_set: list[tuple[Patch, PointSet]],
    th_d: float,
    match_threshold: float,
    min_separation: int | None = None,
) -> tuple[float, float, float, DetectionTally]:
    """Micro-averaged (precision, recall, f1) of detections on ``eval_set``."""
    if min_separation is None:
        min_separation = max(1, int(model.sigma))
    tally = DetectionTally()
    preds = predict_heatmaps(model, [p for p, _ in eval_set])
    for (patch, gt), pred in zip(eval_set, preds):
        dets = detect_peaks(pred, th_d, min_separation)
        tally.add(patch.source_id, match_points(dets, gt, match_threshold))
    precision, recall, f1 = tally.scores()
    return precision, recall, f1, tally


class _RunDirectory:
    """Filesystem layout and lock for one adaptation run."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = self.root / ".lock"

    def acquire(self) -> None:
        if self._lock.exists():
            try:
                pid = int(self._lock.read_text().strip())
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError, PermissionError):
                self._lock.unlink(missing_ok=True)  # stale lock from a dead run
            else:
                raise DataError(f"run directory {self.root} is locked by pid {pid}")
        fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))

    def release(self) -> None:
        self._lock.unlink(missing_ok=True)

    def iter_dir(self, k: int) -> Path:
        return self.root / f"iter_{k}"

    def iteration_complete(self, k: int) -> bool:
        return (self.iter_dir(k) / "report.json").exists()

    def completed_iterations(self) -> int:
        """Highest k such that iterations 0..k are all complete, else -1."""
        k = -1
        while self.iteration_complete(k + 1):
            k += 1
        return k


def _write_json_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _points_to_field(points: PointSet) -> str:
    return ";".join(f"{r}:{c}" for r, c in points.points)


def _points_from_field(text: str, patch_shape: tuple[int, int]) -> PointSet:
    pts = tuple(
        (float(r), float(c))
        for r, c in (pair.split(":") for pair in text.split(";") if pair)
    )
    return PointSet(points=pts, patch_shape=patch_shape)


def _write_admitted_csv(path: Path, admitted: list[PseudoCandidate]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["source_id", "n_points", "mean_prob", "entropy", "points"])
        for cand in admitted:
            writer.writerow([
                cand.patch.source_id,
                len(cand.detected_points),
                repr(cand.score.mean_prob),
                repr(cand.score.entropy),
                _points_to_field(cand.detected_points),
            ])


def _write_scores_csv(
    path: Path, candidates: list[PseudoCandidate],
    pool_gt: dict[str, PointSet] | None, match_threshold: float,
) -> None:
    audited = pool_gt is not None
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["source_id", "mean_prob", "entropy", "predicted_label", "n_points"]
        if audited:
            header.append("correct")
        writer.writerow(header)
        for cand in candidates:
            row = [
                cand.patch.source_id,
                repr(cand.score.mean_prob),
                repr(cand.score.entropy),
                "CORRECT" if cand.predicted_label else "INCORRECT",
                len(cand.detected_points),
            ]
            if audited:
                gt = pool_gt.get(cand.patch.source_id)
                row.append(
                    "" if gt is None else
                    str(pseudo_label_correct(cand.detected_points, gt, match_threshold))
                )
            writer.writerow(row)


def run_adaptation(
    source: list[LabeledSample],
    target_pool: list[Patch],
    cfg: AdaptationConfig,
    run_dir: str | Path,
    audit: AuditData | None = None,
    resume: bool = False,
    stop_after_iteration: int | None = None,
) -> AdaptationReport:
    """Run (or resume) the full domain-extension loop.

    ``stop_after_iteration=k`` persists everything up to iteration ``k`` and
    returns without the final report files, leaving the directory exactly as
    an interrupted run would; a later call with ``resume=True`` completes it.
    """
    if not source:
        raise ValueError("source sample list is empty")
    if not target_pool:
        raise ValueError("target pool is empty")
    cfg.validate()
    audit = audit or AuditData()

    rundir = _RunDirectory(run_dir)
    config_path = rundir.root / "config.yaml"
    if resume and config_path.exists():
        persisted = AdaptationConfig.from_file(config_path)
        mismatched = [
            f.name for f in fields(AdaptationConfig)
            if f.name != "iterations"
            and getattr(persisted, f.name) != getattr(cfg, f.name)
        ]
        if mismatched:
            raise ConfigError(
                f"resume config mismatch on {mismatched}; "
                "only 'iterations' may change between attempts"
            )
    rundir.acquire()
    try:
        cfg.to_file(config_path)
        return _run(source, target_pool, cfg, rundir, audit, resume,
                    stop_after_iteration)
    finally:
        rundir.release()


def _run(
    source: list[LabeledSample],
    target_pool: list[Patch],
    cfg: AdaptationConfig,
    rundir: _RunDirectory,
    audit: AuditData,
    resume: bool,
    stop_after_iteration: int | None,
) -> AdaptationReport:
    pool = sorted(target_pool, key=lambda p: p.source_id)
    pool_by_id = {p.source_id: p for p in pool}
    if len(pool_by_id) != len(pool):
        raise DataError("duplicate source_ids in target pool")

    det_cfg = TrainConfig(
        epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
        width=cfg.detector_width, levels=cfg.detector_levels,
    )
    disc_cfg = DiscriminatorTrainConfig(
        epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
        width=cfg.discriminator_width, dropout_rate=cfg.dropout_rate,
    )

    records: list[IterationRecord] = []
    pseudo_samples: list[LabeledSample] = []
    admitted_ids: set[str] = set()
    detector: DetectorModel | None = None
    discriminator: DiscriminatorModel | None = None

    start_k = 0
    if resume:
        done = rundir.completed_iterations()
        if done >= 0:
            detector = DetectorModel.load(rundir.iter_dir(done) / "detector.ckpt")
            discriminator = DiscriminatorModel.load(
                rundir.iter_dir(done) / "discriminator.ckpt")
            for k in range(done + 1):
                with open(rundir.iter_dir(k) / "report.json") as f:
                    records.append(IterationRecord(**json.load(f)))
                if k >= 1:
                    pseudo_samples.extend(
                        _load_admitted(rundir.iter_dir(k) / "admitted.csv",
                                       pool_by_id, cfg.sigma, k, admitted_ids)
                    )
            start_k = done + 1

    def _training_seed(stage: str, k: int) -> int:
        return torch_seed(cfg.seed, stage, k)

    def _evaluate(model: DetectorModel) -> tuple[float | None, float | None]:
        f1_t = f1_s = None
        if audit.target_eval:
            _, _, f1_t, _ = evaluate_detector(
                model, audit.target_eval, cfg.th_d, cfg.match_threshold)
        if audit.source_eval:
            _, _, f1_s, _ = evaluate_detector(
                model, audit.source_eval, cfg.th_d, cfg.match_threshold)
        return f1_t, f1_s

    def _retrain(k: int) -> tuple[DetectorModel, DiscriminatorModel]:
        samples = source + pseudo_samples
        d_cfg = TrainConfig(**{**asdict(det_cfg), "seed": _training_seed("detector", k)})
        det_init = detector if (cfg.warm_start and detector is not None) else None
        new_det = train_detector(det_init, samples, d_cfg, sigma=cfg.sigma)

        positives = [(s.patch, s.heatmap) for s in samples]
        neg_stream = substream(cfg.seed, "negatives", k).generate_state(len(samples))
        negatives = []
        for i, s in enumerate(samples):
            points = s.points if s.points is not None else detect_peaks(
                s.heatmap, cfg.th_d, max(1, int(cfg.sigma)))
            neg_map, _, _ = synthesize_negative(
                points, cfg.sigma, rng_seed=int(neg_stream[i]),
                min_dist=cfg.neg_min_dist)
            negatives.append((s.patch, neg_map))
        b_cfg = DiscriminatorTrainConfig(
            **{**asdict(disc_cfg), "seed": _training_seed("discriminator", k)})
        disc_init = discriminator if (cfg.warm_start and discriminator is not None) else None
        new_disc = train_discriminator(disc_init, positives, negatives, b_cfg)
        return new_det, new_disc

    def _persist(k: int, record: IterationRecord, wallclock: float,
                 admitted: list[PseudoCandidate] | None,
                 scored: list[PseudoCandidate] | None) -> None:
        it_dir = rundir.iter_dir(k)
        it_dir.mkdir(parents=True, exist_ok=True)
        detector.save(it_dir / "detector.ckpt")
        discriminator.save(it_dir / "discriminator.ckpt")
        if admitted is not None:
            _write_admitted_csv(it_dir / "admitted.csv", admitted)
        if scored is not None:
            _write_scores_csv(it_dir / "scores.csv", scored,
                              audit.pool_gt, cfg.match_threshold)
        with open(it_dir / "timing.json", "w") as f:
            json.dump({"wallclock_s": wallclock}, f)
            f.write("\n")
        # report.json is written last: its presence marks the iteration complete
        _write_json_atomic(
            it_dir / "report.json",
            json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n",
        )

    # --- step 1: baseline training on source only -------------------------
    if start_k == 0:
        t0 = time.perf_counter()
        detector, discriminator = _retrain(0)
        f1_t, f1_s = _evaluate(detector)
        record = IterationRecord(
            iteration=0, pool_size=len(pool), n_scored=0,
            n_uncertainty_selected=0, n_curriculum_admitted=0,
            cumulative_pseudo=0, f1_target=f1_t, f1_source=f1_s,
        )
        records.append(record)
        _persist(0, record, time.perf_counter() - t0, None, None)
        start_k = 1

    # --- iterations: predict, regenerate, select, gate, retrain -----------
    for k in range(start_k, cfg.iterations + 1):
        if stop_after_iteration is not None and k > stop_after_iteration:
            return AdaptationReport(config=cfg, records=records)
        t0 = time.perf_counter()
        remaining = [p for p in pool if p.source_id not in admitted_ids]

        candidates: list[PseudoCandidate] = []
        preds = predict_heatmaps(detector, remaining)
        for patch, pred in zip(remaining, preds):
            pseudo_map, peaks = regenerate_pseudo_heatmap(pred, cfg.th_d, cfg.sigma)
            candidates.append(PseudoCandidate(
                patch=patch, pseudo_heatmap=pseudo_map, detected_points=peaks))

        scores = mc_predict_batch(
            discriminator,
            [(c.patch, c.pseudo_heatmap) for c in candidates],
            T=cfg.T,
            rng_seed=torch_seed(cfg.seed, "mc-dropout", k),
        )
        for cand, score in zip(candidates, scores):
            cand.score = score

        selected = select_confident(candidates, cfg.th_u)
        cap = curriculum_mod.cap_for_iteration(k, cfg.N_c) if cfg.curriculum else None
        admitted = curriculum_mod.filter_by_count(selected, cap)
        for cand in admitted:
            cand.admitted_iteration = k
            admitted_ids.add(cand.patch.source_id)
            pseudo_samples.append(LabeledSample(
                patch=cand.patch,
                heatmap=cand.pseudo_heatmap,
                origin=Origin.PSEUDO,
                iteration_added=k,
                points=cand.detected_points,
            ))

        detector, discriminator = _retrain(k)
        f1_t, f1_s = _evaluate(detector)

        selection_accuracy = None
        if audit.pool_gt is not None and admitted:
            judged = [
                pseudo_label_correct(c.detected_points,
                                     audit.pool_gt[c.patch.source_id],
                                     cfg.match_threshold)
                for c in admitted if c.patch.source_id in audit.pool_gt
            ]
            if judged:
                selection_accuracy = float(np.mean(judged))

        record = IterationRecord(
            iteration=k,
            pool_size=len(remaining),
            n_scored=len(candidates),
            n_uncertainty_selected=len(selected),
            n_curriculum_admitted=len(admitted),
            cumulative_pseudo=len(pseudo_samples),
            f1_target=f1_t,
            f1_source=f1_s,
            selection_accuracy=selection_accuracy,
        )
        records.append(record)
        _persist(k, record, time.perf_counter() - t0, admitted, candidates)

    report = AdaptationReport(config=cfg, records=records)
    _write_json_atomic(rundir.root / "report.json", report.to_json())
    _write_report_csv(rundir, report)
    return report


def _load_admitted(
    path: Path,
    pool_by_id: dict[str, Patch],
    sigma: float,
    iteration: int,
    admitted_ids: set[str],
) -> list[LabeledSample]:
    samples = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            sid = row["source_id"]
            patch = pool_by_id.get(sid)
            if patch is None:
                raise DataError(f"{path}: admitted patch {sid} not in target pool")
            points = _points_from_field(row["points"], patch.shape)
            admitted_ids.add(sid)
            samples.append(LabeledSample(
                patch=patch,
                heatmap=generate_heatmap(points, sigma),
                origin=Origin.PSEUDO,
                iteration_added=iteration,
                points=points,
            ))
    return samples


def _write_report_csv(rundir: _RunDirectory, report: AdaptationReport) -> None:
    path = rundir.root / "report.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "iteration", "pool_size", "n_scored", "n_uncertainty_selected",
            "n_curriculum_admitted", "cumulative_pseudo", "f1_target",
            "f1_source", "selection_accuracy", "wallclock_s",
        ])
        for rec in report.records:
            timing_path = rundir.iter_dir(rec.iteration) / "timing.json"
            wallclock = ""
            if timing_path.exists():
                with open(timing_path) as tf:
                    wallclock = json.load(tf).get("wallclock_s", "")
            writer.writerow([
                rec.iteration, rec.pool_size, rec.n_scored,
                rec.n_uncertainty_selected, rec.n_curriculum_admitted,
                rec.cumulative_pseudo,
                "" if rec.f1_target is None else repr(rec.f1_target),
                "" if rec.f1_source is None else repr(rec.f1_source),
                "" if rec.selection_accuracy is None else repr(rec.selection_accuracy),
                wallclock,
            ])


def load_report(run_dir: str | Path) -> AdaptationReport:
    """Read back the final report of a completed run."""
    path = Path(run_dir) / "report.json"
    if not path.exists():
        raise DataError(f"no report.json in {run_dir} (run incomplete?)")
    with open(path) as f:
        doc = json.load(f)
    return AdaptationReport(
        config=AdaptationConfig.from_dict(doc["config"]),
        records=[IterationRecord(**r) for r in doc["records"]],
    )
