"""Training harness: epoch loop, the two selection phases, and the interval chain.

Phase 1 trains nine candidate architectures on the 1.0-year bin, once per
cross-validation fold, and keeps the one with the lowest mean of per-fold
best validation MAEs.  Phase 2 repeats the protocol over the 16 clinical
feature combinations.  Phase 3 trains the winning configuration on all ten
horizon bins per fold, initializing each bin from the previous bin's frozen
weights (forward transfer), yielding up to 10 bins x 10 folds = 100
checkpointed models.

Every (candidate, fold) job derives its own RNG streams from the experiment
seed, so results are bit-identical whether jobs run sequentially or on a
process pool.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import AdamState, DivergenceError, Tensor, adam_step, masked_mae
from .domain import valid_mask_array
from .models import (
    Model,
    ModelSpec,
    build_model,
    load_weights,
    save_weights,
    snapshot_hash,
    weights_hash,
)
from .pipeline import BIN_CENTERS, FeatureCombo, FieldPair, SplitPlan, encode_pairs
from .seeds import derive_seed

PHASE_ARCH = "arch"
PHASE_FEATURES = "features"
PHASE_INTERVALS = "intervals"

DESK_WIDTHS = (8, 16, 24)
PAPER_WIDTHS = (64, 128, 256)
DESK_EPOCHS = 60
PAPER_EPOCHS = 1000


class TrainerError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; carries the partial history."""

    def __init__(self, message: str, history: "TrainHistory | None" = None):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    """Desk-scale defaults; paper-scale (1000 epochs, widths 64/128/256)
    stays behind an explicit flag so routine runs never trigger it."""

    epochs: int = DESK_EPOCHS
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    widths: tuple[int, int, int] = DESK_WIDTHS
    fc_hidden: int = 2048
    freeze: str = "best"  # snapshot at best validation epoch ("last" for final epoch)
    shuffle: bool = True

    def validate(self) -> None:
        if self.epochs < 0:
            raise TrainerError("epochs must be >= 0")
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if self.freeze not in ("best", "last"):
            raise TrainerError(f"freeze must be 'best' or 'last', got {self.freeze!r}")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class TrainHistory:
    """Per-epoch record plus the frozen weight snapshot."""

    train_loss: list[float]
    val_mae: list[float]
    best_epoch: int | None
    best_val_mae: float | None
    best_weights: dict[str, np.ndarray]
    initial_hash: str
    best_hash: str

    def to_json_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_mae": self.val_mae,
            "best_epoch": self.best_epoch,
            "best_val_mae": self.best_val_mae,
            "initial_weights_sha256": self.initial_hash,
            "best_weights_sha256": self.best_hash,
        }


def evaluate_masked_mae(model: Model, xs: np.ndarray, ys: np.ndarray, batch_size: int = 32) -> float:
    """Masked MAE over a dataset in infer mode, fixed batch order."""
    mask = valid_mask_array()
    n = xs.shape[0]
    if n == 0:
        raise TrainerError("cannot evaluate on an empty set")
    total = 0.0
    n_mask = int(mask.sum())
    for start in range(0, n, batch_size):
        xb = xs[start : start + batch_size]
        yb = ys[start : start + batch_size]
        out = model.forward(Tensor(xb), mode="infer")
        loss = masked_mae(out, yb, mask)
        total += float(loss.data) * xb.shape[0] * n_mask
    return total / (n * n_mask)


def train_model(
    model: Model,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    shuffle_seed: int | None = None,
) -> TrainHistory:
    """Mini-batch Adam on the masked MAE loss.

    Validation MAE is measured in infer mode at the end of every epoch; the
    weights of the best epoch are snapshotted and restored into the model
    before returning (`cfg.freeze == "last"` keeps the final epoch instead).
    With epochs=0 the model is left untouched and the snapshot is the
    initial state.  Deterministic for a fixed (model seed, shuffle seed).
    """
    cfg.validate()
    train_x, train_y = train_data
    val_x, val_y = val_data
    if cfg.epochs > 0 and (train_x.shape[0] == 0 or val_x.shape[0] == 0):
        raise TrainerError("training needs nonempty train and validation sets")
    mask = valid_mask_array()
    n_mask = int(mask.sum())
    n = train_x.shape[0]

    initial_hash = weights_hash(model)
    if cfg.epochs == 0:
        snap = model.snapshot()
        return TrainHistory([], [], None, None, snap, initial_hash, snapshot_hash(snap))

    rng = np.random.default_rng(cfg.seed if shuffle_seed is None else shuffle_seed)
    adam = AdamState(lr=cfg.lr)
    train_losses: list[float] = []
    val_maes: list[float] = []
    best_epoch: int | None = None
    best_val = np.inf
    best_snap = model.snapshot()

    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        epoch_abs = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out = model.forward(Tensor(train_x[idx]), mode="train")
            loss = masked_mae(out, train_y[idx], mask)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"divergence: non-finite loss at epoch {epoch}",
                    TrainHistory(
                        train_losses, val_maes, best_epoch,
                        None if best_epoch is None else val_maes[best_epoch],
                        best_snap, initial_hash, snapshot_hash(best_snap),
                    ),
                )
            loss.backward()
            try:
                adam_step(model.params, adam)
            except DivergenceError as e:
                raise TrainingDiverged(
                    str(e),
                    TrainHistory(
                        train_losses, val_maes, best_epoch,
                        None if best_epoch is None else val_maes[best_epoch],
                        best_snap, initial_hash, snapshot_hash(best_snap),
                    ),
                ) from e
            epoch_abs += loss_val * idx.shape[0] * n_mask

        train_losses.append(epoch_abs / (n * n_mask))
        val_mae = evaluate_masked_mae(model, val_x, val_y, cfg.batch_size)
        val_maes.append(val_mae)
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_snap = model.snapshot()

    if cfg.freeze == "last":
        best_epoch = cfg.epochs - 1
        best_snap = model.snapshot()
        best_val = val_maes[-1]
    else:
        model.restore(best_snap)

    return TrainHistory(
        train_loss=train_losses,
        val_mae=val_maes,
        best_epoch=best_epoch,
        best_val_mae=float(best_val),
        best_weights=best_snap,
        initial_hash=initial_hash,
        best_hash=snapshot_hash(best_snap),
    )


# ---------------------------------------------------------------------------
# Fold plumbing


def fold_split(pairs: list[FieldPair], plan: SplitPlan, fold: int) -> tuple[list[FieldPair], list[FieldPair]]:
    """(train, validation) pairs for one fold; the held fold validates."""
    val_pids = set(plan.folds[fold])
    train_pids = set(plan.train_patients()) - val_pids
    train = [p for p in pairs if p.input.patient_id in train_pids]
    val = [p for p in pairs if p.input.patient_id in val_pids]
    return train, val


def bin_dir_name(center: float) -> str:
    return f"bin-{center:.1f}"


# ---------------------------------------------------------------------------
# Jobs (top-level and picklable so a process pool can run them)


@dataclass
class _Job:
    phase: str
    candidate: str
    fold: int
    spec: dict
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    cfg: dict
    seed: int
    out_dir: str | None


@dataclass
class _ChainJob:
    fold: int
    spec: dict
    combo: str
    bins: list  # (center, train_x, train_y, val_x, val_y)
    cfg: dict
    seed: int
    out_dir: str | None
    init_snapshot: dict | None = None


def _cfg_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["widths"] = tuple(d["widths"])
    return TrainConfig(**d)


def _write_history(out_dir: Path, history: TrainHistory, extra: dict) -> None:
    payload = dict(history.to_json_dict())
    payload.update(extra)
    tmp = out_dir / "history.json.tmp"
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, out_dir / "history.json")


def _checkpoint(model: Model, out_dir: Path, history: TrainHistory, extra: dict) -> None:
    provenance = {
        k: extra.get(k) for k in ("phase", "candidate", "fold", "bin")
    }
    provenance["epoch"] = history.best_epoch
    save_weights(model, out_dir, provenance=provenance)
    _write_history(out_dir, history, extra)


def _run_phase_job(job: _Job) -> dict:
    cfg = _cfg_from_dict(job.cfg)
    init_seed = derive_seed(job.seed, job.phase, job.candidate, job.fold, "init")
    shuffle_seed = derive_seed(job.seed, job.phase, job.candidate, job.fold, "shuffle")
    spec = ModelSpec.from_dict(job.spec).replace(seed=init_seed)
    model = build_model(spec)
    result = {"candidate": job.candidate, "fold": job.fold, "best_val_mae": None, "error": None}
    try:
        history = train_model(model, (job.train_x, job.train_y), (job.val_x, job.val_y), cfg, shuffle_seed)
    except TrainingDiverged as e:
        result["error"] = str(e)
        return result
    result["best_val_mae"] = history.best_val_mae
    if job.out_dir is not None:
        out_dir = Path(job.out_dir) / job.phase / job.candidate / f"fold-{job.fold}"
        _checkpoint(
            model,
            out_dir,
            history,
            {
                "phase": job.phase,
                "candidate": job.candidate,
                "fold": job.fold,
                "bin": None,
                "config": cfg.to_json_dict(),
                "seeds": {"init": init_seed, "shuffle": shuffle_seed},
                "n_train_pairs": int(job.train_x.shape[0]),
                "n_val_pairs": int(job.val_x.shape[0]),
            },
        )
    return result


def _run_chain_job(job: _ChainJob) -> dict:
    cfg = _cfg_from_dict(job.cfg)
    prev_snapshot = job.init_snapshot
    prev_label = "seed" if job.init_snapshot is not None else None
    entries = []
    for center, train_x, train_y, val_x, val_y in job.bins:
        label = bin_dir_name(center)
        if train_x.shape[0] == 0 or val_x.shape[0] == 0:
            entries.append(
                {"bin": center, "fold": job.fold, "gap": True, "best_val_mae": None,
                 "error": None, "transferred_from": None}
            )
            continue
        init_seed = derive_seed(job.seed, PHASE_INTERVALS, label, job.fold, "init")
        shuffle_seed = derive_seed(job.seed, PHASE_INTERVALS, label, job.fold, "shuffle")
        spec = ModelSpec.from_dict(job.spec).replace(seed=init_seed)
        model = build_model(spec)
        if prev_snapshot is not None:
            model.restore(prev_snapshot)
            model.params.zero_grads()
        initial_hash = weights_hash(model)
        entry = {
            "bin": center,
            "fold": job.fold,
            "gap": False,
            "error": None,
            "transferred_from": prev_label,
            "initial_weights_sha256": initial_hash,
        }
        try:
            history = train_model(model, (train_x, train_y), (val_x, val_y), cfg, shuffle_seed)
        except TrainingDiverged as e:
            entry["error"] = str(e)
            entry["gap"] = True
            entry["best_val_mae"] = None
            entries.append(entry)
            continue
        entry["best_val_mae"] = history.best_val_mae
        entry["best_weights_sha256"] = history.best_hash
        if job.out_dir is not None:
            rel = Path(PHASE_INTERVALS) / label / f"fold-{job.fold}"
            _checkpoint(
                model,
                Path(job.out_dir) / rel,
                history,
                {
                    "phase": PHASE_INTERVALS,
                    "candidate": job.combo,
                    "fold": job.fold,
                    "bin": center,
                    "transferred_from": prev_label,
                    "config": cfg.to_json_dict(),
                    "seeds": {"init": init_seed, "shuffle": shuffle_seed},
                    "n_train_pairs": int(train_x.shape[0]),
                    "n_val_pairs": int(val_x.shape[0]),
                },
            )
            # relative to the runs dir so output trees are location-independent
            entry["checkpoint"] = str(rel)
        prev_snapshot = history.best_weights
        prev_label = label
        entries.append(entry)
    return {"fold": job.fold, "entries": entries}


def _run_jobs(jobs, worker, workers: int) -> list:
    if workers <= 1:
        return [worker(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(worker, job) for job in jobs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Phase results


@dataclass
class PhaseResult:
    """Per-(candidate, fold) best validation MAE matrix and its winner."""

    phase: str
    candidates: list[str]
    matrix: dict[str, list[float | None]]
    winner: str
    errors: dict[str, list[str]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "phase": self.phase,
            "candidates": self.candidates,
            "matrix": self.matrix,
            "winner": self.winner,
            "errors": self.errors,
        }


def _pick_winner(matrix: dict[str, list[float | None]]) -> str:
    complete = {
        name: row for name, row in matrix.items() if all(v is not None for v in row)
    }
    if not complete:
        raise TrainerError("no candidate completed all folds")
    means = {name: float(np.mean(row)) for name, row in complete.items()}
    best = min(means.values())
    return min(name for name, m in means.items() if m == best)


def _run_selection_phase(
    phase: str,
    candidates: list[tuple[str, ModelSpec, FeatureCombo]],
    pairs: list[FieldPair],
    plan: SplitPlan,
    cfg: TrainConfig,
    runs_dir=None,
    workers: int = 1,
) -> PhaseResult:
    cfg.validate()
    n_folds = len(plan.folds)
    fold_pairs = [fold_split(pairs, plan, fold) for fold in range(n_folds)]

    jobs = []
    for name, spec, combo in candidates:
        for fold in range(n_folds):
            train, val = fold_pairs[fold]
            if not train or not val:
                raise TrainerError(f"fold {fold} has no pairs for phase {phase!r}")
            train_x, train_y = encode_pairs(train, combo)
            val_x, val_y = encode_pairs(val, combo)
            jobs.append(
                _Job(
                    phase=phase,
                    candidate=name,
                    fold=fold,
                    spec=spec.to_dict(),
                    train_x=train_x,
                    train_y=train_y,
                    val_x=val_x,
                    val_y=val_y,
                    cfg=cfg.to_json_dict(),
                    seed=cfg.seed,
                    out_dir=None if runs_dir is None else str(runs_dir),
                )
            )

    results = _run_jobs(jobs, _run_phase_job, workers)
    matrix = {name: [None] * n_folds for name, _, _ in candidates}
    errors: dict[str, list[str]] = {}
    for res in results:
        matrix[res["candidate"]][res["fold"]] = res["best_val_mae"]
        if res["error"]:
            errors.setdefault(res["candidate"], []).append(
                f"fold {res['fold']}: {res['error']}"
            )
    try:
        winner = _pick_winner(matrix)
    except TrainerError:
        if errors:
            raise TrainingDiverged(
                f"phase {phase!r}: every candidate lost at least one fold to "
                f"divergence ({sum(len(v) for v in errors.values())} aborted jobs)"
            ) from None
        raise
    result = PhaseResult(
        phase=phase,
        candidates=[name for name, _, _ in candidates],
        matrix=matrix,
        winner=winner,
        errors=errors,
    )
    if runs_dir is not None:
        write_phase_result(Path(runs_dir) / phase, result)
    return result


def write_phase_result(phase_dir: Path, result: PhaseResult, extra: dict | None = None) -> None:
    phase_dir.mkdir(parents=True, exist_ok=True)
    payload = result.to_json_dict()
    if extra:
        payload.update(extra)
    tmp = phase_dir / "phase_result.json.tmp"
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, phase_dir / "phase_result.json")


def select_architecture(
    candidates: list[ModelSpec],
    bin1_pairs: list[FieldPair],
    plan: SplitPlan,
    cfg: TrainConfig,
    runs_dir=None,
    workers: int = 1,
) -> PhaseResult:
    """Train each candidate once per fold on the 1.0-year bin (field-only input)."""
    combo = FeatureCombo()
    named = [(spec.name, spec, combo) for spec in candidates]
    return _run_selection_phase(PHASE_ARCH, named, bin1_pairs, plan, cfg, runs_dir, workers)


def select_features(
    arch_spec: ModelSpec,
    combos: list[FeatureCombo],
    bin1_pairs: list[FieldPair],
    plan: SplitPlan,
    cfg: TrainConfig,
    runs_dir=None,
    workers: int = 1,
) -> PhaseResult:
    """Train the winning architecture once per fold for each feature combo."""
    named = [
        (combo.name, arch_spec.replace(in_channels=combo.channels()), combo)
        for combo in combos
    ]
    return _run_selection_phase(PHASE_FEATURES, named, bin1_pairs, plan, cfg, runs_dir, workers)


@dataclass
class ChainResult:
    """Outcome of the interval chain: one entry per (bin, fold)."""

    entries: list[dict]

    @property
    def n_checkpoints(self) -> int:
        return sum(1 for e in self.entries if not e["gap"])

    def to_json_dict(self) -> dict:
        return {"n_checkpoints": self.n_checkpoints, "entries": self.entries}


def train_interval_chain(
    spec: ModelSpec,
    combo: FeatureCombo,
    binned_pairs: dict[float, list[FieldPair]],
    plan: SplitPlan,
    cfg: TrainConfig,
    runs_dir=None,
    workers: int = 1,
    init_snapshots: dict[int, dict] | None = None,
) -> ChainResult:
    """Per fold: train bin 1.0 fresh, then transfer forward bin by bin.

    A (bin, fold) cell with no training or validation pairs is recorded as a
    gap; the chain then carries the last trained weights forward.  With
    `init_snapshots` (fold -> weight snapshot) a fold's first bin starts
    from those weights instead of a fresh initialization.
    """
    cfg.validate()
    spec = spec.replace(in_channels=combo.channels())
    n_folds = len(plan.folds)

    jobs = []
    for fold in range(n_folds):
        per_bin = []
        for center in BIN_CENTERS:
            train, val = fold_split(binned_pairs.get(center, []), plan, fold)
            train_x, train_y = encode_pairs(train, combo)
            val_x, val_y = encode_pairs(val, combo)
            per_bin.append((center, train_x, train_y, val_x, val_y))
        jobs.append(
            _ChainJob(
                fold=fold,
                spec=spec.to_dict(),
                combo=combo.name,
                bins=per_bin,
                cfg=cfg.to_json_dict(),
                seed=cfg.seed,
                out_dir=None if runs_dir is None else str(runs_dir),
                init_snapshot=None if init_snapshots is None else init_snapshots.get(fold),
            )
        )

    results = _run_jobs(jobs, _run_chain_job, workers)
    entries = [entry for res in results for entry in res["entries"]]
    entries.sort(key=lambda e: (e["bin"], e["fold"]))
    result = ChainResult(entries=entries)
    if runs_dir is not None:
        phase_dir = Path(runs_dir) / PHASE_INTERVALS
        phase_dir.mkdir(parents=True, exist_ok=True)
        tmp = phase_dir / "chain_result.json.tmp"
        tmp.write_text(json.dumps(result.to_json_dict(), sort_keys=True, indent=2) + "\n")
        os.replace(tmp, phase_dir / "chain_result.json")
    return result


def load_interval_models(runs_dir) -> dict[float, list[Model]]:
    """Frozen fold models per bin from a chain run's checkpoint tree."""
    runs_dir = Path(runs_dir)
    out: dict[float, list[Model]] = {}
    for center in BIN_CENTERS:
        bin_dir = runs_dir / PHASE_INTERVALS / bin_dir_name(center)
        if not bin_dir.is_dir():
            continue
        fold_dirs = sorted(
            (d for d in bin_dir.iterdir() if d.is_dir() and d.name.startswith("fold-")),
            key=lambda d: int(d.name.split("-", 1)[1]),
        )
        models = [load_weights(d) for d in fold_dirs]
        if models:
            out[center] = models
    return out
