"""Dataset ingestion, task-stream construction, and the per-task transform.

The stream protocol builds three binary tasks (NORMAL vs. one attack phase
each) from a labeled table: attack rows of each phase are shuffled with a
task-offset seed and split 0.6/0.2/0.2 by count (floor train, floor val,
remainder test); NORMAL rows come from a single globally shuffled pool via a
running pointer, sized to the dataset-level normal:attack ratio, so NORMAL
indices are disjoint across every task and split.

Each task then fits its own transform on its training split only:
median-impute -> z-score -> rescale to [-1, 1] by train min/max (near-constant
dims forced to 0) -> PCA to 6 components (skipped when the input is already
6-D) -> rescale the projected coordinates the same way.  Validation/test rows
may exceed [-1, 1] and are clipped to +/-1.5 with a logged count.

A synthetic Gaussian-cluster stream generator provides a desk-scale stand-in
with controllable inter-task shift.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PHASES = ("RECON_SCAN", "DOS_RESOURCE", "INTRUSION_MALWARE")
NORMAL = "NORMAL"
SPLIT_RATIO = (0.6, 0.2, 0.2)
NEAR_CONSTANT = 1e-6
CLIP_RANGE = 1.5
PCA_COMPONENTS = 6

CACHE_VERSION = 1


# ---------------------------------------------------------------------------
# Phase maps and CSV loading.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseMap:
    dataset: str
    mapping: dict[str, str]

    def phase_of(self, label: str) -> str:
        phase = self.mapping.get(str(label))
        if phase is None:
            raise KeyError(
                f"label {label!r} is not covered by the {self.dataset!r} phase map; "
                "extend the map file instead of silently dropping rows"
            )
        return phase

    def content_hash(self) -> str:
        payload = json.dumps(
            {"dataset": self.dataset, "mapping": self.mapping}, sort_keys=True
        ).encode()
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def from_file(cls, path: str | Path) -> "PhaseMap":
        doc = json.loads(Path(path).read_text())
        return cls(dataset=doc["dataset"], mapping=dict(doc["mapping"]))

    @classmethod
    def builtin(cls, name: str) -> "PhaseMap":
        ref = resources.files("vqcl") / "phase_maps" / f"{name}.json"
        doc = json.loads(ref.read_text())
        return cls(dataset=doc["dataset"], mapping=dict(doc["mapping"]))


@dataclass
class FeaturePolicy:
    """Column handling for a delimited dataset."""

    category_column: str
    drop_missing_category: bool = False   # UNSW-style pre-filter
    exclude_columns: tuple[str, ...] = ()  # e.g. row ids, numeric label columns
    feature_columns: tuple[str, ...] | None = None  # explicit subset override
    delimiter: str = ","

    @classmethod
    def for_dataset(cls, kind: str, feature_columns: tuple[str, ...] | None = None) -> "FeaturePolicy":
        if kind == "unsw":
            return cls(
                category_column="attack_cat",
                drop_missing_category=True,
                exclude_columns=("id", "label"),
                feature_columns=feature_columns,
            )
        if kind == "cicids":
            return cls(category_column="Label", feature_columns=feature_columns)
        raise ValueError(f"unknown dataset kind {kind!r}")


@dataclass
class RawTable:
    features: np.ndarray       # (N, d) float64, finite
    feature_names: list[str]
    labels: np.ndarray         # (N,) category strings feeding the phase map


def load_csv(path: str | Path, policy: FeaturePolicy) -> RawTable:
    """Load a delimited file and apply the numeric-only feature policy.

    Non-numeric columns are discarded, +/-inf becomes missing, and rows with
    missing feature values are dropped (UNSW additionally drops rows missing
    the attack-category column first).  Median imputation runs per task inside
    the transform as a safety net for anything that slips through.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, sep=policy.delimiter, skipinitialspace=True)
    except OSError as exc:
        raise ValueError(f"cannot read dataset {path}: {exc}") from exc
    df.columns = [str(c).strip() for c in df.columns]
    if policy.category_column not in df.columns:
        raise ValueError(
            f"category column {policy.category_column!r} missing from {path.name}"
        )
    if policy.drop_missing_category:
        df = df[df[policy.category_column].notna()]
    labels = df[policy.category_column].astype(str).str.strip()

    if policy.feature_columns is not None:
        missing = [c for c in policy.feature_columns if c not in df.columns]
        if missing:
            raise ValueError(f"requested feature columns missing: {missing}")
        feats = df[list(policy.feature_columns)].apply(pd.to_numeric, errors="coerce")
    else:
        feats = df.select_dtypes(include=[np.number])
        drop = set(policy.exclude_columns) | {policy.category_column}
        feats = feats[[c for c in feats.columns if c not in drop]]
    if feats.shape[1] == 0:
        raise ValueError("no numeric feature columns found")
    feats = feats.replace([np.inf, -np.inf], np.nan)
    keep = feats.notna().all(axis=1)
    feats, labels = feats[keep], labels[keep]
    if len(feats) == 0:
        raise ValueError("all rows were dropped during missing-value filtering")
    return RawTable(
        features=feats.to_numpy(dtype=float),
        feature_names=list(feats.columns),
        labels=labels.to_numpy(),
    )


# ---------------------------------------------------------------------------
# Per-task transform.
# ---------------------------------------------------------------------------


@dataclass
class PcaRecord:
    mean: np.ndarray
    basis: np.ndarray      # (k, d)
    out_min: np.ndarray
    out_max: np.ndarray
    out_const: np.ndarray  # near-constant projected dims forced to 0


@dataclass
class TransformRecord:
    medians: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    feat_min: np.ndarray
    feat_max: np.ndarray
    const: np.ndarray
    pca: PcaRecord | None = None

    def apply(self, X: np.ndarray, clip: bool = True) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float)).copy()
        nan_mask = ~np.isfinite(X)
        if nan_mask.any():
            X[nan_mask] = np.broadcast_to(self.medians, X.shape)[nan_mask]
        Z = (X - self.mean) / self.std
        U = _rescale(Z, self.feat_min, self.feat_max, self.const)
        if self.pca is not None:
            P = (U - self.pca.mean) @ self.pca.basis.T
            U = _rescale(P, self.pca.out_min, self.pca.out_max, self.pca.out_const)
        if clip:
            n_clipped = int(np.sum((U < -CLIP_RANGE) | (U > CLIP_RANGE)))
            if n_clipped:
                logger.info("clipped %d out-of-range transformed values", n_clipped)
            U = np.clip(U, -CLIP_RANGE, CLIP_RANGE)
        return U


def _rescale(Z: np.ndarray, lo: np.ndarray, hi: np.ndarray, const: np.ndarray) -> np.ndarray:
    span = hi - lo
    safe = np.where(const, 1.0, span)
    out = 2.0 * (Z - lo) / safe - 1.0
    out[:, const] = 0.0
    return out


def pca_fit(X: np.ndarray, k: int = PCA_COMPONENTS) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenvectors of the (N-1)-normalized covariance, eigenvalues
    descending, each eigenvector's largest-magnitude entry made positive."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if n < k or d < k:
        raise ValueError(f"PCA({k}) needs at least {k} rows and columns, got {X.shape}")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals = evals[order]
    basis = evecs[:, order].T
    scale = max(1.0, float(evals[0]))
    if evals[k - 1] <= 1e-10 * scale:
        raise ValueError(
            f"covariance rank below {k} (smallest kept eigenvalue {evals[k - 1]:.3g}); "
            "reduce the component count or supply richer features"
        )
    for i in range(k):
        j = int(np.argmax(np.abs(basis[i])))
        if basis[i, j] < 0:
            basis[i] = -basis[i]
    return basis, evals


# ---------------------------------------------------------------------------
# Task splits.
# ---------------------------------------------------------------------------


@dataclass
class TaskSplit:
    task_id: int
    phase: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    train_rows: np.ndarray  # original table row indices (audit trail)
    val_rows: np.ndarray
    test_rows: np.ndarray
    transform: TransformRecord | None = None

    @property
    def n_train(self) -> int:
        return self.X_train.shape[0]


def _split_counts(n: int) -> tuple[int, int, int]:
    n_train = math.floor(SPLIT_RATIO[0] * n)
    n_val = math.floor(SPLIT_RATIO[1] * n)
    return n_train, n_val, n - n_train - n_val


def build_task_stream(
    table: RawTable, phase_map: PhaseMap, seed: int = 42
) -> list[TaskSplit]:
    """Construct the three-phase task stream with disjoint NORMAL allocation.

    Returns raw (untransformed) splits; apply :func:`fit_transform` per task.
    """
    phases = np.array([phase_map.phase_of(l) for l in table.labels])
    normal_rows = np.flatnonzero(phases == NORMAL)
    if normal_rows.size == 0:
        raise ValueError("no NORMAL rows in the table")
    attack_total = int(np.sum(phases != NORMAL))
    for phase in PHASES:
        if not np.any(phases == phase):
            raise ValueError(f"phase {phase} has no rows; cannot build the stream")
    ratio = normal_rows.size / attack_total

    pool = normal_rows[np.random.default_rng(seed).permutation(normal_rows.size)]
    pointer = 0
    splits: list[TaskSplit] = []
    for k, phase in enumerate(PHASES):
        atk = np.flatnonzero(phases == phase)
        atk = atk[np.random.default_rng(seed + k).permutation(atk.size)]
        n_tr, n_va, n_te = _split_counts(atk.size)
        atk_parts = (atk[:n_tr], atk[n_tr : n_tr + n_va], atk[n_tr + n_va :])
        # NORMAL counts floor the dataset-level ratio so an exactly
        # ratio-balanced pool can never be exhausted by rounding
        norm_counts = [math.floor(ratio * c) for c in (n_tr, n_va, n_te)]
        need = sum(norm_counts)
        if pointer + need > pool.size:
            raise ValueError(
                f"NORMAL pool exhausted at task {k}: need {need}, "
                f"have {pool.size - pointer}"
            )
        slice_ = pool[pointer : pointer + need]
        pointer += need
        norm_parts = (
            slice_[: norm_counts[0]],
            slice_[norm_counts[0] : norm_counts[0] + norm_counts[1]],
            slice_[norm_counts[0] + norm_counts[1] :],
        )
        part_rows = []
        part_X = []
        part_y = []
        for a_rows, n_rows_ in zip(atk_parts, norm_parts):
            rows = np.concatenate([n_rows_, a_rows])
            part_rows.append(rows)
            part_X.append(table.features[rows])
            part_y.append(
                np.concatenate([np.zeros(n_rows_.size, int), np.ones(a_rows.size, int)])
            )
        splits.append(
            TaskSplit(
                task_id=k,
                phase=phase,
                X_train=part_X[0], y_train=part_y[0],
                X_val=part_X[1], y_val=part_y[1],
                X_test=part_X[2], y_test=part_y[2],
                train_rows=part_rows[0], val_rows=part_rows[1], test_rows=part_rows[2],
            )
        )
    return splits


def fit_transform(split: TaskSplit) -> TaskSplit:
    """Fit the task transform on the training split and apply it everywhere."""
    X = np.asarray(split.X_train, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("training split is empty")
    medians = np.nanmedian(X, axis=0)
    filled = X.copy()
    bad = ~np.isfinite(filled)
    if bad.any():
        filled[bad] = np.broadcast_to(medians, filled.shape)[bad]
    mean = filled.mean(axis=0)
    std = filled.std(axis=0, ddof=0)
    std = np.where(std < 1e-12, 1.0, std)  # zero-variance dims pass through centered
    Z = (filled - mean) / std
    lo, hi = Z.min(axis=0), Z.max(axis=0)
    const = (hi - lo) < NEAR_CONSTANT
    U = _rescale(Z, lo, hi, const)

    pca_rec = None
    d = U.shape[1]
    if d < PCA_COMPONENTS:
        raise ValueError(
            f"only {d} usable feature dimensions; {PCA_COMPONENTS} required"
        )
    if d > PCA_COMPONENTS:
        basis, _ = pca_fit(U, PCA_COMPONENTS)
        pmean = U.mean(axis=0)
        P = (U - pmean) @ basis.T
        p_lo, p_hi = P.min(axis=0), P.max(axis=0)
        p_const = (p_hi - p_lo) < NEAR_CONSTANT
        pca_rec = PcaRecord(pmean, basis, p_lo, p_hi, p_const)

    record = TransformRecord(medians, mean, std, lo, hi, const, pca_rec)
    return TaskSplit(
        task_id=split.task_id,
        phase=split.phase,
        X_train=record.apply(split.X_train, clip=False),
        y_train=split.y_train,
        X_val=record.apply(split.X_val),
        y_val=split.y_val,
        X_test=record.apply(split.X_test),
        y_test=split.y_test,
        train_rows=split.train_rows,
        val_rows=split.val_rows,
        test_rows=split.test_rows,
        transform=record,
    )


def prepare_stream(table: RawTable, phase_map: PhaseMap, seed: int = 42) -> list[TaskSplit]:
    return [fit_transform(s) for s in build_task_stream(table, phase_map, seed)]


# ---------------------------------------------------------------------------
# Synthetic desk-scale stream.
# ---------------------------------------------------------------------------


@dataclass
class SynthStreamSpec:
    """Gaussian-cluster stand-in for the three-stage stream.

    Attack clusters sit on a ring of radius ``attack_radius``; ``shift``
    controls the angular separation between consecutive tasks (0 = identical
    tasks, 1 = 120 degrees apart), which drives baseline forgetting.
    """

    name: str = "default"
    dim: int = 6
    attacks_per_task: int = 450
    normal_ratio: float = 2.4
    attack_radius: float = 1.15
    attack_scale: float = 0.32
    normal_scale: float = 0.42
    shift: float = 1.0
    seed: int = 42

    def content_hash(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def synth_table(spec: SynthStreamSpec) -> RawTable:
    """Sample the labeled synthetic table feeding the standard stream builder."""
    rng = np.random.default_rng(spec.seed)
    n_normal = math.ceil(spec.normal_ratio * spec.attacks_per_task * len(PHASES))
    normals = rng.normal(0.0, spec.normal_scale, (n_normal, spec.dim))
    feats = [normals]
    labels = [np.full(n_normal, NORMAL)]
    for k, phase in enumerate(PHASES):
        angle = 2.0 * math.pi * spec.shift * k / len(PHASES)
        direction = np.zeros(spec.dim)
        direction[0] = math.cos(angle)
        direction[1] = math.sin(angle)
        center = spec.attack_radius * direction
        feats.append(rng.normal(0.0, spec.attack_scale, (spec.attacks_per_task, spec.dim)) + center)
        labels.append(np.full(spec.attacks_per_task, phase))
    return RawTable(
        features=np.vstack(feats),
        feature_names=[f"f{i}" for i in range(spec.dim)],
        labels=np.concatenate(labels),
    )


def synth_phase_map(spec: SynthStreamSpec) -> PhaseMap:
    mapping = {NORMAL: NORMAL}
    mapping.update({phase: phase for phase in PHASES})
    return PhaseMap(dataset=f"synthetic-{spec.name}", mapping=mapping)


def synth_stream(spec: SynthStreamSpec, split_seed: int = 42) -> list[TaskSplit]:
    """Deterministic synthetic three-task stream through the full protocol."""
    return prepare_stream(synth_table(spec), synth_phase_map(spec), seed=split_seed)


# ---------------------------------------------------------------------------
# Split cache.
# ---------------------------------------------------------------------------


def cache_key(source_id: str, phase_map_hash: str, seed: int) -> str:
    payload = json.dumps(
        {"source": source_id, "phase_map": phase_map_hash, "seed": seed,
         "version": CACHE_VERSION},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def cache_store(
    splits: list[TaskSplit], cache_root: str | Path, key: str, meta: dict
) -> Path:
    target = Path(cache_root) / key
    target.mkdir(parents=True, exist_ok=True)
    for s in splits:
        np.savez(
            target / f"task_{s.task_id}.npz",
            X_train=s.X_train, y_train=s.y_train,
            X_val=s.X_val, y_val=s.y_val,
            X_test=s.X_test, y_test=s.y_test,
            train_rows=s.train_rows, val_rows=s.val_rows, test_rows=s.test_rows,
            phase=np.array(s.phase),
        )
    manifest = {"version": CACHE_VERSION, "key": key, "num_tasks": len(splits), **meta}
    (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return target


def cache_load(cache_root: str | Path, key: str) -> list[TaskSplit] | None:
    """Load a cached stream; None on a miss, ValueError on corruption."""
    target = Path(cache_root) / key
    manifest_path = target / "manifest.json"
    if not manifest_path.exists():
        return None
    try:
        manifest = json.loads(manifest_path.read_text())
        num_tasks = int(manifest["num_tasks"])
        if manifest.get("version") != CACHE_VERSION or manifest.get("key") != key:
            raise KeyError("version/key mismatch")
        splits = []
        for k in range(num_tasks):
            with np.load(target / f"task_{k}.npz") as z:
                splits.append(
                    TaskSplit(
                        task_id=k,
                        phase=str(z["phase"]),
                        X_train=z["X_train"], y_train=z["y_train"],
                        X_val=z["X_val"], y_val=z["y_val"],
                        X_test=z["X_test"], y_test=z["y_test"],
                        train_rows=z["train_rows"], val_rows=z["val_rows"],
                        test_rows=z["test_rows"],
                    )
                )
        return splits
    except (KeyError, OSError, json.JSONDecodeError, ValueError) as exc:
        raise ValueError(
            f"split cache at {target} is corrupted ({exc}); delete the directory and rebuild"
        ) from exc
