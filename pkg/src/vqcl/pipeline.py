"""Continual-training orchestration over a task stream.

Holds the experiment configuration (ablation groups, hyperparameter coupling),
the tri-state persistent memory (classifier parameters, frozen replay
snapshots, anchor memory), per-task training against the composite objective,
per-task threshold selection, the logistic-regression oracle, and R-matrix
bookkeeping.

All randomness is derived from the run seed through fixed spawn keys, so a
full stream run is bit-reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import anchors as anc
from . import metrics as mx
from . import replay as rp
from . import vqc
from .dataprep import TaskSplit
from .optim import SpsaStepper
from .simcore import NOISELESS, NoiseParams
from .vqc import LossConfig, VqcModel

logger = logging.getLogger(__name__)

THRESHOLD_GRID = np.arange(1, 100) / 100.0

#: Kinds of replay source per ablation group.
GROUPS: dict[str, dict] = {
    "baseline": {"replay": None, "qfi": False, "fid": False, "anchors": None},
    "qgr-only": {"replay": "quantum", "qfi": False, "fid": False, "anchors": None},
    "gmm-replay": {"replay": "gmm", "qfi": False, "fid": False, "anchors": None},
    "ewc-only": {"replay": None, "qfi": True, "fid": False, "anchors": "state-space"},
    "qfish-only": {"replay": None, "qfi": True, "fid": True, "anchors": "state-space"},
    "full-state": {"replay": "quantum", "qfi": True, "fid": True, "anchors": "state-space"},
    "full-gradient": {"replay": "quantum", "qfi": True, "fid": True, "anchors": "gradient-space"},
}

# uncoupled -> coupled hyperparameter defaults (coupling fires iff replay and
# anchor regularization are both active)
REPLAY_RATIO_DEFAULT, REPLAY_RATIO_COUPLED = 0.3, 0.1
LAMBDA_QFI_DEFAULT, LAMBDA_QFI_COUPLED = 0.3, 0.25
LAMBDA_FID_DEFAULT, LAMBDA_FID_COUPLED = 0.1, 0.08

# spawn-key domains for derived rngs
_D_MODEL, _D_BATCH, _D_SPSA, _D_REPLAY, _D_FID, _D_THRESH, _D_ANCHOR, _D_GEN, _D_EMBED, _D_SHOTS, _D_QFI = range(11)


@dataclass
class ExperimentConfig:
    group: str = "baseline"
    seed: int = 0
    epochs: int = 20
    batch_size: int = 256
    num_qubits: int = 6
    num_layers: int = 3
    replay_ratio: float | None = None   # None -> group default with coupling
    lambda_qfi: float | None = None
    lambda_fid: float | None = None
    replay_alpha: float = 1.0
    noise_1q: float = 0.001
    noise_2q: float = 0.01
    readout_error: float = 0.02
    noise_enabled: bool = True
    exact_expectations: bool = True
    classifier_shots: int = 2048
    generator_shots: int = 1024
    generator_layers: int = 2
    generator_iters: int = 300
    gmm_components: int = 3
    anchor_budget: int = 64
    anchor_strategy: str | None = None  # None -> group default
    qfi_eps: float | None = None        # None -> 1e-4 exact, 1e-2 shot mode
    qfi_batch: int = 32
    fid_batch: int = 32
    drift_kind: str = "fidelity"
    weight_strategy: str = "auto"       # "auto" | "sqrt-boost"
    weight_boost: float = 1.5
    class_incremental: bool = False
    optimizer: str = "spsa"             # "spsa" | "gradient"
    spsa_a: float = 0.1
    spsa_c: float = 0.1
    learning_rate: float = 0.05

    def resolved(self) -> "ResolvedConfig":
        if self.group not in GROUPS:
            raise ValueError(
                f"unknown group {self.group!r}; valid groups: {sorted(GROUPS)}"
            )
        g = GROUPS[self.group]
        replay_kind = g["replay"]
        qfish_on = g["qfi"] or g["fid"]
        coupled = replay_kind is not None and qfish_on
        rho = self.replay_ratio
        if rho is None:
            rho = (REPLAY_RATIO_COUPLED if coupled else REPLAY_RATIO_DEFAULT) if replay_kind else 0.0
        lam_qfi = self.lambda_qfi
        if lam_qfi is None:
            lam_qfi = ((LAMBDA_QFI_COUPLED if coupled else LAMBDA_QFI_DEFAULT) if g["qfi"] else 0.0)
        lam_fid = self.lambda_fid
        if lam_fid is None:
            lam_fid = ((LAMBDA_FID_COUPLED if coupled else LAMBDA_FID_DEFAULT) if g["fid"] else 0.0)
        strategy = self.anchor_strategy or g["anchors"] or "state-space"
        eps = self.qfi_eps
        if eps is None:
            eps = 1e-4 if self.exact_expectations else 1e-2
        noise = NoiseParams(self.noise_1q, self.noise_2q, self.readout_error, self.noise_enabled)
        qcfg = anc.QfishConfig(
            lambda_qfi=lam_qfi,
            lambda_fid=lam_fid,
            eps=eps,
            anchor_budget=self.anchor_budget,
            anchor_strategy=strategy,
            qfi_batch=self.qfi_batch,
            fid_batch=self.fid_batch,
            drift_kind=self.drift_kind,
        )
        return ResolvedConfig(
            base=self,
            replay_kind=replay_kind,
            qfish_on=qfish_on,
            coupled=coupled,
            replay_ratio=rho,
            noise=noise,
            qfish=qcfg,
            policy=rp.ReplayPolicy(),
        )


@dataclass
class ResolvedConfig:
    base: ExperimentConfig
    replay_kind: str | None
    qfish_on: bool
    coupled: bool
    replay_ratio: float
    noise: NoiseParams
    qfish: anc.QfishConfig
    policy: rp.ReplayPolicy

    @property
    def shots(self) -> int | None:
        return None if self.base.exact_expectations else self.base.classifier_shots

    def effective_doc(self) -> dict:
        doc = asdict(self.base)
        doc.update(
            replay_kind=self.replay_kind,
            qfish_on=self.qfish_on,
            coupled=self.coupled,
            effective_replay_ratio=self.replay_ratio,
            effective_lambda_qfi=self.qfish.lambda_qfi,
            effective_lambda_fid=self.qfish.lambda_fid,
            effective_anchor_strategy=self.qfish.anchor_strategy,
            effective_qfi_eps=self.qfish.eps,
        )
        return doc


@dataclass
class PersistentState:
    model: VqcModel
    generators: list = field(default_factory=list)
    memory: anc.AnchorMemory = field(default_factory=anc.AnchorMemory)
    thresholds: dict[int, float] = field(default_factory=dict)
    tuning_subsets: dict[int, np.ndarray] = field(default_factory=dict)
    tasks_done: int = 0
    # transient evaluation handles (curves, threshold re-tuning); the
    # serialized archive carries only the bounded memory above
    seen_splits: dict[int, TaskSplit] = field(default_factory=dict, repr=False)

    def to_doc(self) -> dict:
        return {
            "model": self.model.to_doc(),
            "generators": [g.to_doc() for g in self.generators],
            "anchor_memory": self.memory.to_doc(),
            "thresholds": {str(k): v for k, v in sorted(self.thresholds.items())},
            "tuning_subsets": {
                str(k): v.tolist() for k, v in sorted(self.tuning_subsets.items())
            },
            "tasks_done": self.tasks_done,
        }


class TaskAborted(RuntimeError):
    """Raised when per-task training hits a non-finite objective."""


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _int_seed(seed: int, *key: int) -> int:
    return int(_rng(seed, *key).integers(2**63))


# ---------------------------------------------------------------------------
# Forward evaluation helpers.
# ---------------------------------------------------------------------------


def _model_scores(model: VqcModel, X: np.ndarray, noise: NoiseParams,
                  shots: int | None = None, rng=None) -> np.ndarray:
    zs = vqc.z_features(model, X, noise, shots=shots, rng=rng)
    return vqc.scores_from_z(model, zs)


def make_score_fn(model: VqcModel, noise: NoiseParams):
    """Flat-parameter scalar-output closure used by the anchor machinery."""

    def score_fn(flat: np.ndarray, X: np.ndarray) -> np.ndarray:
        return _model_scores(model.with_flat_params(flat), np.atleast_2d(X), noise)

    return score_fn


def evaluate(
    model: VqcModel,
    X: np.ndarray,
    y: np.ndarray,
    threshold: float,
    noise: NoiseParams,
    shots: int | None = None,
    rng=None,
) -> dict:
    probs = np.asarray(vqc.predict_proba(model, np.atleast_2d(X), noise, shots=shots, rng=rng))
    preds = (probs >= threshold).astype(int)
    counts = mx.confusion(y, preds)
    precision, recall, f1 = mx.attack_prf(counts)
    return {
        "attack_precision": precision,
        "attack_recall": recall,
        "attack_f1": f1,
        "accuracy": mx.accuracy(preds, y),
        "f1_macro": mx.f1_macro(preds, y),
        "f1_weighted": mx.f1_weighted(preds, y),
        "roc_auc": mx.roc_auc(probs, y),
    }


def attack_f1(model, X, y, threshold, noise, shots=None, rng=None) -> float:
    return evaluate(model, X, y, threshold, noise, shots=shots, rng=rng)["attack_f1"]


# ---------------------------------------------------------------------------
# Composite objective.
# ---------------------------------------------------------------------------


def composite_loss(
    model: VqcModel,
    X: np.ndarray,
    y: np.ndarray,
    loss_cfg: LossConfig,
    replay_X: np.ndarray,
    replay_y: np.ndarray,
    memory: anc.AnchorMemory,
    qcfg: anc.QfishConfig,
    noise: NoiseParams = NOISELESS,
    alpha: float = 1.0,
    rng=None,
) -> float:
    """Supervised loss + alpha * replay loss + stability penalty.

    The replay term vanishes for an empty replay batch and the penalty
    vanishes for an empty memory, so the first task reduces to plain
    supervised training.
    """
    total = vqc.supervised_loss(model, X, y, loss_cfg, noise=noise)
    if replay_y is not None and len(replay_y) > 0:
        total += alpha * vqc.supervised_loss(model, replay_X, replay_y, loss_cfg, noise=noise)
    total += anc.regularizer(
        model.flat_params(), memory, qcfg, make_score_fn(model, noise), rng
    )
    return float(total)


def _fused_objective(
    model_template: VqcModel,
    Xc: np.ndarray,
    yc: np.ndarray,
    loss_cfg: LossConfig,
    Xr: np.ndarray,
    yr: np.ndarray,
    alpha: float,
    memory: anc.AnchorMemory,
    qcfg: anc.QfishConfig,
    noise: NoiseParams,
    fid_inputs: np.ndarray | None,
    fid_scores: np.ndarray | None,
):
    """Single-batched-forward composite objective over flat parameters.

    Equivalent to :func:`composite_loss` with the given fidelity sub-sample;
    one circuit evaluation covers the current batch, the replay batch, and the
    anchor rows.
    """
    n_c, n_r = len(yc), len(yr)
    blocks = [Xc]
    if n_r:
        blocks.append(Xr)
    use_fid = (
        qcfg.lambda_fid > 0.0 and memory and fid_inputs is not None and len(fid_inputs) > 0
    )
    if use_fid:
        blocks.append(fid_inputs)
    X_all = np.vstack(blocks)
    fisher = memory.consolidated_fisher() if (memory and qcfg.lambda_qfi > 0.0) else None
    ref = memory.reference_params() if memory else None

    def objective(flat: np.ndarray) -> float:
        m = model_template.with_flat_params(flat)
        zs = vqc.z_features(m, X_all, noise)
        scores = vqc.scores_from_z(m, zs)
        probs = vqc.sigmoid(m.tau * scores)
        total = vqc.loss_from_probs(probs[:n_c], yc, loss_cfg)
        if n_r:
            total += alpha * vqc.loss_from_probs(probs[n_c : n_c + n_r], yr, loss_cfg)
        if fisher is not None:
            delta = flat - ref
            total += qcfg.lambda_qfi * float(np.sum(fisher * delta**2))
        if use_fid:
            cur = scores[n_c + n_r :]
            if qcfg.drift_kind == "fidelity":
                total += qcfg.lambda_fid * float(
                    1.0 - np.mean(anc.fidelity_proxy(cur, fid_scores))
                )
            elif qcfg.drift_kind == "mse":
                total += qcfg.lambda_fid * anc.output_drift(cur, fid_scores, "mse")
            else:  # kl on probabilities
                tau_star = math.exp(ref[-1])
                snap_p = vqc.sigmoid(tau_star * fid_scores)
                total += qcfg.lambda_fid * anc.output_drift(
                    np.clip(probs[n_c + n_r :], vqc.P_EPS, 1 - vqc.P_EPS),
                    np.clip(snap_p, vqc.P_EPS, 1 - vqc.P_EPS),
                    "kl",
                )
        return float(total)

    return objective


def composite_readout_gradient(
    model: VqcModel,
    zs_current: np.ndarray,
    y: np.ndarray,
    loss_cfg: LossConfig,
    zs_replay: np.ndarray | None = None,
    y_replay: np.ndarray | None = None,
    alpha: float = 1.0,
    memory: anc.AnchorMemory | None = None,
    qcfg: anc.QfishConfig | None = None,
    zs_anchors: np.ndarray | None = None,
    stored_scores: np.ndarray | None = None,
) -> np.ndarray:
    """Analytic gradient of the composite loss w.r.t. (w, bias, tau_raw).

    Matches central finite differences away from the fidelity clip boundary
    and the probability clamp.  Covers the supervised term, the replay term,
    the sensitivity-weighted quadratic (its readout coordinates), and the
    fidelity-proxy term.
    """
    grad = vqc.supervised_readout_gradient(model, zs_current, y, loss_cfg)
    if y_replay is not None and len(y_replay) > 0:
        grad = grad + alpha * vqc.supervised_readout_gradient(
            model, zs_replay, y_replay, loss_cfg
        )
    if memory and qcfg is not None:
        flat = model.flat_params()
        sl = model.readout_slice()
        if qcfg.lambda_qfi > 0.0:
            fisher = memory.consolidated_fisher()
            delta = flat - memory.reference_params()
            grad = grad + 2.0 * qcfg.lambda_qfi * (fisher * delta)[sl]
        if qcfg.lambda_fid > 0.0 and zs_anchors is not None and len(zs_anchors) > 0:
            if qcfg.drift_kind != "fidelity":
                raise NotImplementedError(
                    "analytic readout gradients cover the fidelity drift term only"
                )
            cur = vqc.scores_from_z(model, zs_anchors)
            diff = cur - stored_scores
            inside = anc.fidelity_proxy(cur, stored_scores)
            active = ((inside > 0.0) & (inside < 1.0)) | (diff == 0.0)
            weight = np.where(active, diff, 0.0) / len(cur)
            dw = qcfg.lambda_fid * (weight @ zs_anchors)
            db = qcfg.lambda_fid * float(np.sum(-weight))
            grad = grad + np.concatenate([dw, [db, 0.0]])
    return grad


# ---------------------------------------------------------------------------
# Threshold selection and the oracle baseline.
# ---------------------------------------------------------------------------


def select_threshold(
    model: VqcModel,
    X_train: np.ndarray,
    y_train: np.ndarray,
    noise: NoiseParams,
    seed: int,
    shots: int | None = None,
    subset_idx: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Pick the macro-F1-maximizing threshold on an unstratified tuning subset.

    Grid {0.01, ..., 0.99}; ties break toward 0.5, then toward the lower
    threshold.  A single-class subset returns 0.5 with a warning.
    """
    n = len(y_train)
    if n == 0:
        raise ValueError("empty training split")
    if subset_idx is None:
        size = min(n, max(100, math.ceil(0.2 * n)))
        subset_idx = _rng(seed, _D_THRESH).choice(n, size=size, replace=False)
    y_sub = np.asarray(y_train)[subset_idx]
    if len(np.unique(y_sub)) < 2:
        logger.warning("threshold tuning subset is single-class; falling back to 0.5")
        return 0.5, subset_idx
    probs = np.asarray(
        vqc.predict_proba(
            model, np.atleast_2d(X_train)[subset_idx], noise,
            shots=shots, rng=_rng(seed, _D_THRESH, 1),
        )
    )
    scores = np.array(
        [mx.f1_macro((probs >= t).astype(int), y_sub) for t in THRESHOLD_GRID]
    )
    best = scores.max()
    candidates = THRESHOLD_GRID[scores == best]
    order = np.lexsort((candidates, np.abs(candidates - 0.5)))
    return float(candidates[order[0]]), subset_idx


def oracle_baseline(
    split: TaskSplit,
    l2: float = 1e-4,
    max_iters: int = 500,
    tol: float = 1e-8,
    lr: float = 0.5,
) -> float:
    """Attack-F1 of an L2-regularized logistic regression at threshold 0.5.

    Trained by full-batch gradient descent on the same 6-D features as the
    quantum model; the bias is unregularized.
    """
    y = np.asarray(split.y_train)
    if len(np.unique(y)) < 2:
        raise ValueError("oracle baseline needs both classes")
    Xb = np.c_[split.X_train, np.ones(len(y))]
    w = np.zeros(Xb.shape[1])
    for _ in range(max_iters):
        p = vqc.sigmoid(Xb @ w)
        grad = Xb.T @ (p - y) / len(y)
        grad[:-1] += l2 * w[:-1]
        if np.max(np.abs(grad)) < tol:
            break
        w -= lr * grad
    Xt = np.c_[split.X_test, np.ones(len(split.y_test))]
    preds = (vqc.sigmoid(Xt @ w) >= 0.5).astype(int)
    _, _, f1 = mx.attack_prf(mx.confusion(split.y_test, preds))
    return f1


# ---------------------------------------------------------------------------
# Per-task training.
# ---------------------------------------------------------------------------


def _gradient_step(
    model: VqcModel,
    objective,
    Xc, yc, loss_cfg, Xr, yr, alpha, memory, qcfg, noise,
    fid_inputs, fid_scores, lr: float,
) -> np.ndarray:
    """One full-gradient update: parameter-shift for circuit angles,
    central differences for the conditioning block, analytic readout."""
    flat = model.flat_params()
    n_theta = model.theta.size
    n_w = model.W.size
    grad = np.zeros_like(flat)
    shift = math.pi / 2.0
    for i in range(n_theta):
        for sign, delta in ((1.0, shift), (-1.0, -shift)):
            p = flat.copy()
            p[i] += delta
            grad[i] += sign * objective(p) / 2.0
    eps = 1e-6
    for i in range(n_theta, n_theta + n_w):
        p_plus, p_minus = flat.copy(), flat.copy()
        p_plus[i] += eps
        p_minus[i] -= eps
        grad[i] = (objective(p_plus) - objective(p_minus)) / (2.0 * eps)
    zs_c = vqc.z_features(model, Xc, noise)
    zs_r = vqc.z_features(model, Xr, noise) if len(yr) else None
    zs_a = (
        vqc.z_features(model, fid_inputs, noise)
        if (fid_inputs is not None and len(fid_inputs) and qcfg.lambda_fid > 0)
        else None
    )
    grad[model.readout_slice()] = composite_readout_gradient(
        model, zs_c, yc, loss_cfg, zs_r, yr, alpha, memory, qcfg, zs_a, fid_scores
    )
    return flat - lr * grad


def train_task(
    state: PersistentState,
    split: TaskSplit,
    rcfg: ResolvedConfig,
) -> tuple[PersistentState, list[dict]]:
    """Train the fixed epoch budget on one task, then update the tri-state
    memory (generator snapshot, anchors + sensitivities, threshold).

    The parameter-shift gradient in the circuit-angle block requires wrapping
    each angle's +-pi/2 shift, so the gradient optimizer is restricted to
    noiseless exact mode.  Returns the updated state and the per-epoch
    Attack-F1 trace over all seen tasks.
    """
    cfg = rcfg.base
    t = state.tasks_done
    seed = cfg.seed
    X_train = np.asarray(split.X_train, dtype=float)
    y_train = np.asarray(split.y_train)
    n = len(y_train)
    if n == 0:
        raise TaskAborted(f"task {t}: empty training split")
    loss_cfg = vqc.make_loss_config(y_train, cfg.weight_strategy, cfg.weight_boost)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    replay_active = rcfg.replay_kind is not None and t > 0 and state.generators
    n_replay = rp.round_half_up(rcfg.replay_ratio * cfg.batch_size) if replay_active else 0
    qfish_active = rcfg.qfish_on and state.memory
    if cfg.optimizer == "gradient" and rcfg.noise.enabled:
        raise ValueError("gradient optimizer requires noiseless exact mode")
    stepper = SpsaStepper(
        state.model.num_flat_params,
        total_steps,
        seed=_int_seed(seed, _D_SPSA, t),
        a=cfg.spsa_a,
        c=cfg.spsa_c,
    )
    batch_rng = _rng(seed, _D_BATCH, t)
    fid_rng = _rng(seed, _D_FID, t)
    model = state.model
    flat = model.flat_params()
    trace: list[dict] = []
    all_anchor_inputs = state.memory.stacked_inputs() if qfish_active else None
    all_anchor_scores = state.memory.stacked_scores() if qfish_active else None

    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            n_real = max(cfg.batch_size - n_replay, 1)
            if n_real <= n:
                idx = batch_rng.choice(n, size=n_real, replace=False)
            else:
                idx = batch_rng.choice(n, size=n_real, replace=True)
            Xc, yc = X_train[idx], y_train[idx]
            if n_replay:
                Xr, yr = rp.draw_replay_batch(
                    state.generators, rcfg.policy, cfg.batch_size,
                    rcfg.replay_ratio, seed=_int_seed(seed, _D_REPLAY, t, step),
                )
            else:
                Xr, yr = np.empty((0, X_train.shape[1])), np.empty(0, dtype=int)
            fid_inputs = fid_scores = None
            if qfish_active and rcfg.qfish.lambda_fid > 0.0:
                total_anchors = len(all_anchor_scores)
                if total_anchors > rcfg.qfish.fid_batch:
                    sub = fid_rng.choice(total_anchors, size=rcfg.qfish.fid_batch, replace=False)
                    fid_inputs, fid_scores = all_anchor_inputs[sub], all_anchor_scores[sub]
                else:
                    fid_inputs, fid_scores = all_anchor_inputs, all_anchor_scores
            objective = _fused_objective(
                model, Xc, yc, loss_cfg, Xr, yr, cfg.replay_alpha,
                state.memory if qfish_active else anc.AnchorMemory(),
                rcfg.qfish, rcfg.noise, fid_inputs, fid_scores,
            )
            try:
                if cfg.optimizer == "spsa":
                    flat = stepper.step(objective, flat)
                else:
                    flat = _gradient_step(
                        model.with_flat_params(flat), objective, Xc, yc, loss_cfg,
                        Xr, yr, cfg.replay_alpha,
                        state.memory if qfish_active else anc.AnchorMemory(),
                        rcfg.qfish, rcfg.noise, fid_inputs, fid_scores,
                        cfg.learning_rate,
                    )
            except RuntimeError as exc:
                raise TaskAborted(f"task {t}, step {step}: {exc}") from exc
            if not np.all(np.isfinite(flat)):
                raise TaskAborted(f"task {t}, step {step}: non-finite parameters")
            step += 1
        # per-epoch curves use exact expectations regardless of the eval mode
        epoch_model = model.with_flat_params(flat)
        trace.extend(_epoch_curve_rows(epoch_model, state, split, t, epoch, rcfg))

    model = model.with_flat_params(flat)
    state.model = model

    # memory update: generator snapshot, anchors + sensitivities, threshold
    if rcfg.replay_kind == "quantum":
        snap = rp.train_generator(
            X_train, y_train, t,
            num_layers=cfg.generator_layers,
            noise=rcfg.noise,
            max_iters=cfg.generator_iters,
            seed=_int_seed(seed, _D_GEN, t),
            shots=None if cfg.exact_expectations else cfg.generator_shots,
        )
        state.generators.append(snap)
    elif rcfg.replay_kind == "gmm":
        state.generators.append(
            rp.gmm_fit(
                X_train, y_train, t,
                components=cfg.gmm_components,
                seed=_int_seed(seed, _D_GEN, t),
            )
        )
    if rcfg.qfish_on:
        _store_anchors(state, split, rcfg, t)

    threshold, subset_idx = select_threshold(
        model, X_train, y_train, rcfg.noise,
        seed=_int_seed(seed, _D_THRESH, t), shots=rcfg.shots,
    )
    state.thresholds[t] = threshold
    state.tuning_subsets[t] = subset_idx
    if cfg.class_incremental:
        for k in range(t):
            past_split = state.seen_splits.get(k)
            if past_split is not None:
                state.thresholds[k], _ = select_threshold(
                    model, past_split.X_train, past_split.y_train, rcfg.noise,
                    seed=_int_seed(seed, _D_THRESH, k),
                    shots=rcfg.shots,
                    subset_idx=state.tuning_subsets[k],
                )
    state.seen_splits[t] = split
    state.tasks_done = t + 1
    return state, trace


def _epoch_curve_rows(model, state, current_split, t, epoch, rcfg) -> list[dict]:
    rows = []
    for k in range(t):
        past = state.seen_splits.get(k)
        if past is None:
            continue
        rows.append(
            {
                "after_task": t, "epoch": epoch, "eval_task": k,
                "attack_f1": attack_f1(
                    model, past.X_test, past.y_test, state.thresholds[k], rcfg.noise
                ),
            }
        )
    rows.append(
        {
            "after_task": t, "epoch": epoch, "eval_task": t,
            "attack_f1": attack_f1(
                model, current_split.X_test, current_split.y_test, 0.5, rcfg.noise
            ),
        }
    )
    return rows


def _store_anchors(state: PersistentState, split: TaskSplit, rcfg: ResolvedConfig, t: int) -> None:
    cfg = rcfg.base
    strategy = rcfg.qfish.anchor_strategy
    model = state.model
    X, y = np.asarray(split.X_train, dtype=float), np.asarray(split.y_train)
    embedding = None
    if strategy == "state-space":
        embedding = vqc.condition_input(model, X)
    elif strategy == "gradient-space":
        embedding = _gradient_embedding(model, X, rcfg, seed=_int_seed(cfg.seed, _D_EMBED, t))
    idx = anc.select_anchors(
        X, y, cfg.anchor_budget, strategy,
        embedding=embedding, seed=_int_seed(cfg.seed, _D_ANCHOR, t),
    )
    inputs = X[idx]
    score_fn = make_score_fn(model, rcfg.noise)
    flat = model.flat_params()
    qfi_rows = inputs
    if len(inputs) > rcfg.qfish.qfi_batch:
        sub = _rng(cfg.seed, _D_QFI, t).choice(len(inputs), size=rcfg.qfish.qfi_batch, replace=False)
        qfi_rows = inputs[sub]
    fisher = anc.estimate_sensitivity(score_fn, flat, qfi_rows, rcfg.qfish.eps)
    state.memory.add(
        anc.TaskAnchorRecord(
            task_id=t,
            inputs=inputs,
            snapshot_params=flat,
            snapshot_scores=score_fn(flat, inputs),
            fisher=fisher,
        )
    )


def _gradient_embedding(model: VqcModel, X: np.ndarray, rcfg: ResolvedConfig, seed: int) -> np.ndarray:
    """Per-sample central-difference score gradients over a fixed random
    parameter subset (bounded at 16 coordinates for cost)."""
    flat = model.flat_params()
    rng = np.random.default_rng(seed)
    subset = rng.choice(flat.size, size=min(flat.size, 16), replace=False)
    eps = rcfg.qfish.eps
    score_fn = make_score_fn(model, rcfg.noise)
    cols = []
    for j in subset:
        plus, minus = flat.copy(), flat.copy()
        plus[j] += eps
        minus[j] -= eps
        cols.append((score_fn(plus, X) - score_fn(minus, X)) / (2.0 * eps))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Stream runner.
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    rmatrix: mx.RMatrix
    report: dict
    state: PersistentState
    curves: list[dict]


def run_stream(splits: list[TaskSplit], cfg: ExperimentConfig) -> RunResult:
    """Train the task sequence and assemble the R-matrix and metrics report."""
    if not splits:
        raise ValueError("empty task stream")
    rcfg = cfg.resolved()
    T = len(splits)
    model = VqcModel.initialize(
        cfg.num_qubits, cfg.num_layers,
        input_dim=splits[0].X_train.shape[1],
        seed=_int_seed(cfg.seed, _D_MODEL),
    )
    state = PersistentState(model=model)
    rmatrix = mx.RMatrix(T)
    curves: list[dict] = []
    for k, split in enumerate(splits):
        # random-init baseline b_k at threshold 0.5 (forward-transfer floor)
        rmatrix.baseline[k] = attack_f1(
            model, split.X_test, split.y_test, 0.5, rcfg.noise,
            shots=rcfg.shots, rng=_rng(cfg.seed, _D_SHOTS, 0, k),
        )
    for t, split in enumerate(splits):
        if t >= 1:
            # pre-training entry R[t-1][t]; no task threshold exists yet
            rmatrix.set_entry(
                t - 1, t,
                attack_f1(
                    state.model, split.X_test, split.y_test, 0.5, rcfg.noise,
                    shots=rcfg.shots, rng=_rng(cfg.seed, _D_SHOTS, 1, t),
                ),
            )
        state, trace = train_task(state, split, rcfg)
        curves.extend(trace)
        for k in range(t + 1):
            past = splits[k]
            rmatrix.set_entry(
                t, k,
                attack_f1(
                    state.model, past.X_test, past.y_test,
                    state.thresholds[k], rcfg.noise,
                    shots=rcfg.shots, rng=_rng(cfg.seed, _D_SHOTS, 2, t, k),
                ),
            )
    oracle = np.array([oracle_baseline(s) for s in splits])
    report = build_report(rmatrix, oracle, splits, state, rcfg)
    return RunResult(rmatrix=rmatrix, report=report, state=state, curves=curves)


def build_report(
    rmatrix: mx.RMatrix,
    oracle: np.ndarray,
    splits: list[TaskSplit],
    state: PersistentState,
    rcfg: ResolvedConfig,
) -> dict:
    T = rmatrix.num_tasks
    per_task = []
    for k, split in enumerate(splits):
        per_task.append(
            {
                "task": k,
                "phase": split.phase,
                "threshold": state.thresholds.get(k),
                "final_attack_f1": rmatrix.entry(T - 1, k),
                "oracle_attack_f1": float(oracle[k]),
            }
        )
    continual: dict = {"mean_attack_f1": mx.mean_final(rmatrix)}
    if T >= 2:
        continual.update(
            forgetting=mx.forgetting(rmatrix),
            bwt=mx.bwt(rmatrix),
            fwt=mx.fwt(rmatrix),
        )
    else:
        # degenerate single-task stream: retention metrics are undefined
        continual.update(forgetting=None, bwt=None, fwt=None)
    continual["intransigence"] = mx.intransigence(rmatrix, oracle)
    continual["baseline"] = [None if np.isnan(v) else float(v) for v in rmatrix.baseline]
    return {
        "per_task": per_task,
        "continual": continual,
        "config": rcfg.effective_doc(),
    }
