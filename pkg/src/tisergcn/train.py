"""Optimization loop, split protocol, and regression metrics.

Training minimizes mean-squared error on log10 intensity targets plus an
L2 penalty on convolution and graph weights, using RMSprop with
mini-batches and early stopping on a validation fold.  The evaluation
protocol draws, per repeat, a fresh 80/20 train/test split and 5
cross-validation folds over the train part; metrics are MAE / MSE / RMSE
per intensity measure over all (event, station) cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import EventDataset
from .errors import InputError, TrainingDivergedError
from .geo import PropagationMatrix
from .model import IM_NAMES, Model, ModelConfig, build_cnn_baseline, build_tiser_gcn
from . import autodiff as ad

METRIC_NAMES = ("mae", "mse", "rmse")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 20
    max_epochs: int = 100
    patience: int = 10
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-7
    l2: float = 1e-4
    folds: int = 5
    repeats: int = 5
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.test_fraction < 1.0:
            raise InputError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.max_epochs < 1 or self.folds < 2 or self.repeats < 1:
            raise InputError("max_epochs >= 1, folds >= 2 and repeats >= 1 required")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer

def rmsprop_init(params) -> list[np.ndarray]:
    """Fresh squared-gradient accumulators, one per parameter tensor."""
    return [np.zeros_like(p.data) for p in params]


def rmsprop_step(params, state, cfg: TrainConfig, where: str = "") -> None:
    """One in-place update: v <- rho v + (1-rho) g^2; p <- p - lr g / (sqrt(v) + eps).

    Raises TrainingDivergedError on any non-finite gradient, naming the
    parameter and the caller-supplied position tag.
    """
    for p, v in zip(params, state):
        g = p.grad
        if not np.isfinite(g).all():
            raise TrainingDivergedError(
                f"non-finite gradient in {p.name or 'parameter'}{where}")
        v *= cfg.rho
        v += (1.0 - cfg.rho) * g * g
        p.data -= cfg.lr * g / (np.sqrt(v) + cfg.eps)


# ---------------------------------------------------------------------------
# split protocol

@dataclass(frozen=True)
class SplitPlan:
    """One repeat: a test set plus disjoint CV folds over the train part."""
    repeat: int
    seed: int
    test_idx: np.ndarray
    folds: tuple[np.ndarray, ...]

    def train_idx(self, val_fold: int) -> np.ndarray:
        return np.concatenate([f for i, f in enumerate(self.folds) if i != val_fold])


def split_protocol(n_events: int, seed: int, cfg: TrainConfig | None = None) -> list[SplitPlan]:
    """Per repeat: shuffle, hold out test_fraction, split the rest into folds.

    Repeats draw distinct child seeds from one root seed, so test sets
    differ across repeats while the whole plan stays reproducible.
    """
    cfg = cfg or TrainConfig()
    if n_events < 10:
        raise InputError(f"need at least 10 events to split, got {n_events}")
    n_test = int(round(n_events * cfg.test_fraction))
    if n_events - n_test < cfg.folds:
        raise InputError(
            f"{n_events} events leave {n_events - n_test} for {cfg.folds} folds")
    plans = []
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(cfg.repeats)):
        rng = np.random.default_rng(child)
        perm = rng.permutation(n_events)
        plans.append(SplitPlan(
            repeat=r,
            seed=int(rng.integers(0, 2**62)),
            test_idx=perm[:n_test],
            folds=tuple(np.array_split(perm[n_test:], cfg.folds)),
        ))
    return plans


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def curves_rows(self) -> list[str]:
        rows = ["epoch,train_loss,val_loss"]
        for e, tl in enumerate(self.train_loss):
            vl = self.val_loss[e] if e < len(self.val_loss) else float("nan")
            rows.append(f"{e},{tl!r},{vl!r}")
        return rows


def predict_batched(model: Model, prop: PropagationMatrix, X: np.ndarray,
                    z: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Forward pass without a tape, chunked to bound memory: (E, 5, N)."""
    outs = []
    for lo in range(0, X.shape[0], batch_size):
        outs.append(model.forward(prop, X[lo:lo + batch_size], z).data)
    return np.concatenate(outs).astype(np.float64)


def _dataset_mse(model, prop, X, Y, z, batch_size) -> float:
    pred = predict_batched(model, prop, X, z, batch_size)
    return float(np.mean((pred - np.asarray(Y, dtype=np.float64)) ** 2))


def train(model: Model, ds: EventDataset, prop: PropagationMatrix, cfg: TrainConfig,
          train_idx=None, val_idx=None, seed: int = 0,
          stop_below_train_loss: float | None = None) -> TrainHistory:
    """Mini-batch RMSprop on MSE + L2, early stopping on validation MSE.

    Shuffle order is a pure function of (seed, epoch).  With a validation
    set, training stops after `patience` epochs without improvement and
    the best-validation weights are restored; without one it runs to
    max_epochs (or until train loss drops below the optional target).
    Reported losses are data MSE only; the L2 term steers updates but is
    excluded from curves so they stay comparable across penalty settings.
    """
    dtype = model.cfg.np_dtype
    train_idx = np.arange(ds.n_events) if train_idx is None else np.asarray(train_idx)
    X = np.asarray(ds.X, dtype=dtype)[train_idx]
    Y = np.asarray(ds.Y, dtype=dtype)[train_idx]
    z = ds.stations.coords()
    params = model.params()
    l2_params = model.l2_params()
    state = rmsprop_init(params)
    hist = TrainHistory()

    best_val = np.inf
    best_state = None
    since_best = 0
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng((seed, epoch)).permutation(train_idx.size)
        total_se = 0.0
        for lo in range(0, order.size, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            pred = model.forward(prop, X[sel], z)
            data_loss = ad.mse_loss(pred, Y[sel])
            loss = data_loss
            if cfg.l2 > 0.0 and l2_params:
                loss = ad.add(loss, ad.l2_penalty(l2_params, cfg.l2))
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, batch {lo // cfg.batch_size}")
            ad.backward(loss)
            rmsprop_step(params, state, cfg,
                         where=f" at epoch {epoch}, batch {lo // cfg.batch_size}")
            ad.zero_grad(params)
            total_se += float(data_loss.data) * sel.size
        train_loss = total_se / order.size
        hist.train_loss.append(train_loss)

        if val_idx is not None:
            val_loss = _dataset_mse(model, prop, ds.X[val_idx], ds.Y[val_idx], z,
                                    cfg.batch_size)
            hist.val_loss.append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_state = [p.data.copy() for p in params]
                hist.best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
        else:
            hist.best_epoch = epoch
        if stop_below_train_loss is not None and train_loss < stop_below_train_loss:
            break
    if best_state is not None:
        for p, saved in zip(params, best_state):
            p.data = saved
    return hist


# ---------------------------------------------------------------------------
# metrics

def evaluate(model: Model, ds: EventDataset, prop: PropagationMatrix,
             idx=None, batch_size: int = 32) -> dict:
    """Per-IM MAE / MSE / RMSE in log10 target space, plus an `overall` row."""
    idx = np.arange(ds.n_events) if idx is None else np.asarray(idx)
    if idx.size == 0:
        raise InputError("evaluation set is empty")
    pred = predict_batched(model, prop, ds.X[idx], ds.stations.coords(), batch_size)
    return metrics_from_predictions(np.asarray(ds.Y, dtype=np.float64)[idx], pred)


def metrics_from_predictions(y_true: np.ndarray, y_pred: np.ndarray) -> dict:
    """Metric triple per IM over all (event, station) cells of (E, 5, N) arrays."""
    err = y_pred - y_true
    out = {}
    for i, im in enumerate(IM_NAMES):
        e = err[:, i, :]
        mse = float(np.mean(e * e))
        out[im] = {"mae": float(np.mean(np.abs(e))), "mse": mse,
                   "rmse": float(np.sqrt(mse))}
    mse = float(np.mean(err * err))
    out["overall"] = {"mae": float(np.mean(np.abs(err))), "mse": mse,
                      "rmse": float(np.sqrt(mse))}
    return out


# ---------------------------------------------------------------------------
# full protocol

@dataclass
class RunReport:
    """Everything one protocol execution produced, JSON-serializable.

    Wall-clock time is deliberately not part of this record so that
    reruns with identical seeds serialize to identical bytes.
    """
    model_kind: str
    model_config: dict
    train_config: dict
    seed: int
    n_events: int
    param_count: int
    runs: list[dict]
    aggregate: dict

    def to_json(self) -> str:
        body = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return json.dumps(body, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def _aggregate(run_metrics: list[dict]) -> dict:
    out = {}
    for im in list(IM_NAMES) + ["overall"]:
        out[im] = {}
        for m in METRIC_NAMES:
            vals = np.array([r[im][m] for r in run_metrics])
            out[im][m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def run_protocol(kind: str, ds: EventDataset, prop: PropagationMatrix,
                 model_cfg: ModelConfig, cfg: TrainConfig,
                 seed: int) -> tuple[RunReport, dict]:
    """Repeats x folds training runs, each evaluated on its repeat's test set.

    Returns the report plus the best run's test-set residuals
    {repeat, fold, event_idx, y_true, y_pred} for scatter exports.
    """
    builders = {"tiser": build_tiser_gcn, "cnn": build_cnn_baseline}
    if kind not in builders:
        raise InputError(f"unknown model kind {kind!r}")
    plans = split_protocol(ds.n_events, seed, cfg)
    runs = []
    best_mse = np.inf
    residuals = {}
    for plan in plans:
        for fold in range(cfg.folds):
            run_seed = int(np.random.SeedSequence((seed, plan.repeat, fold))
                           .generate_state(1)[0])
            model = builders[kind](replace(model_cfg, init_seed=run_seed), ds.n_nodes)
            hist = train(model, ds, prop, cfg,
                         train_idx=plan.train_idx(fold), val_idx=plan.folds[fold],
                         seed=run_seed)
            y_pred = predict_batched(model, prop, ds.X[plan.test_idx],
                                     ds.stations.coords(), cfg.batch_size)
            y_true = np.asarray(ds.Y, dtype=np.float64)[plan.test_idx]
            m = metrics_from_predictions(y_true, y_pred)
            runs.append({
                "repeat": plan.repeat,
                "fold": fold,
                "seed": run_seed,
                "best_epoch": hist.best_epoch,
                "epochs_run": len(hist.train_loss),
                "metrics": m,
                "curves": {"train_loss": hist.train_loss, "val_loss": hist.val_loss},
            })
            if m["overall"]["mse"] < best_mse:
                best_mse = m["overall"]["mse"]
                residuals = {"repeat": plan.repeat, "fold": fold,
                             "event_idx": plan.test_idx.copy(),
                             "y_true": y_true, "y_pred": y_pred}
    report = RunReport(
        model_kind=kind,
        model_config=model_cfg.to_dict(),
        train_config=cfg.to_dict(),
        seed=seed,
        n_events=ds.n_events,
        param_count=Model(kind, model_cfg, ds.n_nodes).param_count(),
        runs=runs,
        aggregate=_aggregate([r["metrics"] for r in runs]),
    )
    return report, residuals
