"""Model evaluation, the shared experiment data pipeline and the LSTM hyperparameter sweep."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import rng as _rng
from .errors import ArgumentError, BudgetExceededError
from .lstm import LstmModel, LstmSpec, TrainConfig, predict as lstm_predict, train_lstm
from .metrics import Metrics, compute_metrics, mae, mse, mse_conventional
from .preprocess import (
    DEFAULT_STEPS,
    Dataset,
    WindowedDataset,
    chronological_split,
    denormalize_target,
    make_lag_features,
    make_windows,
)
from .svr import SvrModel, svr_predict_many

log = logging.getLogger(__name__)

__all__ = [
    "mse", "mae", "mse_conventional", "Metrics", "evaluate", "predictions_for",
    "ExperimentData", "prepare_experiment", "SweepRow", "DEFAULT_GRID", "sweep_lstm",
    "run_sweep_row", "sweep_csv", "predictions_csv",
]

DEFAULT_GRID = {
    "layer1": [32],
    "layer2": [16, 32],
    "lr": [0.0001, 0.001],
    "epochs": [50, 100, 150, 200, 250],
}


def predictions_for(model: Union[SvrModel, LstmModel], test: Union[Dataset, WindowedDataset]) -> np.ndarray:
    if isinstance(model, SvrModel):
        if not isinstance(test, Dataset):
            raise ArgumentError("an SVR model is evaluated on a Dataset")
        return svr_predict_many(model, test.features)
    if isinstance(model, LstmModel):
        if not isinstance(test, WindowedDataset):
            raise ArgumentError("an LSTM model is evaluated on a WindowedDataset")
        if test.windows.shape[2] != model.input_width:
            raise ArgumentError("window width does not match the model")
        return lstm_predict(model, test.windows)
    raise ArgumentError(f"unsupported model type {type(model).__name__}")


def evaluate(model, test, norm_params=None) -> Metrics:
    """Eval-mode metrics on the normalized scale.

    With ``norm_params`` the metrics after mapping predictions and targets
    back to percent humidity are reported alongside.
    """
    if len(test) == 0:
        raise ArgumentError("test set is empty")
    pred = predictions_for(model, test)
    m = compute_metrics(pred, test.targets)
    if norm_params is not None:
        p = denormalize_target(pred, norm_params)
        t = denormalize_target(test.targets, norm_params)
        m = Metrics(m.mse, m.mae, m.n, m.mse_conventional, mse(p, t), mae(p, t))
    return m


def predictions_csv(pred, target) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["idx", "prediction", "target"])
    for k, (p, t) in enumerate(zip(np.asarray(pred), np.asarray(target))):
        w.writerow([k, repr(float(p)), repr(float(t))])
    return out.getvalue()


# -- experiment data -------------------------------------------------------


@dataclass(frozen=True)
class ExperimentData:
    """Normalized train/test material for both model families."""

    train: Dataset
    test: Dataset
    svr_train: Dataset
    svr_test: Dataset
    lstm_train: WindowedDataset
    lstm_val: Optional[WindowedDataset]
    lstm_test: WindowedDataset


def prepare_experiment(ds: Dataset, train_fraction: float = 0.8, steps: int = DEFAULT_STEPS,
                       val_fraction: float = 0.1) -> ExperimentData:
    """Split ``ds`` chronologically and derive lag rows and windows for each part.

    The LSTM validation slice is the last ``val_fraction`` of the training
    windows, kept in time order.
    """
    train, test = chronological_split(ds, train_fraction, normalize=True)
    windows = make_windows(train, steps)
    n_val = int(len(windows) * val_fraction)
    if n_val > 0:
        cut = len(windows) - n_val
        lstm_train = WindowedDataset(windows.windows[:cut], windows.targets[:cut], steps)
        lstm_val = WindowedDataset(windows.windows[cut:], windows.targets[cut:], steps)
    else:
        lstm_train, lstm_val = windows, None
    return ExperimentData(
        train=train,
        test=test,
        svr_train=make_lag_features(train),
        svr_test=make_lag_features(test),
        lstm_train=lstm_train,
        lstm_val=lstm_val,
        lstm_test=make_windows(test, steps),
    )


# -- sweep -----------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    layer1_units: int
    layer2_units: int
    lr: float
    epochs: int
    mse: float
    mae: float
    wall_seconds: Optional[float] = None


def grid_points(grid: dict) -> list[tuple[int, int, float, int]]:
    keys = ("layer1", "layer2", "lr", "epochs")
    missing = [k for k in keys if k not in grid]
    if missing:
        raise ArgumentError(f"grid lacks keys {missing}")
    if any(len(grid[k]) == 0 for k in keys):
        raise ArgumentError("every grid axis must be nonempty")
    return [(int(a), int(b), float(c), int(d)) for a, b, c, d in itertools.product(*(grid[k] for k in keys))]


def scaled_epochs(epochs: int, epoch_scale: float) -> int:
    return max(1, int(round(epochs * epoch_scale)))


def run_sweep_row(data: ExperimentData, point: tuple[int, int, float, int], seed: int,
                  batch_size: int = 32, dropout_p: float = 0.2, epoch_scale: float = 1.0,
                  record_time: bool = False) -> SweepRow:
    """Train and evaluate one grid point with an explicit seed."""
    l1, l2, lr, epochs = point
    cfg = TrainConfig(lr=lr, epochs=scaled_epochs(epochs, epoch_scale), batch_size=batch_size, seed=seed)
    t0 = time.perf_counter()
    model, _ = train_lstm(data.lstm_train, data.lstm_val, LstmSpec(l1, l2, dropout_p), cfg)
    m = evaluate(model, data.lstm_test)
    wall = time.perf_counter() - t0 if record_time else None
    return SweepRow(l1, l2, lr, epochs, m.mse, m.mae, wall)


def sweep_lstm(data: ExperimentData, grid: Optional[dict] = None, seed: int = 0, batch_size: int = 32,
               dropout_p: float = 0.2, epoch_scale: float = 1.0, jobs: int = 1,
               record_time: bool = False,
               budget_seconds: Optional[float] = None) -> tuple[list[SweepRow], int]:
    """Train every grid combination; row ``k`` uses ``derive_seed(seed, k)``.

    ``epoch_scale`` multiplies every epoch count (rounded, at least 1) for
    desk-scale runs; the rows keep the unscaled grid value. Returns the rows
    in grid order and the index of the lowest-MSE row (first one on ties).

    With ``budget_seconds`` a row that would start after the budget is spent
    aborts the sweep with :class:`BudgetExceededError` instead of running
    truncated; rerun with a smaller ``epoch_scale``.
    """
    points = grid_points(DEFAULT_GRID if grid is None else grid)
    if budget_seconds is not None and not budget_seconds > 0:
        raise ArgumentError("budget_seconds must be > 0")
    if epoch_scale != 1.0:
        log.info("sweep epochs scaled by %g", epoch_scale)
    t0 = time.perf_counter()
    done = []

    def run(k):
        if budget_seconds is not None and time.perf_counter() - t0 > budget_seconds:
            raise BudgetExceededError(
                f"wall-clock budget of {budget_seconds:g} s spent after {len(done)} of {len(points)} rows; "
                f"lower the epoch scale (now {epoch_scale:g})", completed=len(done))
        row = run_sweep_row(data, points[k], _rng.derive_seed(seed, k), batch_size, dropout_p,
                            epoch_scale, record_time)
        done.append(k)
        return row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run, range(len(points))))
    else:
        rows = [run(k) for k in range(len(points))]
    best = min(range(len(rows)), key=lambda k: (rows[k].mse, k))
    return rows, best


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["layer1", "layer2", "lr", "epochs", "mse", "mae", "wall_seconds"])
    for r in rows:
        w.writerow([r.layer1_units, r.layer2_units, repr(r.lr), r.epochs, repr(r.mse), repr(r.mae),
                    "" if r.wall_seconds is None else repr(r.wall_seconds)])
    return out.getvalue()
