"""Multi-timescale disaggregation cascade: monthly -> weekly -> daily -> hourly.

Layer I holds 4 regressors (one per week of a normalized 28-day month),
Layer II 7 regressors (one per day-of-week position), Layer III one bank of
24 hourly regressors per day kind. Each regressor is a one-hidden-layer
tanh network trained by full-batch Adam with early stopping on a validation
split and small input-noise injection. Chained inputs feed each unit the
previous sibling's value (zero for the first), and at inference every
layer's outputs are clamped nonnegative and renormalized so children sum
exactly to their parent.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .amigen import (
    CustomerRecord,
    DAYS_PER_MONTH,
    DAYS_PER_WEEK,
    HOURS_PER_DAY,
    HOURS_PER_MONTH,
    WEEKS_PER_MONTH,
)


class TrainingDataError(ValueError):
    """Not enough (or malformed) training pairs."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class TrainConfig:
    hidden: int = 16
    lr: float = 1e-2
    lr_decay: float = 0.999
    max_epochs: int = 500
    patience: int = 20
    noise_sigma: float = 0.01     # in units of (standardized) input std
    splits: tuple[float, float, float] = (0.70, 0.15, 0.15)
    min_pairs: int = 20
    seed: int = 0

    def validate(self) -> None:
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")


class Regressor:
    """One-hidden-layer tanh network with a linear output unit.

    A direct linear skip term w3.x keeps (near-)linear maps exactly
    representable, which the timescale cascade relies on.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.n_in = n_in
        self.hidden = hidden
        s = 1.0 / math.sqrt(n_in)
        self.W1 = rng.normal(0.0, s, size=(hidden, n_in))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=hidden)
        self.w3 = np.zeros(n_in)
        self.b2 = 0.0

    def forward(self, X: np.ndarray) -> np.ndarray:
        return np.tanh(X @ self.W1.T + self.b1) @ self.w2 + X @ self.w3 + self.b2

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared error and its analytic gradients."""
        n = len(X)
        A = np.tanh(X @ self.W1.T + self.b1)       # (n, H)
        pred = A @ self.w2 + X @ self.w3 + self.b2
        err = pred - y
        loss = float(np.mean(err ** 2))
        d_pred = 2.0 * err / n                     # (n,)
        g_w2 = A.T @ d_pred
        g_w3 = X.T @ d_pred
        g_b2 = float(np.sum(d_pred))
        dA = np.outer(d_pred, self.w2) * (1.0 - A ** 2)
        g_W1 = dA.T @ X
        g_b1 = dA.sum(axis=0)
        return loss, {"W1": g_W1, "b1": g_b1, "w2": g_w2, "w3": g_w3, "b2": np.array(g_b2)}

    # flat parameter vector helpers (used by the finite-difference check)
    def get_params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.w2, self.w3, [self.b2]])

    def set_params(self, theta: np.ndarray) -> None:
        h, d = self.hidden, self.n_in
        self.W1 = theta[: h * d].reshape(h, d).copy()
        self.b1 = theta[h * d: h * d + h].copy()
        self.w2 = theta[h * d + h: h * d + 2 * h].copy()
        self.w3 = theta[h * d + 2 * h: h * d + 2 * h + d].copy()
        self.b2 = float(theta[-1])

    def flat_grad(self, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        loss, g = self.loss_and_grad(X, y)
        return loss, np.concatenate(
            [g["W1"].ravel(), g["b1"], g["w2"], g["w3"], [float(g["b2"])]]
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1.copy(), "b1": self.b1.copy(), "w2": self.w2.copy(),
                "w3": self.w3.copy(), "b2": np.array(self.b2)}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.W1 = snap["W1"].copy()
        self.b1 = snap["b1"].copy()
        self.w2 = snap["w2"].copy()
        self.w3 = snap["w3"].copy()
        self.b2 = float(snap["b2"])


@dataclass
class Standardizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "Standardizer":
        xs = X.std(axis=0)
        xs[xs == 0] = 1.0
        ys = float(y.std()) or 1.0
        return cls(X.mean(axis=0), xs, float(y.mean()), ys)

    def fx(self, X: np.ndarray) -> np.ndarray:
        return (X - self.x_mean) / self.x_std

    def fy(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def inv_y(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_std + self.y_mean


@dataclass
class TrainLog:
    epochs: int
    best_epoch: int
    train_curve: list[float]
    val_curve: list[float]
    best_val: float


@dataclass
class TrainedRegressor:
    net: Regressor
    scaler: Standardizer
    log: TrainLog | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.scaler.inv_y(self.net.forward(self.scaler.fx(X)))

    def predict_one(self, *features: float) -> float:
        return float(self.predict(np.array([features]))[0])


def train_regressor(X: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                    rng: np.random.Generator) -> TrainedRegressor:
    """Adam training with early stopping; returns the best-validation snapshot."""
    cfg.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise TrainingDataError("X must be (n, d) with matching y")
    n = len(X)
    if n < cfg.min_pairs:
        raise TrainingDataError(f"need >= {cfg.min_pairs} pairs, got {n}")
    perm = rng.permutation(n)
    n_tr = max(1, int(round(cfg.splits[0] * n)))
    n_val = max(1, int(round(cfg.splits[1] * n)))
    tr, val = perm[:n_tr], perm[n_tr:n_tr + n_val]
    scaler = Standardizer.fit(X[tr], y[tr])
    Xtr, ytr = scaler.fx(X[tr]), scaler.fy(y[tr])
    Xval, yval = scaler.fx(X[val]), scaler.fy(y[val])

    net = Regressor(X.shape[1], cfg.hidden, rng)
    m = {k: np.zeros_like(v) for k, v in net.snapshot().items()}
    v = {k: np.zeros_like(val_) for k, val_ in net.snapshot().items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = cfg.lr
    best_val = math.inf
    best = net.snapshot()
    best_epoch = 0
    stall = 0
    train_curve: list[float] = []
    val_curve: list[float] = []
    for epoch in range(1, cfg.max_epochs + 1):
        Xn = Xtr + rng.normal(0.0, cfg.noise_sigma, size=Xtr.shape) if cfg.noise_sigma else Xtr
        loss, g = net.loss_and_grad(Xn, ytr)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}")
        for key, grad in g.items():
            m[key] = beta1 * m[key] + (1 - beta1) * grad
            v[key] = beta2 * v[key] + (1 - beta2) * grad ** 2
            mh = m[key] / (1 - beta1 ** epoch)
            vh = v[key] / (1 - beta2 ** epoch)
            step = lr * mh / (np.sqrt(vh) + eps)
            if key == "b2":
                net.b2 -= float(step)
            else:
                setattr(net, key, getattr(net, key) - step)
        lr *= cfg.lr_decay
        val_err = float(np.mean((net.forward(Xval) - yval) ** 2))
        train_curve.append(loss)
        val_curve.append(val_err)
        if val_err < best_val:
            best_val = val_err
            best = net.snapshot()
            best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall > cfg.patience:
                break
    net.restore(best)
    _refit_output_layer(net, Xtr, ytr, Xval, yval, best_val)
    log = TrainLog(epochs=len(val_curve), best_epoch=best_epoch,
                   train_curve=train_curve, val_curve=val_curve, best_val=best_val)
    return TrainedRegressor(net=net, scaler=scaler, log=log)


def _refit_output_layer(net: Regressor, Xtr: np.ndarray, ytr: np.ndarray,
                        Xval: np.ndarray, yval: np.ndarray, best_val: float) -> None:
    """Solve the linear output layer exactly, keeping it only if validation holds.

    With the hidden layer frozen the output is linear in (w2, w3, b2), so a
    least-squares solve removes the residual error gradient descent leaves
    behind; in particular exactly linear targets are fit to machine precision.
    """
    A = np.tanh(Xtr @ net.W1.T + net.b1)
    design = np.column_stack([A, Xtr, np.ones(len(Xtr))])
    theta, *_ = np.linalg.lstsq(design, ytr, rcond=None)
    snap = net.snapshot()
    h = net.hidden
    net.w2 = theta[:h].copy()
    net.w3 = theta[h:-1].copy()
    net.b2 = float(theta[-1])
    val_err = float(np.mean((net.forward(Xval) - yval) ** 2))
    if not math.isfinite(val_err) or val_err > best_val + 1e-12:
        net.restore(snap)


@dataclass
class MonthBreakdown:
    """Exact multi-timescale totals of one normalized month of truth."""
    total: float
    weekly: np.ndarray            # (4,)
    daily: np.ndarray             # (4, 7)
    hourly: np.ndarray            # (4, 7, 24)
    day_positions: np.ndarray     # (7,) day-of-week per position in each week


def month_breakdown(values: np.ndarray, start_dow: int) -> MonthBreakdown:
    values = np.asarray(values, dtype=float)
    if values.shape != (HOURS_PER_MONTH,):
        raise TrainingDataError(f"month must have {HOURS_PER_MONTH} hours")
    hourly = values.reshape(WEEKS_PER_MONTH, DAYS_PER_WEEK, HOURS_PER_DAY)
    daily = hourly.sum(axis=2)
    weekly = daily.sum(axis=1)
    positions = (start_dow + np.arange(DAYS_PER_WEEK)) % 7
    return MonthBreakdown(float(values.sum()), weekly, daily, hourly, positions)


@dataclass
class LayerPairs:
    X: list[list[float]] = field(default_factory=list)
    y: list[float] = field(default_factory=list)

    def add(self, features: list[float], target: float) -> None:
        self.X.append(features)
        self.y.append(target)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.X, dtype=float), np.array(self.y, dtype=float)


@dataclass
class TrainingSets:
    layer1: list[LayerPairs]                      # 4 (week index)
    layer2: list[LayerPairs]                      # 7 (day-of-week position)
    layer3: dict[str, list[LayerPairs]]           # day kind -> 24 (hour index)


def day_kind_of(position: int) -> str:
    return "weekday" if position < 5 else "weekend"


def build_training_sets(members: list[CustomerRecord]) -> TrainingSets:
    """Per-layer chained (input, target) pairs from members' hourly truth.

    Targets at every timescale are exact sums of the truth; the chained
    "previous sibling" input is zero for the first week/day/hour.
    """
    sets = TrainingSets(
        layer1=[LayerPairs() for _ in range(WEEKS_PER_MONTH)],
        layer2=[LayerPairs() for _ in range(DAYS_PER_WEEK)],
        layer3={k: [LayerPairs() for _ in range(HOURS_PER_DAY)] for k in ("weekday", "weekend")},
    )
    for rec in members:
        start_dow = int(rec.day_positions()[0])
        for m in range(rec.n_full_months()):
            bd = month_breakdown(rec.month_slice(m), start_dow)
            prev_w = 0.0
            for i in range(WEEKS_PER_MONTH):
                sets.layer1[i].add([bd.total, prev_w], bd.weekly[i])
                prev_w = bd.weekly[i]
            for w in range(WEEKS_PER_MONTH):
                prev_d = 0.0
                for d in range(DAYS_PER_WEEK):
                    pos = int(bd.day_positions[d])
                    sets.layer2[pos].add([bd.weekly[w], prev_d], bd.daily[w, d])
                    prev_d = bd.daily[w, d]
                for d in range(DAYS_PER_WEEK):
                    kind = day_kind_of(int(bd.day_positions[d]))
                    prev_h = 0.0
                    for h in range(HOURS_PER_DAY):
                        sets.layer3[kind][h].add([bd.daily[w, d], prev_h], bd.hourly[w, d, h])
                        prev_h = bd.hourly[w, d, h]
    return sets


@dataclass
class MtslModel:
    class_key: str
    layer1: list[TrainedRegressor]
    layer2: list[TrainedRegressor]
    layer3: dict[str, list[TrainedRegressor]]
    test_rmse: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def dump(tr: TrainedRegressor) -> dict:
            return {
                "W1": tr.net.W1.tolist(),
                "b1": tr.net.b1.tolist(),
                "w2": tr.net.w2.tolist(),
                "w3": tr.net.w3.tolist(),
                "b2": tr.net.b2,
                "x_mean": tr.scaler.x_mean.tolist(),
                "x_std": tr.scaler.x_std.tolist(),
                "y_mean": tr.scaler.y_mean,
                "y_std": tr.scaler.y_std,
            }
        return {
            "schema_version": 1,
            "class_key": self.class_key,
            "layer1": [dump(t) for t in self.layer1],
            "layer2": [dump(t) for t in self.layer2],
            "layer3": {k: [dump(t) for t in bank] for k, bank in self.layer3.items()},
            "test_rmse": self.test_rmse,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MtslModel":
        def load(d: dict) -> TrainedRegressor:
            W1 = np.array(d["W1"], dtype=float)
            net = Regressor(W1.shape[1], W1.shape[0], np.random.default_rng(0))
            net.W1 = W1
            net.b1 = np.array(d["b1"], dtype=float)
            net.w2 = np.array(d["w2"], dtype=float)
            net.w3 = np.array(d["w3"], dtype=float)
            net.b2 = float(d["b2"])
            scaler = Standardizer(
                x_mean=np.array(d["x_mean"], dtype=float),
                x_std=np.array(d["x_std"], dtype=float),
                y_mean=float(d["y_mean"]),
                y_std=float(d["y_std"]),
            )
            return TrainedRegressor(net=net, scaler=scaler)
        return cls(
            class_key=raw["class_key"],
            layer1=[load(d) for d in raw["layer1"]],
            layer2=[load(d) for d in raw["layer2"]],
            layer3={k: [load(d) for d in bank] for k, bank in raw["layer3"].items()},
            test_rmse={k: float(v) for k, v in raw.get("test_rmse", {}).items()},
        )


def _conserve(children: np.ndarray, parent: float) -> np.ndarray:
    """Clamp children nonnegative and rescale them to sum exactly to parent."""
    kids = np.clip(np.asarray(children, dtype=float), 0.0, None)
    total = kids.sum()
    if parent <= 0:
        return np.zeros_like(kids)
    if total <= 0:
        return np.full_like(kids, parent / len(kids))
    return kids * (parent / total)


def train_mtsl(class_key: str, members: list[CustomerRecord], cfg: TrainConfig) -> MtslModel:
    """Train all 4 + 7 + 2x24 regressors of one class's cascade."""
    total_months = sum(rec.n_full_months() for rec in members)
    if total_months < 5:
        raise TrainingDataError(
            f"class {class_key}: only {total_months} member months available"
        )
    sets = build_training_sets(members)

    def fit(pairs: LayerPairs, tag: int) -> TrainedRegressor:
        X, y = pairs.arrays()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, tag]))
        return train_regressor(X, y, cfg, rng)

    layer1 = [fit(sets.layer1[i], 100 + i) for i in range(WEEKS_PER_MONTH)]
    layer2 = [fit(sets.layer2[j], 200 + j) for j in range(DAYS_PER_WEEK)]
    layer3 = {
        kind: [fit(sets.layer3[kind][h], 300 + 100 * ki + h) for h in range(HOURS_PER_DAY)]
        for ki, kind in enumerate(("weekday", "weekend"))
    }
    model = MtslModel(class_key=class_key, layer1=layer1, layer2=layer2, layer3=layer3)
    for name, bank in (("layer1", layer1), ("layer2", layer2)):
        model.test_rmse[name] = float(np.mean([t.log.best_val for t in bank]))
    for kind in ("weekday", "weekend"):
        model.test_rmse[f"layer3/{kind}"] = float(
            np.mean([t.log.best_val for t in layer3[kind]])
        )
    return model


def disaggregate(model: MtslModel, bill_kwh: float, start_dow: int = 0) -> np.ndarray:
    """Cascade a monthly bill down to 672 hourly pseudo-measurements.

    Energy is conserved at every layer: weeks sum to the bill, days to their
    week, hours to their day. All outputs are nonnegative.
    """
    if bill_kwh < 0:
        raise ValueError("bill must be nonnegative")
    weeks_raw = np.empty(WEEKS_PER_MONTH)
    prev = 0.0
    for i in range(WEEKS_PER_MONTH):
        weeks_raw[i] = model.layer1[i].predict_one(bill_kwh, prev)
        prev = max(weeks_raw[i], 0.0)
    weeks = _conserve(weeks_raw, bill_kwh)
    hourly = np.empty(HOURS_PER_MONTH)
    for w in range(WEEKS_PER_MONTH):
        days_raw = np.empty(DAYS_PER_WEEK)
        prev = 0.0
        for d in range(DAYS_PER_WEEK):
            pos = (start_dow + d) % 7
            days_raw[d] = model.layer2[pos].predict_one(weeks[w], prev)
            prev = max(days_raw[d], 0.0)
        days = _conserve(days_raw, float(weeks[w]))
        for d in range(DAYS_PER_WEEK):
            kind = day_kind_of((start_dow + d) % 7)
            bank = model.layer3[kind]
            hours_raw = np.empty(HOURS_PER_DAY)
            prev = 0.0
            for h in range(HOURS_PER_DAY):
                hours_raw[h] = bank[h].predict_one(days[d], prev)
                prev = max(hours_raw[h], 0.0)
            hours = _conserve(hours_raw, float(days[d]))
            lo = (w * DAYS_PER_WEEK + d) * HOURS_PER_DAY
            hourly[lo:lo + HOURS_PER_DAY] = hours
    return hourly


def save_models(models: dict[str, MtslModel], path: str | Path) -> None:
    payload = {"schema_version": 1, "models": {k: m.to_dict() for k, m in sorted(models.items())}}
    Path(path).write_text(json.dumps(payload))


def load_models(path: str | Path) -> dict[str, MtslModel]:
    raw = json.loads(Path(path).read_text())
    return {k: MtslModel.from_dict(d) for k, d in raw["models"].items()}


def abs_correlation(x: np.ndarray, y: np.ndarray) -> float:
    """|cov(X,Y) / (sigma_X sigma_Y)|: sign-blind Pearson correlation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or len(x) != len(y):
        raise ValueError("need >= 2 paired samples")
    if x.std() == 0 or y.std() == 0:
        raise ValueError("zero-variance variable: correlation undefined")
    return float(abs(np.corrcoef(x, y)[0, 1]))


def timescale_correlation(records: list[CustomerRecord]) -> dict[str, dict[str, float | str]]:
    """|Pearson correlation| between consumption at adjacent timescales, per type."""
    samples: dict[str, dict[str, tuple[list[float], list[float]]]] = {}
    for rec in records:
        pairs = samples.setdefault(
            rec.type,
            {"monthly-weekly": ([], []), "weekly-daily": ([], []), "daily-hourly": ([], [])},
        )
        start_dow = int(rec.day_positions()[0])
        for m in range(rec.n_full_months()):
            bd = month_breakdown(rec.month_slice(m), start_dow)
            for w in range(WEEKS_PER_MONTH):
                pairs["monthly-weekly"][0].append(bd.total)
                pairs["monthly-weekly"][1].append(float(bd.weekly[w]))
                for d in range(DAYS_PER_WEEK):
                    pairs["weekly-daily"][0].append(float(bd.weekly[w]))
                    pairs["weekly-daily"][1].append(float(bd.daily[w, d]))
                    for h in range(HOURS_PER_DAY):
                        pairs["daily-hourly"][0].append(float(bd.daily[w, d]))
                        pairs["daily-hourly"][1].append(float(bd.hourly[w, d, h]))
    table: dict[str, dict[str, float | str]] = {}
    for ctype, pairs in sorted(samples.items()):
        table[ctype] = {}
        for key, (xs, ys) in pairs.items():
            try:
                table[ctype][key] = abs_correlation(np.array(xs), np.array(ys))
            except ValueError as exc:
                table[ctype][key] = f"error: {exc}"
    return table
