"""Training losses, evaluation metrics and the metrics CSV row format."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import ContractError, DimensionError, Graph, Tensor
from .network import ConfigurationError, variant_info

PROB_FLOOR = 1e-12
DEFAULT_ALPHA = (0.6, 1.0, 1.0, 1.0)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class LossWeights:
    """alpha = (coarse CE, final CE, HSI MSE, LiDAR MSE)."""

    alpha: tuple[float, float, float, float] = DEFAULT_ALPHA

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        if len(self.alpha) != 4:
            raise ConfigurationError("loss weights need exactly 4 alphas")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha):
            raise ConfigurationError(f"each alpha must lie in [0, 1], got {self.alpha}")


def _check_one_hot(c_true: np.ndarray) -> None:
    ok = np.all((c_true == 0) | (c_true == 1)) and np.all(c_true.sum(axis=1) == 1)
    if not ok:
        bad = np.flatnonzero(~(((c_true == 0) | (c_true == 1)).all(axis=1)
                               & (c_true.sum(axis=1) == 1)))
        raise ContractError(f"labels are not one-hot (first bad row {bad[0]})")


def cross_entropy(g: Graph, c_pred: Tensor, c_true: Tensor) -> Tensor:
    """Mean over rows of -sum_j t_ij log p_ij, probabilities floored at 1e-12."""
    if c_pred.shape != c_true.shape:
        raise DimensionError(f"cross_entropy shape mismatch: {c_pred.shape} vs {c_true.shape}")
    t = c_true.data
    _check_one_hot(t)
    n = t.shape[0]
    p = np.clip(c_pred.data, PROB_FLOOR, 1.0)
    loss = np.array([[-(t * np.log(p)).sum() / n]])
    live = (c_pred.data >= PROB_FLOOR) & (c_pred.data <= 1.0)

    def back(grad):
        return (np.where(live, -grad[0, 0] * t / (n * p), 0.0), None)

    return g.record("cross_entropy", (c_pred, c_true), loss, back)


def mse_loss(g: Graph, d: Tensor, d_hat: Tensor) -> Tensor:
    """Mean of squared differences over every entry."""
    if d.shape != d_hat.shape:
        raise DimensionError(f"mse_loss shape mismatch: {d.shape} vs {d_hat.shape}")
    diff = d_hat.data - d.data
    size = diff.size
    loss = np.array([[(diff * diff).sum() / size]])

    def back(grad):
        gd = 2.0 * grad[0, 0] * diff / size
        return (-gd, gd)

    return g.record("mse", (d, d_hat), loss, back)


LOSS_NAMES = ("loss_pre", "loss_fin", "loss_hsi", "loss_lidar")


def joint_loss(g: Graph, c_pre: Optional[Tensor], c_fin: Tensor, c_true: Tensor,
               d_hsi: Optional[Tensor], d_hat_hsi: Optional[Tensor],
               d_lidar: Optional[Tensor], d_hat_lidar: Optional[Tensor],
               weights: LossWeights, variant: str) -> tuple[Tensor, dict[str, Optional[float]]]:
    """Weighted multitask loss; terms absent from the variant are dropped.

    Returns the scalar loss tensor and the unweighted component values
    (``None`` for dropped terms).
    """
    info = variant_info(variant)
    present = {
        "loss_pre": info.pe,
        "loss_fin": True,
        "loss_hsi": "hsi" in info.modalities,
        "loss_lidar": "lidar" in info.modalities,
    }
    given = {
        "loss_pre": c_pre is not None,
        "loss_fin": c_fin is not None,
        "loss_hsi": d_hsi is not None and d_hat_hsi is not None,
        "loss_lidar": d_lidar is not None and d_hat_lidar is not None,
    }
    for key in LOSS_NAMES:
        if present[key] and not given[key]:
            raise ConfigurationError(f"{variant}: missing inputs for {key}")
        if given[key] and not present[key]:
            raise ConfigurationError(f"{variant}: unexpected inputs for {key}")
    terms, ws = [], []
    comps: dict[str, Optional[float]] = dict.fromkeys(LOSS_NAMES)
    builders = {
        "loss_pre": lambda: cross_entropy(g, c_pre, c_true),
        "loss_fin": lambda: cross_entropy(g, c_fin, c_true),
        "loss_hsi": lambda: mse_loss(g, d_hsi, d_hat_hsi),
        "loss_lidar": lambda: mse_loss(g, d_lidar, d_hat_lidar),
    }
    for key, alpha in zip(LOSS_NAMES, weights.alpha):
        if present[key]:
            term = builders[key]()
            comps[key] = term.item()
            terms.append(term)
            ws.append(alpha)
    return g.weighted_sum(terms, ws), comps


def combine_components(components: dict[str, Optional[float]], weights: LossWeights) -> float:
    """Plain-float counterpart of joint_loss for already-computed components."""
    return sum(a * components[k] for k, a in zip(LOSS_NAMES, weights.alpha)
               if components.get(k) is not None)


def nmse(d: np.ndarray, d_hat: np.ndarray) -> float:
    d = np.asarray(d, dtype=np.float64)
    d_hat = np.asarray(d_hat, dtype=np.float64)
    if d.shape != d_hat.shape:
        raise DimensionError(f"nmse shape mismatch: {d.shape} vs {d_hat.shape}")
    denom = float((d * d).sum())
    if denom == 0.0:
        raise UndefinedMetricError("nmse undefined for an all-zero reference")
    diff = d - d_hat
    return float((diff * diff).sum()) / denom


def accuracy(c_fin: np.ndarray, c_true: np.ndarray) -> float:
    """Fraction of rows whose argmax matches; ties go to the lowest index."""
    c_fin = np.asarray(c_fin)
    c_true = np.asarray(c_true)
    if c_fin.shape != c_true.shape:
        raise DimensionError(f"accuracy shape mismatch: {c_fin.shape} vs {c_true.shape}")
    _check_one_hot(c_true)
    return float(np.mean(np.argmax(c_fin, axis=1) == np.argmax(c_true, axis=1)))


# -- metrics records -------------------------------------------------------

CSV_COLUMNS = ("variant", "snr_db", "K", "epoch", "accuracy", "nmse_hsi", "nmse_lidar",
               "loss_pre", "loss_fin", "loss_hsi", "loss_lidar")


@dataclass
class MetricsRecord:
    variant: str
    snr_db: float
    K: int
    accuracy: float
    nmse_hsi: Optional[float] = None
    nmse_lidar: Optional[float] = None
    loss_components: dict[str, Optional[float]] = field(
        default_factory=lambda: dict.fromkeys(LOSS_NAMES))
    epoch: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy out of [0, 1]: {self.accuracy}")
        for v in (self.nmse_hsi, self.nmse_lidar):
            if v is not None and v < 0:
                raise ValueError(f"negative NMSE: {v}")

    def row(self) -> dict[str, str]:
        def fmt(v) -> str:
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        out = {"variant": self.variant, "snr_db": fmt(float(self.snr_db)), "K": str(self.K),
               "epoch": str(self.epoch), "accuracy": fmt(self.accuracy),
               "nmse_hsi": fmt(self.nmse_hsi), "nmse_lidar": fmt(self.nmse_lidar)}
        for k in LOSS_NAMES:
            out[k] = fmt(self.loss_components.get(k))
        return out

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "MetricsRecord":
        def opt(key):
            v = row.get(key, "")
            return None if v == "" else float(v)

        return cls(variant=row["variant"], snr_db=float(row["snr_db"]), K=int(row["K"]),
                   accuracy=float(row["accuracy"]), nmse_hsi=opt("nmse_hsi"),
                   nmse_lidar=opt("nmse_lidar"),
                   loss_components={k: opt(k) for k in LOSS_NAMES}, epoch=int(row["epoch"]))


def records_to_csv(records: Iterable[MetricsRecord], extra: Sequence[str] = (),
                   extra_values: Optional[Sequence[dict]] = None) -> str:
    """Render records as CSV text; ``extra`` columns are prepended as sweep keys."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(extra) + list(CSV_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for i, rec in enumerate(records):
        row = rec.row()
        if extra:
            row.update({k: str(extra_values[i][k]) for k in extra})
        writer.writerow(row)
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricsRecord]:
    return [MetricsRecord.from_row(r) for r in csv.DictReader(io.StringIO(text))]


@dataclass
class ConstraintResult:
    record: MetricsRecord
    hsi_ok: Optional[bool]
    lidar_ok: Optional[bool]

    @property
    def passed(self) -> bool:
        return self.hsi_ok is not False and self.lidar_ok is not False


def check_constraint(records: Sequence[MetricsRecord], beta: float) -> list[ConstraintResult]:
    """Flag records whose reconstruction NMSE exceeds ``beta`` (inclusive bound)."""
    if not beta > 0 or math.isnan(beta):
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    out = []
    for r in records:
        out.append(ConstraintResult(
            r,
            None if r.nmse_hsi is None else r.nmse_hsi <= beta,
            None if r.nmse_lidar is None else r.nmse_lidar <= beta,
        ))
    return out
