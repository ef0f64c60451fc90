"""Training telemetry and balance-factor analyses.

CSV schemas (column order is stable):

* ``telemetry.csv``: ``step,loss,grad_norm,lr`` (grad_norm is the pre-clip global norm)
* ``alpha.csv``: ``step,layer,head,alpha``
* heatmap: header ``layer,head_0,...,head_{H-1}`` then one row per layer
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, Weights, balance_factors

STEP_COLUMNS = ("step", "loss", "grad_norm", "lr")
ALPHA_COLUMNS = ("step", "layer", "head", "alpha")


@dataclass
class BalanceSnapshot:
    step: int
    alpha: np.ndarray  # [layers, heads]

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 2:
            raise ValueError("alpha must be a [layers, heads] matrix")
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise ValueError("balance factors must lie in [0, 1]")


def snapshot_from_weights(weights: Weights, cfg: ModelConfig, step: int) -> BalanceSnapshot:
    return BalanceSnapshot(step, balance_factors(weights, cfg))


def mean_alpha(snapshot: BalanceSnapshot) -> float:
    return float(snapshot.alpha.mean())


def alpha_histogram(snapshot: BalanceSnapshot, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Counts over ``bins`` equal-width bins on [0, 1] (last bin closed)."""
    counts, edges = np.histogram(snapshot.alpha.ravel(), bins=bins, range=(0.0, 1.0))
    return counts, edges


def layer_memory_preference(snapshot: BalanceSnapshot, threshold: float = 0.5) -> np.ndarray:
    """Per layer, the fraction of heads with alpha strictly above ``threshold``."""
    return (snapshot.alpha > threshold).mean(axis=1)


def alpha_heatmap_export(snapshot: BalanceSnapshot, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    heads = snapshot.alpha.shape[1]
    w.writerow(["layer"] + [f"head_{h}" for h in range(heads)])
    for layer, row in enumerate(snapshot.alpha):
        w.writerow([layer] + [repr(float(a)) for a in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_heatmap(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)


class TelemetryWriter:
    """Append-only CSV sink for one run directory."""

    def __init__(self, run_dir, flush_every: int = 1):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.flush_every = max(1, int(flush_every))
        self._steps = self._open("telemetry.csv", STEP_COLUMNS)
        self._alpha = self._open("alpha.csv", ALPHA_COLUMNS)
        self._pending = 0

    def _open(self, name: str, columns):
        path = self.run_dir / name
        fresh = not path.exists() or path.stat().st_size == 0
        fh = open(path, "a", newline="")
        if fresh:
            fh.write(",".join(columns) + "\n")
        return fh

    def log_step(self, step: int, loss: float, grad_norm: float, lr: float) -> None:
        self._steps.write(f"{step},{loss!r},{grad_norm!r},{lr!r}\n")
        self._pending += 1
        if self._pending >= self.flush_every:
            self.flush()

    def log_snapshot(self, snapshot: BalanceSnapshot) -> None:
        for (layer, head), a in np.ndenumerate(snapshot.alpha):
            self._alpha.write(f"{snapshot.step},{layer},{head},{float(a)!r}\n")
        self._alpha.flush()

    def flush(self) -> None:
        self._steps.flush()
        self._pending = 0

    def close(self) -> None:
        self._steps.close()
        self._alpha.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_telemetry(path) -> list[dict]:
    with open(path) as fh:
        return [
            {"step": int(r["step"]), "loss": float(r["loss"]), "grad_norm": float(r["grad_norm"]), "lr": float(r["lr"])}
            for r in csv.DictReader(fh)
        ]


def read_alpha_log(path) -> list[BalanceSnapshot]:
    by_step: dict[int, dict[tuple[int, int], float]] = {}
    with open(path) as fh:
        for r in csv.DictReader(fh):
            by_step.setdefault(int(r["step"]), {})[(int(r["layer"]), int(r["head"]))] = float(r["alpha"])
    snaps = []
    for step in sorted(by_step):
        cells = by_step[step]
        layers = max(k[0] for k in cells) + 1
        heads = max(k[1] for k in cells) + 1
        alpha = np.zeros((layers, heads))
        for (l, h), a in cells.items():
            alpha[l, h] = a
        snaps.append(BalanceSnapshot(step, alpha))
    return snaps


def write_balance_report(snapshot: BalanceSnapshot, out_dir, bins: int = 10, threshold: float = 0.5) -> dict:
    """Data files behind the mean/distribution/layer-preference/heatmap views."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts, edges = alpha_histogram(snapshot, bins)
    with open(out / "alpha_histogram.csv", "w") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{lo!r},{hi!r},{int(c)}\n")
    pref = layer_memory_preference(snapshot, threshold)
    with open(out / "layer_preference.csv", "w") as fh:
        fh.write("layer,memory_preference_rate\n")
        for layer, rate in enumerate(pref):
            fh.write(f"{layer},{float(rate)!r}\n")
    alpha_heatmap_export(snapshot, out / "alpha_heatmap.csv")
    return {"step": snapshot.step, "mean_alpha": mean_alpha(snapshot), "layer_preference": pref.tolist()}


def write_mean_alpha_series(snapshots, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,mean_alpha\n")
        for s in snapshots:
            fh.write(f"{s.step},{mean_alpha(s)!r}\n")


def truncate_logs(run_dir, step: int) -> None:
    """Drop records logged after ``step`` so a resumed run does not duplicate rows."""
    for name in ("telemetry.csv", "alpha.csv"):
        path = Path(run_dir) / name
        if not path.exists():
            continue
        lines = path.read_text().splitlines(keepends=True)
        kept = lines[:1] + [ln for ln in lines[1:] if ln.strip() and int(ln.split(",", 1)[0]) <= step]
        path.write_text("".join(kept))
