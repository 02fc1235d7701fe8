"""Anomaly maps and evaluation metrics.

An anomaly map is the per-token cosine distance between the reference
branch and the decoder output, averaged over layer groups, reshaped to
the patch grid, bilinearly upsampled to pixel resolution and Gaussian
smoothed. The image-level score condenses the pixel map (default: mean
of the top 1% of pixels).

Metrics follow the protocol: AUC is the rank statistic (ties count 0.5)
and F1/ACC/SEN/SPE are reported at the threshold that maximizes F1 over
all distinct candidate scores, predicting anomalous for score >= t, with
ties broken toward the lowest threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, MetricError, ShapeMismatchError
from .recon import ModelState, forward_step


@dataclass
class AnomalyResult:
    token_map: np.ndarray  # (n_h, n_w) cosine distances in [0, 2]
    pixel_map: np.ndarray  # (H, W) upsampled + smoothed
    score: float
    id: str = ""


@dataclass
class MetricReport:
    auc: float
    f1: float
    acc: float
    sen: float
    spe: float
    threshold: float

    CSV_HEADER = "auc,f1,acc,sen,spe,threshold"

    def csv_row(self) -> str:
        return (
            f"{self.auc:.6f},{self.f1:.6f},{self.acc:.6f},"
            f"{self.sen:.6f},{self.spe:.6f},{self.threshold:.6g}"
        )


# ---------------------------------------------------------------------------
# maps


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return np.where(n < 1e-12, 0.0, x / np.where(n < 1e-12, 1.0, n))


def anomaly_map(references: list[np.ndarray], decoded: list[np.ndarray], grid: tuple[int, int]) -> np.ndarray:
    """Per-token distances averaged over groups, shaped (B, n_h, n_w)."""
    if len(references) != len(decoded) or not references:
        raise ConfigError(f"{len(references)} reference vs {len(decoded)} decoded groups")
    nh, nw = grid
    acc = None
    for ref, dec in zip(references, decoded):
        if ref.shape != dec.shape:
            raise ShapeMismatchError(f"group shapes differ: {ref.shape} vs {dec.shape}")
        d = 1.0 - np.sum(_unit_rows(ref) * _unit_rows(dec), axis=-1)  # (B, N)
        acc = d if acc is None else acc + d
    acc /= len(references)
    if acc.shape[-1] != nh * nw:
        raise ConfigError(f"grid {grid} does not match {acc.shape[-1]} tokens")
    return acc.reshape(acc.shape[0], nh, nw)


def upsample_bilinear(grid_map: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-aligned bilinear interpolation of a 2-D map."""
    nh, nw = grid_map.shape
    ys = (np.arange(height) + 0.5) * nh / height - 0.5
    xs = (np.arange(width) + 0.5) * nw / width - 0.5
    ys = np.clip(ys, 0.0, nh - 1.0)
    xs = np.clip(xs, 0.0, nw - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, nh - 1)
    x1 = np.minimum(x0 + 1, nw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid_map[y0][:, x0] * (1 - wx) + grid_map[y0][:, x1] * wx
    bot = grid_map[y1][:, x0] * (1 - wx) + grid_map[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3*sigma), symmetric padding.

    Half-sample symmetric reflection keeps the map total (and hence the
    mean) unchanged up to rounding.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    radius = math.ceil(3.0 * sigma)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()

    def conv1d(a: np.ndarray) -> np.ndarray:
        padded = np.pad(a, ((0, 0), (radius, radius)), mode="symmetric")
        out = np.zeros_like(a, dtype=np.float64)
        for k, w in enumerate(kernel):
            out += w * padded[:, k : k + a.shape[1]]
        return out

    out = conv1d(img.astype(np.float64))
    return conv1d(out.T).T


def upsample_smooth(token_map: np.ndarray, height: int, width: int, sigma: float = 4.0) -> np.ndarray:
    return gaussian_blur(upsample_bilinear(token_map, height, width), sigma)


def image_score(pixel_map: np.ndarray, method: str = "topk", top_frac: float = 0.01) -> float:
    """Scalar image score from a pixel map.

    * topk: mean of the top `top_frac` fraction of pixels (>= 1 pixel);
      robust to single-pixel noise yet sensitive to small regions.
    * max: maximum pixel.
    * mean: map mean.
    """
    flat = np.asarray(pixel_map, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ConfigError("empty pixel map")
    if method == "max":
        return float(flat.max())
    if method == "mean":
        return float(flat.mean())
    if method != "topk":
        raise ConfigError(f"unknown image score method {method!r}")
    k = max(1, int(flat.size * top_frac))
    top = np.partition(flat, flat.size - k)[flat.size - k :]
    return float(top.mean())


# ---------------------------------------------------------------------------
# metrics


def _check_two_classes(labels: np.ndarray) -> None:
    if labels.all() or (~labels).all():
        raise MetricError("both classes are required to compute metrics")


def auc(scores, labels) -> float:
    """Rank-based AUC; tied score pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeMismatchError(f"scores {s.shape} vs labels {y.shape}")
    _check_two_classes(y)
    npos = int(y.sum())
    nneg = y.size - npos
    ranks = rankdata(s)  # average ranks on ties
    return float((ranks[y].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def thresholded_metrics(scores, labels) -> MetricReport:
    """Scan all distinct scores as thresholds; report at the F1 maximizer."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeMismatchError(f"scores {s.shape} vs labels {y.shape}")
    _check_two_classes(y)
    npos = int(y.sum())
    nneg = y.size - npos

    best = None
    for t in np.unique(s):  # ascending; first maximum keeps the lowest t
        pred = s >= t
        tp = int((pred & y).sum())
        fp = int((pred & ~y).sum())
        fn = npos - tp
        tn = nneg - fp
        f1 = 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        if best is None or f1 > best[0]:
            best = (f1, float(t), tp, fp, fn, tn)
    f1, t, tp, fp, fn, tn = best
    return MetricReport(
        auc=auc(s, y),
        f1=f1,
        acc=(tp + tn) / (npos + nneg),
        sen=tp / npos,
        spe=tn / nneg,
        threshold=t,
    )


# ---------------------------------------------------------------------------
# model-level scoring


def score_pixels(state: ModelState, pixels: np.ndarray, sigma: float = 4.0,
                 score_method: str = "topk") -> list[AnomalyResult]:
    """Score a (B, H, W, ch) batch against a trained model."""
    out = forward_step(pixels, state, record=False)
    nh, nw = state.config.encoder.grid
    height = width = state.config.encoder.image_size
    results = []
    for b in range(pixels.shape[0]):
        tok = out.token_dist[b].reshape(nh, nw)
        pix = upsample_smooth(tok, height, width, sigma)
        results.append(AnomalyResult(token_map=tok, pixel_map=pix, score=image_score(pix, score_method)))
    return results


def score_samples(state: ModelState, samples, batch_size: int = 32,
                  sigma: float = 4.0, score_method: str = "topk") -> list[AnomalyResult]:
    results: list[AnomalyResult] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        pixels = np.stack([s.pixels for s in chunk]).astype(np.float64)
        batch_results = score_pixels(state, pixels, sigma=sigma, score_method=score_method)
        for s, r in zip(chunk, batch_results):
            r.id = s.id
        results.extend(batch_results)
    return results


def evaluate(state: ModelState, samples, batch_size: int = 32, sigma: float = 4.0,
             score_method: str = "topk") -> tuple[MetricReport, list[AnomalyResult]]:
    """Score a labeled test split and compute the full metric report."""
    results = score_samples(state, samples, batch_size, sigma, score_method)
    scores = np.array([r.score for r in results])
    labels = np.array([s.label == "anomalous" for s in samples])
    return thresholded_metrics(scores, labels), results
