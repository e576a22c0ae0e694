"""Benchmark metrics: identity distance, fidelity, overlap, agreement, transport.

All functions are pure and deterministic; batch aggregation uses ordered
reductions so repeated runs report identical numbers.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .embedder import IdentityEmbedder
from .errors import ShapeMismatchError

DISEASES = ("BCC", "Conj", "Normal", "Ptosis", "SCC", "Strab", "TAO", "Uveitis")
SEVERITIES = ("slight", "mid", "heavy")


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


# ---------------------------------------------------------------------------
# identity distance


def id_dis(x: torch.Tensor, y: torch.Tensor, embedder: IdentityEmbedder) -> float:
    """Euclidean distance between identity embeddings of two images.

    For unit-norm embedders the value lies in [0,2] and satisfies
    d^2 = 2 - 2*cos.
    """
    ex = embedder.embed(x if x.ndim == 4 else x.unsqueeze(0))
    ey = embedder.embed(y if y.ndim == 4 else y.unsqueeze(0))
    return float((ex - ey).norm(dim=-1).mean())


# ---------------------------------------------------------------------------
# reconstruction fidelity


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for images on [0,1].

    Identical inputs yield +inf.
    """
    a, b = _to_numpy(x).astype(np.float64), _to_numpy(y).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr operands differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def perceptual_distance(x, y, metric) -> float | None:
    """Learned perceptual distance via a plugin; None when no plugin is loaded.

    Absent metrics are reported as absent, never fabricated as zeros.
    """
    if metric is None:
        return None
    return float(metric.distance(x, y))


# ---------------------------------------------------------------------------
# segmentation overlap


def _as_bool_masks(a, b) -> tuple[np.ndarray, np.ndarray]:
    ma, mb = _to_numpy(a).astype(bool), _to_numpy(b).astype(bool)
    if ma.shape != mb.shape:
        raise ShapeMismatchError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    return ma, mb


def dice(a, b) -> float:
    """Dice overlap 2|A∩B|/(|A|+|B|); both-empty convention -> 1.0."""
    ma, mb = _as_bool_masks(a, b)
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / denom


def jaccard(a, b) -> float:
    """Jaccard index |A∩B|/|A∪B|; both-empty convention -> 1.0."""
    ma, mb = _as_bool_masks(a, b)
    union = int((ma | mb).sum())
    if union == 0:
        return 1.0
    return int((ma & mb).sum()) / union


# ---------------------------------------------------------------------------
# rater agreement


def cohens_kappa(a: Sequence, b: Sequence) -> float:
    """Chance-corrected agreement between two label series.

    kappa = (p_o - p_e) / (1 - p_e) with chance agreement p_e computed from
    the two marginal distributions. The degenerate p_e == 1 case (both series
    constant on the same label) is defined as 1.0 when p_o == 1 else 0.0.
    """
    if len(a) != len(b):
        raise ShapeMismatchError(f"label series lengths differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ShapeMismatchError("label series must be non-empty")
    n = len(a)
    p_o = sum(1 for x, y in zip(a, b) if x == y) / n
    ca, cb = Counter(a), Counter(b)
    labels = set(ca) | set(cb)
    p_e = sum((ca[l] / n) * (cb[l] / n) for l in labels)
    if p_e >= 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def majority_vote(
    ratings: Sequence[Sequence], class_order: Sequence | None = None
) -> list:
    """Per-index modal label over an odd number >= 3 of equal-length raters.

    Ties (possible when >= 3 distinct labels occur at an index) break by
    fixed precedence: earliest position in ``class_order`` (default: the
    8-disease class order, then lexicographic for unknown labels).
    """
    if len(ratings) < 3 or len(ratings) % 2 == 0:
        raise ShapeMismatchError(
            f"majority vote needs an odd rater count >= 3, got {len(ratings)}"
        )
    length = len(ratings[0])
    if any(len(r) != length for r in ratings):
        raise ShapeMismatchError("rater series lengths differ")
    order = list(class_order) if class_order is not None else list(DISEASES)

    def precedence(label):
        return (order.index(label), "") if label in order else (len(order), str(label))

    out = []
    for i in range(length):
        votes = Counter(r[i] for r in ratings)
        top = max(votes.values())
        winners = [l for l, c in votes.items() if c == top]
        out.append(min(winners, key=precedence))
    return out


# ---------------------------------------------------------------------------
# distribution gaps


def _empirical_pmf(values: Sequence | Mapping) -> dict:
    if isinstance(values, Mapping):
        total = float(sum(values.values()))
        if total <= 0:
            raise ShapeMismatchError("empty categorical distribution")
        return {k: v / total for k, v in values.items()}
    if len(values) == 0:
        raise ShapeMismatchError("empty categorical sample")
    c = Counter(values)
    n = len(values)
    return {k: v / n for k, v in c.items()}


def wasserstein_gap(p, q, kind: str, *, age_range: tuple[float, float] | None = None) -> float:
    """Optimal-transport gap between two empirical attribute distributions.

    kind "disease"/"gender" (categorical): total-variation distance, the
    transport cost under the discrete 0/1 ground metric. Inputs are label
    sequences or pmf mappings.

    kind "age" (scalar): 1-Wasserstein between empirical CDFs on a [0,1]
    axis. Samples are min-max normalized over the pooled values unless they
    already lie within [0,1], in which case they are taken as normalized.
    ``age_range`` overrides the normalization interval explicitly.
    """
    if kind in ("disease", "gender", "categorical"):
        pp, qq = _empirical_pmf(p), _empirical_pmf(q)
        labels = set(pp) | set(qq)
        return 0.5 * sum(abs(pp.get(l, 0.0) - qq.get(l, 0.0)) for l in labels)
    if kind == "age":
        a = np.sort(np.asarray(p, dtype=np.float64))
        b = np.sort(np.asarray(q, dtype=np.float64))
        if a.size == 0 or b.size == 0:
            raise ShapeMismatchError("empty age sample")
        if age_range is not None:
            lo, hi = age_range
        else:
            pooled = np.concatenate([a, b])
            lo, hi = float(pooled.min()), float(pooled.max())
            if lo >= 0.0 and hi <= 1.0:
                lo, hi = 0.0, 1.0
        span = hi - lo
        if span <= 0:
            return 0.0
        a, b = (a - lo) / span, (b - lo) / span
        # W1 of empirical CDFs: integrate |F_a - F_b| over the merged grid.
        grid = np.sort(np.concatenate([a, b]))
        fa = np.searchsorted(a, grid, side="right") / a.size
        fb = np.searchsorted(b, grid, side="right") / b.size
        return float(np.sum(np.abs(fa[:-1] - fb[:-1]) * np.diff(grid)))
    raise ShapeMismatchError(f"unknown attribute kind: {kind!r}")


# ---------------------------------------------------------------------------
# face matching


def matching_rate(
    probes: Sequence[tuple[torch.Tensor, str]],
    gallery: Sequence[tuple[torch.Tensor, str]],
    embedder: IdentityEmbedder,
    threshold: float,
) -> float:
    """Fraction of probes whose nearest gallery face is the true identity
    and lies within the distance threshold."""
    if len(gallery) == 0:
        raise ShapeMismatchError("matching_rate needs a non-empty gallery")
    gal = torch.stack([embedder.embed(img.unsqueeze(0))[0] for img, _ in gallery])
    gal_ids = [gid for _, gid in gallery]
    hits = 0
    for img, true_id in probes:
        e = embedder.embed(img.unsqueeze(0))[0]
        d = (gal - e).norm(dim=-1)
        j = int(d.argmin())
        if gal_ids[j] == true_id and float(d[j]) <= threshold:
            hits += 1
    return hits / len(probes) if probes else 0.0


def calibrate_matching_threshold(
    impostor_probes: Sequence[torch.Tensor],
    gallery: Sequence[tuple[torch.Tensor, str]],
    embedder: IdentityEmbedder,
    false_accept_rate: float = 0.01,
) -> float:
    """Threshold whose nearest-gallery distance accepts the given fraction of
    impostors (probes with no true identity in the gallery)."""
    if len(gallery) == 0:
        raise ShapeMismatchError("calibration needs a non-empty gallery")
    gal = torch.stack([embedder.embed(img.unsqueeze(0))[0] for img, _ in gallery])
    dists = []
    for img in impostor_probes:
        e = embedder.embed(img.unsqueeze(0))[0]
        dists.append(float((gal - e).norm(dim=-1).min()))
    return float(np.quantile(np.asarray(dists), false_accept_rate))


# ---------------------------------------------------------------------------
# classification utility


def utility_accuracy(
    images: Sequence[torch.Tensor],
    labels: Sequence[str],
    classifier: Callable[[Sequence[torch.Tensor]], Sequence[str]] | None,
) -> tuple[float, dict] | None:
    """Overall and per-class Top-1 accuracy under a classifier plugin.

    Returns None when no plugin is loaded (absent metric, never zeros).
    """
    if classifier is None:
        return None
    if len(images) != len(labels):
        raise ShapeMismatchError("images/labels length mismatch")
    preds = list(classifier(images))
    if len(preds) != len(labels):
        raise ShapeMismatchError("classifier returned wrong number of labels")
    per_class: dict[str, list[int]] = {}
    correct = 0
    for pred, true in zip(preds, labels):
        ok = int(pred == true)
        correct += ok
        per_class.setdefault(true, []).append(ok)
    overall = correct / len(labels)
    return overall, {c: sum(v) / len(v) for c, v in sorted(per_class.items())}
