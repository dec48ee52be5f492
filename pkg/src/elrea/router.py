"""Instruction-to-expert routing from gradient-direction similarity.

A test instruction's unit feature direction is compared to every cluster
centroid by cosine; the cosines are standardized (population sigma) and
softmaxed into expert weights. The base adapter's weight is one minus the
best cosine, so instructions far from every cluster lean on the base model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

SIGMA_FLOOR = 1e-12


@dataclass
class RoutingWeights:
    cosines: np.ndarray  # (C,)
    standardized: np.ndarray  # (C,)
    weights: np.ndarray  # (C,), sums to 1
    base_weight: float
    fallback: bool = False  # no usable feature; uniform weights substituted


def standardized_softmax(values):
    """Softmax over z-scores with population sigma; flat input goes uniform."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a vector of similarities")
    n = v.shape[0]
    if n == 0:
        return np.empty(0), np.empty(0)
    sigma = float(np.std(v))
    if sigma < SIGMA_FLOOR:
        return np.zeros(n), np.full(n, 1.0 / n)
    z = (v - v.mean()) / sigma
    e = np.exp(z - z.max())
    return z, e / e.sum()


def route(delta, cluster_centroids):
    """Weights for one unit feature direction against unit centroids."""
    c = np.asarray(cluster_centroids, dtype=np.float64)
    if c.shape[0] == 0:
        return RoutingWeights(
            cosines=np.empty(0), standardized=np.empty(0),
            weights=np.empty(0), base_weight=1.0,
        )
    cos = c @ np.asarray(delta, dtype=np.float64)
    z, w = standardized_softmax(cos)
    return RoutingWeights(
        cosines=cos, standardized=z, weights=w,
        base_weight=float(1.0 - cos.max()),
    )


def fallback_route(n_clusters):
    """Uniform expert weights plus full base weight, for instances whose
    feature could not be computed."""
    n = max(0, int(n_clusters))
    return RoutingWeights(
        cosines=np.zeros(n), standardized=np.zeros(n),
        weights=np.full(n, 1.0 / n) if n else np.empty(0),
        base_weight=1.0, fallback=True,
    )


def route_batch(features, cluster_centroids):
    """Routing weights for every instance in a feature matrix.

    Instances recorded as failed in the matrix get the fallback weights.
    Returns a dict keyed by instance id.
    """
    out = {}
    n_clusters = np.asarray(cluster_centroids).shape[0]
    for k, i in enumerate(features.ids):
        out[i] = route(features.matrix[k], cluster_centroids)
    for i in features.failed:
        out[i] = fallback_route(n_clusters)
    return out


def mean_weights(routes):
    """Mean expert weights and mean base weight across routed instances."""
    if not routes:
        raise ValueError("no routed instances")
    ws = np.stack([r.weights for r in routes.values()])
    base = np.array([r.base_weight for r in routes.values()])
    return ws.mean(axis=0), float(base.mean())


def write_routes_csv(path, routes):
    ids = sorted(routes)
    n = routes[ids[0]].weights.shape[0] if ids else 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["id", "base_weight"]
            + [f"w_{c}" for c in range(1, n + 1)]
            + ["max_cos", "fallback"]
        )
        for i in ids:
            r = routes[i]
            max_cos = float(r.cosines.max()) if r.cosines.size else 0.0
            w.writerow(
                [i, repr(r.base_weight)]
                + [repr(float(x)) for x in r.weights]
                + [repr(max_cos), int(r.fallback)]
            )
