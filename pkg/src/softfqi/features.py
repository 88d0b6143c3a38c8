"""Linear feature maps over state-action pairs."""

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidSpecError, SingularDesignError
from .geometry import as_weights
from .rng import stream

MAX_REDRAWS = 10


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature tensor ``features[s, a, j]``; ``ref`` is a content hash."""

    features: np.ndarray
    name: str = "features"

    def __post_init__(self):
        f = np.array(self.features, dtype=float)
        if f.ndim != 3 or f.shape[2] < 1:
            raise DimensionError(f"features must have shape (S, A, p>=1), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise InvalidSpecError("features must be finite")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "rank", int(np.linalg.matrix_rank(self.matrix)))
        digest = hashlib.sha1(f.tobytes()).hexdigest()[:12]
        object.__setattr__(self, "ref", f"{self.name}:{digest}")

    @property
    def p(self):
        return self.features.shape[2]

    @property
    def table_shape(self):
        return self.features.shape[:2]

    @property
    def matrix(self):
        return self.features.reshape(-1, self.features.shape[2])

    def evaluate(self, q):
        return evaluate_linear(q, self)

    def evaluate_theta(self, theta):
        return self.features @ np.asarray(theta, dtype=float)


@dataclass(frozen=True, eq=False)
class LinearQ:
    theta: np.ndarray
    feature_ref: str

    def __post_init__(self):
        t = np.array(self.theta, dtype=float).ravel()
        t.setflags(write=False)
        object.__setattr__(self, "theta", t)

    @property
    def p(self):
        return self.theta.shape[0]


def evaluate_linear(q: LinearQ, features: FeatureMap):
    if q.p != features.p:
        raise DimensionError(f"theta has length {q.p}, features have p={features.p}")
    return features.features @ q.theta


def _orthonormalize(cols, w):
    """Modified Gram-Schmidt in the ``w``-weighted inner product, two passes.

    Returns ``None`` if a column collapses (relative norm below 1e-10).
    """
    out = []
    for v in cols.T:
        v = v.copy()
        ref = np.sqrt(np.sum(w * v * v))
        for _ in range(2):
            for u in out:
                v -= np.sum(w * u * v) * u
        nv = np.sqrt(np.sum(w * v * v))
        if ref == 0 or nv <= 1e-10 * ref:
            return None
        out.append(v / nv)
    return np.stack(out, axis=1)


def build_realizable_features(q_star, p, seed, mu_star, name="realizable"):
    """Features whose span contains ``q_star``: ``q_star`` plus ``p - 1`` Gaussian columns.

    All columns are orthonormalized in L2(``mu_star``). A draw whose random
    columns are linearly dependent on the support of ``mu_star`` is redrawn
    up to ten times.
    """
    if p < 2:
        raise InvalidSpecError("realizable features need p >= 2")
    q_star = np.asarray(q_star, dtype=float)
    S, A = q_star.shape
    w = as_weights(mu_star).ravel()
    if w.shape[0] != S * A:
        raise DimensionError("measure does not match q_star")
    for attempt in range(MAX_REDRAWS):
        rng = stream("features", seed, attempt)
        cols = np.column_stack([q_star.ravel(), rng.standard_normal((S * A, p - 1))])
        basis = _orthonormalize(cols, w)
        if basis is not None:
            return FeatureMap(basis.reshape(S, A, p), name=name)
    raise SingularDesignError(
        f"could not draw {p} independent features after {MAX_REDRAWS} attempts "
        f"(stationary support has {int(np.count_nonzero(w > 0))} pairs)")


def one_hot_features(mdp):
    S, A = mdp.shape
    return FeatureMap(np.eye(S * A).reshape(S, A, S * A), name="one_hot")
