"""Categorical beliefs over a finite set of latent hypotheses and the Bayes filter."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SUM_TOL = 1e-9
# probabilities below this are flushed to zero before normalisation
FLUSH_FLOOR = 1e-300


class AllZeroPosterior(ValueError):
    """Raised when an observation has zero probability under every hypothesis in the support."""


class SupportMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CategoricalBelief:
    probs: np.ndarray
    support_labels: tuple = ()

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("belief must be a non-empty vector")
        if np.any(p < 0) or np.any(p > 1 + SUM_TOL) or abs(p.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"not a probability vector: {p}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        labels = tuple(self.support_labels) if self.support_labels else tuple(range(p.size))
        if len(labels) != p.size:
            raise ValueError("support_labels length differs from probs")
        object.__setattr__(self, "support_labels", labels)

    @property
    def k(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, k: int, labels: Sequence = ()) -> "CategoricalBelief":
        return cls(np.full(k, 1.0 / k), tuple(labels))

    @classmethod
    def point_mass(cls, k: int, index: int, labels: Sequence = ()) -> "CategoricalBelief":
        p = np.zeros(k)
        p[index] = 1.0
        return cls(p, tuple(labels))


@dataclass(frozen=True)
class BeliefState:
    env_state: np.ndarray
    belief: CategoricalBelief


def _probs(b) -> np.ndarray:
    return b.probs if isinstance(b, CategoricalBelief) else np.asarray(b, dtype=float)


def normalize_rows(weights: np.ndarray) -> np.ndarray:
    """Normalise nonnegative weights along the last axis (batched Bayes-rule denominator)."""
    w = np.where(weights < FLUSH_FLOOR, 0.0, weights)
    eta = w.sum(axis=-1, keepdims=True)
    if np.any(eta <= 0.0):
        raise AllZeroPosterior("observation impossible under every hypothesis with prior mass")
    return w / eta


def update_probs(prior: np.ndarray, likelihoods: np.ndarray) -> np.ndarray:
    """Batched posterior: rows of ``prior`` times rows of ``likelihoods``, renormalised."""
    prior = np.asarray(prior, dtype=float)
    likelihoods = np.asarray(likelihoods, dtype=float)
    if prior.shape != likelihoods.shape:
        raise SupportMismatch(f"prior shape {prior.shape} vs likelihood shape {likelihoods.shape}")
    if np.any(likelihoods < 0):
        raise ValueError("likelihoods must be nonnegative")
    return normalize_rows(prior * likelihoods)


def update_probs_log(prior: np.ndarray, log_likelihoods: np.ndarray) -> np.ndarray:
    """Same as :func:`update_probs` but takes log-likelihoods (stable for peaked densities)."""
    prior = np.asarray(prior, dtype=float)
    ll = np.asarray(log_likelihoods, dtype=float)
    if prior.shape != ll.shape:
        raise SupportMismatch(f"prior shape {prior.shape} vs likelihood shape {ll.shape}")
    masked = np.where(prior > 0, ll, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    if np.any(~np.isfinite(top)):
        raise AllZeroPosterior("observation impossible under every hypothesis with prior mass")
    return normalize_rows(prior * np.exp(masked - top))


def categorical_update(prior: CategoricalBelief, likelihoods) -> CategoricalBelief:
    post = update_probs(prior.probs, np.asarray(likelihoods, dtype=float))
    return CategoricalBelief(post, prior.support_labels)


def entropy(b) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0. Accepts a belief or a (batch of) probability rows."""
    p = _probs(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def l1_distance(b, b2):
    p, q = _probs(b), _probs(b2)
    if p.shape != q.shape:
        raise SupportMismatch(f"support sizes differ: {p.shape} vs {q.shape}")
    out = np.abs(p - q).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def map_index(b):
    """Most probable hypothesis; ties go to the lowest index (np.argmax semantics)."""
    out = np.argmax(_probs(b), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


class BayesFilter:
    """Exact batched filter over an environment's finite hypothesis set.

    The filter state is the (n, k) array of posterior probabilities.
    """

    def __init__(self, env, prior=None):
        self.env = env
        self.prior = np.asarray(env.prior_probs() if prior is None else _probs(prior), dtype=float)

    def init(self, n: int) -> np.ndarray:
        return np.tile(self.prior, (n, 1))

    def update(self, fstate, states, actions, next_states, observations) -> np.ndarray:
        ll = self.env.log_likelihood(states, actions, next_states, observations)
        return update_probs_log(fstate, ll)

    def probs(self, fstate) -> np.ndarray:
        return fstate
