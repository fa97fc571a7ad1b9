"""scikit-learn style wrappers around calibration and Double Sparsity decode.

Both estimators work on a single attention head. ``Q`` and ``K`` passed to
``fit`` are aligned ``[T, d_h]`` query and key rows of a causal sequence:
query ``t`` is paired with keys ``0..t``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attention import SparsityConfig, ds_decode, full_attention
from .calibration import CalibrationStats, accumulate_causal, select_channels
from .channels import normalize_mode
from .label_cache import build_label_cache
from .tensor import make_rng


def _check_pair(Q, K, mode):
    Q = check_array(Q, dtype=np.float32)
    if K is None:
        if mode != "q_outlier":
            raise ValueError(f"mode {mode!r} needs key rows")
        return Q, np.ones_like(Q)
    K = check_array(K, dtype=np.float32)
    if Q.shape != K.shape:
        raise ValueError(f"Q and K must have the same shape, got {Q.shape} and {K.shape}")
    return Q, K


class OutlierChannelCalibrator(TransformerMixin, BaseEstimator):
    """Learn a head's outlier channels offline; ``transform`` projects keys onto them.

    Parameters
    ----------
    alpha : float
        Fraction of head channels to keep, ``r = max(1, round(alpha * d_h))``.
    mode : {"qk", "q", "k", "random"}
        Channel importance statistic.
    random_state : int
        Seed for ``mode="random"``.
    """

    def __init__(self, alpha=1 / 16, mode="qk", random_state=0):
        self.alpha = alpha
        self.mode = mode
        self.random_state = random_state

    def fit(self, Q, K=None):
        self._reset()
        return self.partial_fit(Q, K)

    def partial_fit(self, Q, K=None):
        mode = normalize_mode(self.mode)
        Q, K = _check_pair(Q, K, mode)
        if not hasattr(self, "stats_"):
            self.stats_ = CalibrationStats(Q.shape[1])
            self.n_features_in_ = Q.shape[1]
        elif Q.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} channels, got {Q.shape[1]}")
        if mode == "random":
            self.stats_.n_samples += Q.shape[0]
        else:
            accumulate_causal(self.stats_, Q, K, mode)
        r = SparsityConfig(self.alpha, 1.0).r(self.n_features_in_)
        rng = make_rng(self.random_state) if mode == "random" else None
        self.channels_ = select_channels(self.stats_, r, mode, rng=rng)
        self.importance_ = self.stats_.importance / max(self.stats_.n_samples, 1)
        return self

    def _reset(self):
        for attr in ("stats_", "channels_", "importance_", "n_features_in_"):
            if hasattr(self, attr):
                delattr(self, attr)

    def transform(self, X):
        check_is_fitted(self, "channels_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} channels, got {X.shape[1]}")
        return X[:, self.channels_.indices]

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "channels_")
        return np.array([f"channel{i}" for i in self.channels_.indices], dtype=object)


class DoubleSparsityAttention(BaseEstimator):
    """Calibrate on ``fit``; ``predict`` runs Double Sparsity decode per query row.

    ``predict(Q, K, V)`` treats every row of ``Q`` as one decode step over the
    full ``K``/``V`` and returns ``[n, d_h]`` outputs.
    """

    def __init__(self, alpha=1 / 16, beta=1 / 16, mode="qk", quantize=True, random_state=0):
        self.alpha = alpha
        self.beta = beta
        self.mode = mode
        self.quantize = quantize
        self.random_state = random_state

    def fit(self, Q, K=None):
        self.calibrator_ = OutlierChannelCalibrator(self.alpha, self.mode, self.random_state).fit(Q, K)
        self.channels_ = self.calibrator_.channels_
        self.n_features_in_ = self.calibrator_.n_features_in_
        return self

    @property
    def sparsity_(self) -> SparsityConfig:
        return SparsityConfig(self.alpha, self.beta)

    def _inputs(self, Q, K, V):
        check_is_fitted(self, "channels_")
        Q = check_array(np.atleast_2d(Q), dtype=np.float32)
        K = check_array(K, dtype=np.float32)
        V = check_array(V, dtype=np.float32)
        if Q.shape[1] != self.n_features_in_ or K.shape != V.shape or K.shape[1] != self.n_features_in_:
            raise ValueError("Q, K, V must all have n_features_in_ channels and K, V one shape")
        return Q, K, V

    def predict(self, Q, K, V, ledger=None):
        Q, K, V = self._inputs(Q, K, V)
        label = build_label_cache(K, self.channels_, quantized=self.quantize)
        cfg = self.sparsity_
        return np.stack([ds_decode(q, K, V, self.channels_, label, cfg, ledger)[0] for q in Q])

    def select(self, Q, K):
        """Selected token indices per query row."""
        Q, K, _ = self._inputs(Q, K, K)
        label = build_label_cache(K, self.channels_, quantized=self.quantize)
        cfg = self.sparsity_
        return [ds_decode(q, K, K, self.channels_, label, cfg)[1].indices for q in Q]

    def score(self, Q, K, V):
        """Negative mean L2 distance to exact attention (higher is better)."""
        Q, K, V = self._inputs(Q, K, V)
        y = self.predict(Q, K, V)
        ref = np.stack([full_attention(q, K, V) for q in Q])
        return -float(np.mean(np.linalg.norm(y - ref, axis=1)))
