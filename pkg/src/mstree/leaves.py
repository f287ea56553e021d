"""Response models fitted inside each market segment.

Every family exposes the same small surface: ``fit`` (classmethod, returns a
:class:`FitResult`), ``loss`` (summed training loss, no ridge term),
``predict`` and a dict round trip used by the tree file format.

Choice families predict an ``(n, H_max + 1)`` matrix whose column 0 is the
no-purchase probability. Auction families predict the win probability of each
row's bid.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .data import AuctionPayload, ChoicePayload


class FamilyMismatch(TypeError):
    """Model family does not match the payload kind."""


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings shared by the MNL and logistic fits.

    ``max_iterations`` counts Newton / quasi-Newton steps, or epochs for
    ``sgd``. ``tolerance`` bounds the infinity norm of the gradient of the
    summed (not averaged) penalized loss.
    """

    optimizer: str = "newton"
    max_iterations: int = 100
    tolerance: float = 1e-6
    l2_ridge: float = 1e-6
    warm_start: np.ndarray | None = None
    sgd_batch_size: int = 256
    sgd_step_scale: float = 0.5

    def __post_init__(self):
        if self.optimizer not in ("newton", "lbfgs", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.l2_ridge < 0:
            raise ValueError("l2_ridge must be nonnegative")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")

    def with_warm_start(self, params) -> FitConfig:
        return replace(self, warm_start=params)


@dataclass
class FitResult:
    model: object
    converged: bool = True
    iterations: int = 0


# ---------------------------------------------------------------------------
# MNL likelihood on a generic design tensor.
#
# Z is (n, H, d): the design vector of every offered option. Utilities are
# Z @ beta; the no-purchase utility is fixed at 0. Rows may carry weights,
# which is how the logistic fit reuses this code on per-bid-level counts.


def _log_partition(u: np.ndarray, maskf: np.ndarray | None = None):
    """log(1 + sum_h exp(u_h)) per row and the option probabilities.

    Padded slots must carry u = 0 and be zeroed through ``maskf``. Rows are
    shifted by their largest utility only when an exponent could overflow.
    """
    if u.size and u.max() > 700.0:
        top = np.maximum(u.max(axis=1), 0.0)
        e = np.exp(u - top[:, None])
        if maskf is not None:
            e *= maskf
        total = np.exp(-top) + e.sum(axis=1)
        return top + np.log(total), e / total[:, None]
    e = np.exp(u)
    if maskf is not None:
        e *= maskf
    total = 1.0 + e.sum(axis=1)
    return np.log(total), e / total[:, None]


class MNLProblem:
    """Penalized weighted MNL negative log-likelihood for a fixed design.

    Z is (n, H, d): the design vector of every offered option, zero on padded
    slots. The no-purchase utility is fixed at 0. Everything that does not
    depend on beta is computed once here.
    """

    def __init__(self, Z, mask, y, w=None, ridge: float = 0.0):
        Z = np.asarray(Z, dtype=float) * np.asarray(mask)[:, :, None]
        n, h, d = Z.shape
        self.shape = (n, h, d)
        self.Z = Z
        self.Zc = np.ascontiguousarray(Z.reshape(-1, d).T)
        self.maskf = np.asarray(mask, dtype=float)
        self.w = None if w is None else np.asarray(w, dtype=float)
        self.ridge = float(ridge)
        y = np.asarray(y)
        rows = np.nonzero(y > 0)[0]
        chosen = Z[rows, y[rows] - 1]
        self.chosen_sum = (chosen.sum(axis=0) if self.w is None else self.w[rows] @ chosen)

    def _partition(self, beta):
        n, h, _ = self.shape
        u = (beta @ self.Zc).reshape(n, h)
        return _log_partition(u, self.maskf)

    def nll(self, beta) -> float:
        lse, _ = self._partition(beta)
        total = lse.sum() if self.w is None else self.w @ lse
        return float(total - self.chosen_sum @ beta)

    def value(self, beta) -> float:
        return self.nll(beta) + 0.5 * self.ridge * float(beta @ beta)

    def terms(self, beta, hessian: bool = True):
        n, h, d = self.shape
        lse, P = self._partition(beta)
        wP = P if self.w is None else P * self.w[:, None]
        total = lse.sum() if self.w is None else self.w @ lse
        value = float(total - self.chosen_sum @ beta) + 0.5 * self.ridge * float(beta @ beta)
        Pf = wP.reshape(-1)
        grad = self.Zc @ Pf - self.chosen_sum + self.ridge * beta
        if not hessian:
            return value, grad, None
        zbar = np.einsum("nh,nhd->nd", P, self.Z)
        outer = zbar.T @ (zbar if self.w is None else zbar * self.w[:, None])
        hess = (self.Zc * Pf) @ self.Zc.T - outer + self.ridge * np.eye(d)
        return value, grad, hess


def mnl_objective(beta, Z, mask, y, w=None, ridge=0.0, hessian=True):
    """Penalized negative log-likelihood with gradient and (optionally) Hessian."""
    return MNLProblem(Z, mask, y, w, ridge).terms(np.asarray(beta, dtype=float), hessian)


def mnl_nll(beta, Z, mask, y, w=None) -> float:
    return MNLProblem(Z, mask, y, w).nll(np.asarray(beta, dtype=float))


def _newton(prob: MNLProblem, beta, tol, max_iter):
    value, grad, hess = prob.terms(beta)
    it = 0
    while np.max(np.abs(grad), initial=0.0) > tol:
        if it >= max_iter:
            return beta, False, it
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        slope = float(grad @ step)
        if not slope > 0:
            step, slope = grad, float(grad @ grad)
        t = 1.0
        # rounding noise in the summed objective; without this slack the
        # line search stalls once the predicted decrease falls below it
        noise = 1e-12 * max(1.0, abs(value))
        while True:
            cand = beta - t * step
            c_value, c_grad, c_hess = prob.terms(cand)
            if c_value <= value - 1e-4 * t * slope + noise:
                break
            t *= 0.5
            if t < 1e-12:
                # no further decrease representable; accept only if already flat
                return beta, bool(np.max(np.abs(grad)) <= tol), it
        beta, value, grad, hess = cand, c_value, c_grad, c_hess
        it += 1
    return beta, True, it


def _lbfgs(prob: MNLProblem, beta, tol, max_iter):
    def fun(b):
        v, g, _ = prob.terms(b, hessian=False)
        return v, g

    res = minimize(fun, beta, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0})
    _, g = fun(res.x)
    return res.x, bool(np.max(np.abs(g), initial=0.0) <= tol), int(res.nit)


def _sgd(Z, mask, y, w, ridge, beta, cfg: FitConfig, rng):
    n = Z.shape[0]
    total_w = float(w.sum())
    rng = np.random.default_rng(0) if rng is None else rng
    t = 0
    for epoch in range(1, cfg.max_iterations + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.sgd_batch_size):
            idx = order[start : start + cfg.sgd_batch_size]
            t += 1
            _, g, _ = mnl_objective(beta, Z[idx], mask[idx], y[idx], w[idx],
                                    ridge * w[idx].sum() / total_w, hessian=False)
            beta = beta - cfg.sgd_step_scale / np.sqrt(t) * g / max(w[idx].sum(), 1e-300)
        _, g, _ = mnl_objective(beta, Z, mask, y, w, ridge, hessian=False)
        if np.max(np.abs(g), initial=0.0) <= cfg.tolerance:
            return beta, True, epoch
    return beta, False, cfg.max_iterations


def fit_mnl_design(Z, mask, y, w=None, cfg: FitConfig = FitConfig(), rng=None):
    """Minimize the penalized NLL over beta for a prepared design tensor."""
    d = Z.shape[2]
    beta = np.zeros(d)
    if cfg.warm_start is not None:
        warm = np.asarray(cfg.warm_start, dtype=float).reshape(-1)
        if warm.shape == (d,) and np.all(np.isfinite(warm)):
            beta = warm.copy()
    if cfg.optimizer == "sgd":
        w = np.ones(Z.shape[0]) if w is None else np.asarray(w, dtype=float)
        return _sgd(Z, mask, y, w, cfg.l2_ridge, beta, cfg, rng)
    prob = MNLProblem(Z, mask, y, w, cfg.l2_ridge)
    if cfg.optimizer == "newton":
        return _newton(prob, beta, cfg.tolerance, cfg.max_iterations)
    return _lbfgs(prob, beta, cfg.tolerance, cfg.max_iterations)


def mnl_predict(beta, assortment) -> np.ndarray:
    """Choice probabilities ``[no-purchase, option 1, ..., option H]`` for one assortment."""
    beta = np.asarray(beta, dtype=float).reshape(-1)
    X = np.atleast_2d(np.asarray(assortment, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("assortment is empty")
    if X.shape[1] != beta.shape[0]:
        raise ValueError(f"option features have dimension {X.shape[1]}, beta has {beta.shape[0]}")
    lse, P = _log_partition((X @ beta)[None, :])
    return np.concatenate([np.exp(-lse), P[0]])


def _check(payload, kind, family):
    if getattr(payload, "kind", None) != kind:
        raise FamilyMismatch(f"{family} model cannot score {getattr(payload, 'kind', '?')} rows")


def _full_probs(P, lse):
    return np.concatenate([np.exp(-lse)[:, None], P], axis=1)


class MNLModel:
    """MNL with one coefficient vector shared by all options."""

    family = "mnl"
    payload_kind = "choice"

    def __init__(self, beta):
        self.beta = np.asarray(beta, dtype=float)
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("MNL coefficients must be finite")

    @property
    def params(self) -> np.ndarray:
        return self.beta.reshape(-1)

    def design(self, payload: ChoicePayload) -> np.ndarray:
        if payload.n_features != self.beta.shape[-1]:
            raise ValueError(
                f"option features have dimension {payload.n_features}, "
                f"model expects {self.beta.shape[-1]}"
            )
        return payload.features

    @classmethod
    def _fit_design(cls, payload: ChoicePayload) -> np.ndarray:
        return payload.features

    @classmethod
    def fit(cls, payload: ChoicePayload, cfg: FitConfig = FitConfig(), rng=None) -> FitResult:
        _check(payload, "choice", cls.family)
        if len(payload) == 0:
            raise ValueError("cannot fit on zero rows")
        Z = cls._fit_design(payload)
        beta, converged, it = fit_mnl_design(Z, payload.mask, payload.choices, None, cfg, rng)
        return FitResult(cls._from_flat(beta, payload), converged, it)

    @classmethod
    def _from_flat(cls, beta, payload):
        return cls(beta)

    def loss(self, payload: ChoicePayload) -> float:
        _check(payload, "choice", self.family)
        if len(payload) == 0:
            return 0.0
        return mnl_nll(self.params, self.design(payload), payload.mask, payload.choices)

    def row_loss(self, payload: ChoicePayload) -> np.ndarray:
        probs = self.predict(payload)
        return -np.log(probs[np.arange(len(payload)), payload.choices])

    def predict(self, payload: ChoicePayload) -> np.ndarray:
        _check(payload, "choice", self.family)
        mask = payload.mask
        u = (self.design(payload) @ self.params) * mask
        lse, P = _log_partition(u, mask.astype(float))
        return _full_probs(P, lse)

    def summary(self) -> str:
        return "MNL beta=[" + ", ".join(f"{b:.4g}" for b in self.params) + "]"

    def to_dict(self) -> dict:
        return {"family": self.family, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> MNLModel:
        return cls(np.asarray(d["beta"], dtype=float))

    def __eq__(self, other):
        return type(self) is type(other) and np.array_equal(self.beta, other.beta)


class OptionSpecificMNL(MNLModel):
    """MNL with a coefficient row per option identity.

    Options are mapped to rows by ``option_ids`` when the payload carries
    them, otherwise by their position in the assortment.
    """

    family = "mnl-option-specific"

    @staticmethod
    def _ids(payload: ChoicePayload) -> np.ndarray:
        if payload.option_ids is not None:
            return payload.option_ids
        return np.broadcast_to(np.arange(payload.h_max), (len(payload), payload.h_max))

    @staticmethod
    def _expand(payload: ChoicePayload, n_ids: int) -> np.ndarray:
        ids = OptionSpecificMNL._ids(payload)
        n, h, q = payload.features.shape
        mask = payload.mask
        if np.any(ids[mask] < 0) or np.any(ids[mask] >= n_ids):
            raise ValueError("option id outside the range seen at fit time")
        Z = np.zeros((n, h, n_ids, q))
        rows, cols = np.nonzero(mask)
        Z[rows, cols, ids[rows, cols]] = payload.features[rows, cols]
        return Z.reshape(n, h, n_ids * q)

    @classmethod
    def _fit_design(cls, payload):
        ids = cls._ids(payload)
        n_ids = int(ids[payload.mask].max()) + 1
        return cls._expand(payload, n_ids)

    @classmethod
    def _from_flat(cls, beta, payload):
        return cls(beta.reshape(-1, payload.n_features))

    def design(self, payload):
        if payload.n_features != self.beta.shape[1]:
            raise ValueError("option feature dimension does not match the model")
        return self._expand(payload, self.beta.shape[0])

    def summary(self) -> str:
        rows = ["[" + ", ".join(f"{b:.4g}" for b in r) + "]" for r in self.beta]
        return "MNL(option-specific) beta=[" + ", ".join(rows) + "]"


# ---------------------------------------------------------------------------
# Bid-response families. All of them work on per-bid-level sufficient
# statistics (sum of outcomes, sum of squared outcomes, row count), which is
# exact for the squared loss and the Bernoulli likelihood.


def _level_stats(payload: AuctionPayload):
    n_levels = len(payload.levels)
    idx = payload.level_index
    totals = np.bincount(idx, minlength=n_levels).astype(float)
    sums = np.bincount(idx, weights=payload.wins, minlength=n_levels)
    sq = np.bincount(idx, weights=payload.wins**2, minlength=n_levels)
    present = totals > 0
    return payload.levels[present], sums[present], sq[present], totals[present]


def _squared_loss(predict_bids, payload: AuctionPayload) -> float:
    if len(payload) == 0:
        return 0.0
    bids, sums, sq, totals = _level_stats(payload)
    f = predict_bids(bids)
    return float(np.sum(sq - 2.0 * f * sums + totals * f * f))


def pava(values, weights=None) -> np.ndarray:
    """Weighted pool-adjacent-violators: nondecreasing least-squares fit.

    ``values`` must already be ordered by the abscissa. Returns one fitted
    value per input entry.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if n == 0:
        return values.copy()
    means: list[float] = []
    wts: list[float] = []
    sizes: list[int] = []
    for v, wt in zip(values.tolist(), weights.tolist()):
        means.append(v)
        wts.append(wt)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            w2 = wts.pop()
            m2 = means.pop()
            s2 = sizes.pop()
            w1 = wts[-1]
            merged = w1 + w2
            means[-1] = (means[-1] * w1 + m2 * w2) / merged
            wts[-1] = merged
            sizes[-1] += s2
    return np.repeat(np.asarray(means), sizes)


class IsotonicModel:
    """Nondecreasing step curve from bid to win probability."""

    family = "isotonic"
    payload_kind = "auction"

    def __init__(self, breakpoints, levels):
        self.breakpoints = np.asarray(breakpoints, dtype=float)
        self.levels = np.asarray(levels, dtype=float)
        if self.breakpoints.shape != self.levels.shape or self.breakpoints.size == 0:
            raise ValueError("isotonic curve needs matching, non-empty breakpoints and levels")

    @property
    def params(self):
        return None

    @classmethod
    def fit(cls, payload: AuctionPayload, cfg: FitConfig = FitConfig(), rng=None) -> FitResult:
        _check(payload, "auction", cls.family)
        if len(payload) == 0:
            raise ValueError("cannot fit an isotonic curve on zero rows")
        bids, sums, _, totals = _level_stats(payload)
        fitted = pava(sums / totals, totals)
        return FitResult(cls(bids, np.clip(fitted, 0.0, 1.0)), True, 0)

    def predict_bids(self, bids) -> np.ndarray:
        bids = np.asarray(bids, dtype=float)
        pos = np.searchsorted(self.breakpoints, bids, side="right") - 1
        return self.levels[np.clip(pos, 0, None)]

    def predict(self, payload: AuctionPayload) -> np.ndarray:
        _check(payload, "auction", self.family)
        return self.predict_bids(payload.bids)

    def loss(self, payload: AuctionPayload) -> float:
        _check(payload, "auction", self.family)
        return _squared_loss(self.predict_bids, payload)

    def summary(self) -> str:
        return (f"isotonic steps={self.breakpoints.size} "
                f"p({self.breakpoints[0]:.4g})={self.levels[0]:.4g} "
                f"p({self.breakpoints[-1]:.4g})={self.levels[-1]:.4g}")

    def to_dict(self) -> dict:
        return {"family": self.family, "breakpoints": self.breakpoints.tolist(),
                "levels": self.levels.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> IsotonicModel:
        return cls(d["breakpoints"], d["levels"])

    def __eq__(self, other):
        return (type(self) is type(other) and np.array_equal(self.breakpoints, other.breakpoints)
                and np.array_equal(self.levels, other.levels))


def isotonic_fit(bids, outcomes) -> IsotonicModel:
    return IsotonicModel.fit(AuctionPayload(bids, outcomes)).model


class LogisticModel:
    """Win probability sigmoid(slope * bid + intercept)."""

    family = "logistic"
    payload_kind = "auction"

    def __init__(self, slope: float, intercept: float):
        self.slope = float(slope)
        self.intercept = float(intercept)
        if not (np.isfinite(self.slope) and np.isfinite(self.intercept)):
            raise ValueError("logistic coefficients must be finite")

    @property
    def params(self) -> np.ndarray:
        return np.array([self.slope, self.intercept])

    @classmethod
    def fit(cls, payload: AuctionPayload, cfg: FitConfig = FitConfig(), rng=None) -> FitResult:
        _check(payload, "auction", cls.family)
        if len(payload) == 0:
            raise ValueError("cannot fit on zero rows")
        bids, sums, _, totals = _level_stats(payload)
        # one "win" row and one "loss" row per bid level, weighted by counts
        Z = np.repeat(np.stack([bids, np.ones_like(bids)], axis=1), 2, axis=0)[:, None, :]
        y = np.tile([1, 0], bids.size)
        w = np.stack([sums, totals - sums], axis=1).reshape(-1)
        keep = w > 0
        beta, converged, it = fit_mnl_design(
            Z[keep], np.ones((int(keep.sum()), 1), dtype=bool), y[keep], w[keep], cfg, rng)
        return FitResult(cls(*beta), converged, it)

    def predict_bids(self, bids) -> np.ndarray:
        z = self.slope * np.asarray(bids, dtype=float) + self.intercept
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def predict(self, payload: AuctionPayload) -> np.ndarray:
        _check(payload, "auction", self.family)
        return self.predict_bids(payload.bids)

    def loss(self, payload: AuctionPayload) -> float:
        _check(payload, "auction", self.family)
        return _squared_loss(self.predict_bids, payload)

    def summary(self) -> str:
        return f"logistic slope={self.slope:.4g} intercept={self.intercept:.4g}"

    def to_dict(self) -> dict:
        return {"family": self.family, "slope": self.slope, "intercept": self.intercept}

    @classmethod
    def from_dict(cls, d: dict) -> LogisticModel:
        return cls(d["slope"], d["intercept"])

    def __eq__(self, other):
        return (type(self) is type(other) and self.slope == other.slope
                and self.intercept == other.intercept)


class ConstantModel:
    """Same win probability at every bid."""

    family = "constant"
    payload_kind = "auction"

    def __init__(self, probability: float):
        self.probability = float(probability)

    @property
    def params(self):
        return None

    @classmethod
    def fit(cls, payload: AuctionPayload, cfg: FitConfig = FitConfig(), rng=None) -> FitResult:
        _check(payload, "auction", cls.family)
        if len(payload) == 0:
            raise ValueError("cannot fit a constant on zero rows")
        return FitResult(cls(float(np.mean(payload.wins))), True, 0)

    def predict_bids(self, bids) -> np.ndarray:
        return np.full(np.shape(bids), self.probability)

    def predict(self, payload: AuctionPayload) -> np.ndarray:
        _check(payload, "auction", self.family)
        return self.predict_bids(payload.bids)

    def loss(self, payload: AuctionPayload) -> float:
        _check(payload, "auction", self.family)
        return _squared_loss(self.predict_bids, payload)

    def summary(self) -> str:
        return f"constant p={self.probability:.4g}"

    def to_dict(self) -> dict:
        return {"family": self.family, "probability": self.probability}

    @classmethod
    def from_dict(cls, d: dict) -> ConstantModel:
        return cls(d["probability"])

    def __eq__(self, other):
        return type(self) is type(other) and self.probability == other.probability


def constant_fit(outcomes) -> float:
    outcomes = np.asarray(outcomes, dtype=float)
    if outcomes.size == 0:
        raise ValueError("cannot fit a constant on zero rows")
    return float(outcomes.mean())


FAMILIES = {
    cls.family: cls
    for cls in (MNLModel, OptionSpecificMNL, IsotonicModel, LogisticModel, ConstantModel)
}


def get_family(name: str):
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown leaf family {name!r}; choose from {sorted(FAMILIES)}") from None


def leaf_loss(model, payload) -> float:
    """Summed training loss of ``model`` on ``payload`` (ridge excluded)."""
    return model.loss(payload)


def model_from_dict(d: dict):
    return get_family(d["family"]).from_dict(d)
