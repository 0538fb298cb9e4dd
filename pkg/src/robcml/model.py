"""Core value types: family selector, dataset and parameter vector."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


class Kind(str, enum.Enum):
    NEGATIVE_BINOMIAL = "nb"
    BETA = "beta"


class Link(str, enum.Enum):
    EXP = "exp"
    LOGISTIC = "logistic"


_DEFAULT_LINK = {Kind.NEGATIVE_BINOMIAL: Link.EXP, Kind.BETA: Link.LOGISTIC}


@dataclass(frozen=True)
class FamilySpec:
    """Response family together with its (strictly increasing) link.

    The negative binomial is paired with ``exp`` and the Beta family with
    the logistic link; other pairings are rejected.
    """

    kind: Kind
    link: Link | None = None

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        link = _DEFAULT_LINK[kind] if self.link is None else Link(self.link)
        if link is not _DEFAULT_LINK[kind]:
            raise DomainError(f"{kind.value} family requires the {_DEFAULT_LINK[kind].value} link")
        object.__setattr__(self, "link", link)

    @classmethod
    def from_name(cls, name: str) -> "FamilySpec":
        aliases = {"nb": Kind.NEGATIVE_BINOMIAL, "negbin": Kind.NEGATIVE_BINOMIAL,
                   "negative_binomial": Kind.NEGATIVE_BINOMIAL, "beta": Kind.BETA}
        try:
            return cls(aliases[name.lower()])
        except KeyError:
            raise DomainError(f"unknown family {name!r}") from None

    @property
    def discrete(self) -> bool:
        return self.kind is Kind.NEGATIVE_BINOMIAL

    def mean(self, eta):
        """Apply the inverse link ``h`` to a linear predictor."""
        eta = np.asarray(eta, dtype=float)
        if self.link is Link.EXP:
            return np.exp(np.clip(eta, -700.0, 700.0))
        return 0.5 * (1.0 + np.tanh(0.5 * eta))

    def linear(self, mu):
        """Inverse of :meth:`mean`."""
        mu = np.asarray(mu, dtype=float)
        if self.link is Link.EXP:
            return np.log(mu)
        return np.log(mu) - np.log1p(-mu)


NB = FamilySpec(Kind.NEGATIVE_BINOMIAL)
BETA = FamilySpec(Kind.BETA)


@dataclass
class Dataset:
    """Responses ``y`` and design matrix ``X`` whose first column is all ones."""

    y: np.ndarray
    X: np.ndarray
    names: list[str] = field(default_factory=list)
    outlier_mask: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.X = X
        n, p = X.shape
        if self.y.shape[0] != n:
            raise DomainError(f"y has {self.y.shape[0]} rows but X has {n}")
        if n < p or p < 1:
            raise DomainError(f"need n >= p >= 1, got n={n}, p={p}")
        if not np.all(X[:, 0] == 1.0):
            raise DomainError("first column of X must be the intercept (all ones)")
        if not self.names:
            self.names = ["(Intercept)"] + [f"x{j}" for j in range(1, p)]
        if self.outlier_mask is not None:
            self.outlier_mask = np.asarray(self.outlier_mask, dtype=bool)

    @classmethod
    def from_covariates(cls, y, xstar=None, names=None) -> "Dataset":
        y = np.asarray(y, dtype=float).ravel()
        if xstar is None:
            X = np.ones((y.size, 1))
        else:
            xstar = np.asarray(xstar, dtype=float)
            if xstar.ndim == 1:
                xstar = xstar[:, None]
            X = np.column_stack([np.ones(y.size), xstar])
        return cls(y, X, names=list(names) if names else [])

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def xstar(self) -> np.ndarray:
        return self.X[:, 1:]

    def validate_for(self, family: FamilySpec) -> None:
        y = self.y
        if not np.all(np.isfinite(y)):
            raise DomainError("responses must be finite")
        if family.discrete:
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise DomainError("negative binomial responses must be nonnegative integers")
        elif np.any(y <= 0) or np.any(y >= 1):
            raise DomainError("Beta responses must lie strictly inside (0, 1)")

    def subset(self, keep) -> "Dataset":
        keep = np.asarray(keep)
        mask = None if self.outlier_mask is None else self.outlier_mask[keep]
        return Dataset(self.y[keep], self.X[keep], list(self.names), mask)


@dataclass
class ThetaEstimate:
    """Coefficients ``beta`` (intercept first) and dispersion ``alpha``."""

    beta: np.ndarray
    alpha: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).ravel().copy()
        self.alpha = float(self.alpha)

    @property
    def beta1(self) -> float:
        return float(self.beta[0])

    @property
    def eta(self) -> float:
        return float(np.linalg.norm(self.beta[1:]))

    @property
    def gamma(self) -> np.ndarray:
        slopes = self.beta[1:]
        norm = np.linalg.norm(slopes)
        if norm == 0.0:
            g = np.zeros_like(slopes)
            if g.size:
                g[0] = 1.0
            return g
        return slopes / norm

    def decompose(self):
        """Return ``(gamma, beta1, eta, alpha)``."""
        return self.gamma, self.beta1, self.eta, self.alpha

    def to_vector(self) -> np.ndarray:
        """Optimizer coordinates ``(beta, sqrt(alpha))``."""
        return np.append(self.beta, np.sqrt(self.alpha))

    @classmethod
    def from_vector(cls, x) -> "ThetaEstimate":
        x = np.asarray(x, dtype=float)
        return cls(x[:-1], x[-1] ** 2)

    def mu(self, X, family: FamilySpec) -> np.ndarray:
        return family.mean(np.asarray(X) @ self.beta)

    def as_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "alpha": self.alpha}
