"""scikit-learn compatible wrappers around the search-refine-select pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .constraints import ConstraintSpec
from .estimate import OptimizerSettings, fit_static, rank_by_aic
from .expr import bind, call, compile_tree, differentiate, serialize
from .gpsearch import GPConfig, search

__all__ = ["SymbolicRegressor", "ConcentrationSurrogate"]


class _SymbolicBase(RegressorMixin, BaseEstimator):
    def _gp_config(self, names) -> GPConfig:
        return GPConfig(
            population_size=self.population_size,
            generations=self.generations,
            max_complexity=self.max_complexity,
            operators=tuple(self.operators),
            variables=tuple(names),
            seed=self.random_state,
        )

    def _fit(self, inputs: dict, y: np.ndarray, names) -> None:
        spec = self.constraints
        if spec is not None and not isinstance(spec, ConstraintSpec):
            raise TypeError("constraints must be a ConstraintSpec or None")
        table = search(inputs, y, spec, self._gp_config(names))
        if not len(table):
            raise ValueError(table.diagnostic or "search found no finite candidate")
        settings = OptimizerSettings(n_restarts=self.n_restarts, seed=self.random_state)
        fits = [fit_static(c.tree, inputs, y, spec, settings, init=c.theta) for c in table.champions()]
        ranked = rank_by_aic(fits)
        if not ranked:
            raise ValueError("no refined candidate has a finite AIC")
        self.champions_ = table
        self.candidates_ = ranked
        self.fit_result_ = ranked[0]
        self.model_ = ranked[0].model
        self.theta_ = ranked[0].theta
        self.expression_ = serialize(bind(self.model_, self.theta_))
        self._fn = compile_tree(self.model_)

    def _predict(self, inputs: dict, n: int) -> np.ndarray:
        out = call(self._fn, self.theta_, inputs)
        return np.broadcast_to(np.asarray(out, dtype=float), (n,)).copy()


class SymbolicRegressor(_SymbolicBase):
    """Genetic-programming regression with AIC model selection.

    Parameters
    ----------
    population_size, generations, max_complexity : int
        Search budget and the largest tree (node count) considered.
    operators : tuple of str
        Subset of ``+ - * / exp``.
    constraints : ConstraintSpec, optional
        Penalties added to both the search fitness and the refinement.
    n_restarts : int
        Local optimizer restarts per champion.
    random_state : int

    Attributes
    ----------
    fit_result_ : FitResult
        Selected model with parameters, SSE, NLL and AIC.
    expression_ : str
        Selected model with its parameters substituted.
    champions_ : ChampionTable
    candidates_ : list of FitResult
        Refined champions, best AIC first.
    feature_names_in_ : ndarray of str
        Variable names used in the expressions.
    """

    def __init__(self, population_size=200, generations=20, max_complexity=15,
                 operators=("+", "-", "*", "/"), constraints=None, n_restarts=5, random_state=0):
        self.population_size = population_size
        self.generations = generations
        self.max_complexity = max_complexity
        self.operators = operators
        self.constraints = constraints
        self.n_restarts = n_restarts
        self.random_state = random_state

    def fit(self, X, y):
        names = getattr(X, "columns", None)
        X, y = check_X_y(X, y, y_numeric=True)
        names = [str(c) for c in names] if names is not None else [f"x{j}" for j in range(X.shape[1])]
        self.n_features_in_ = X.shape[1]
        self.feature_names_in_ = np.array(names, dtype=object)
        self._fit({n: X[:, j] for j, n in enumerate(names)}, y.astype(float), names)
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_result_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        names = list(self.feature_names_in_)
        return self._predict({n: X[:, j] for j, n in enumerate(names)}, X.shape[0])


class ConcentrationSurrogate(_SymbolicBase):
    """Differentiable symbolic model ``c(t)`` of one measured concentration series.

    Same parameters as :class:`SymbolicRegressor`, with ``exp`` in the
    default operator set. ``fit`` takes the sample times as a 1-D array.
    """

    def __init__(self, population_size=200, generations=20, max_complexity=12,
                 operators=("+", "-", "*", "/", "exp"), constraints=None, n_restarts=10, random_state=0):
        self.population_size = population_size
        self.generations = generations
        self.max_complexity = max_complexity
        self.operators = operators
        self.constraints = constraints
        self.n_restarts = n_restarts
        self.random_state = random_state

    @staticmethod
    def _times(t) -> np.ndarray:
        return check_array(np.asarray(t, dtype=float).reshape(-1, 1)).ravel()

    def fit(self, t, c):
        t, c = check_X_y(np.asarray(t, dtype=float).reshape(-1, 1), c, y_numeric=True)
        self.n_features_in_ = 1
        self._fit({"t": t.ravel()}, c.astype(float), ["t"])
        self._dfn = compile_tree(differentiate(self.model_, "t"))
        return self

    def predict(self, t):
        check_is_fitted(self, "fit_result_")
        t = self._times(t)
        return self._predict({"t": t}, t.size)

    def derivative(self, t):
        """Exact time derivative of the fitted surrogate."""
        check_is_fitted(self, "fit_result_")
        t = self._times(t)
        out = call(self._dfn, self.theta_, {"t": t})
        return np.broadcast_to(np.asarray(out, dtype=float), t.shape).copy()
