"""Scikit-learn style front end.

``LayeredGraphBuilder`` is a transformer turning a thermal sequence into
the per-layer accreted graphs; ``GraphHeatModel`` is an estimator whose
``fit`` runs the layer curriculum and whose ``predict`` rolls the frozen
model over a sequence.  Both expose their configuration through
``get_params``/``set_params`` so they compose with pipelines and searches.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .evaluation import EvalReport, evaluate_checkpoint
from .frames import ThermalSequence
from .graphs import GraphBuildParams, build_layered_graphs
from .training import (InferenceResult, TrainConfig, inference_rollout,
                       train_curriculum)
from .validation import ValidationError


class LayeredGraphBuilder(BaseEstimator, TransformerMixin):
    """Thermal sequence -> dict of accreted layer graphs.

    Parameters mirror :class:`~heatgraph.graphs.GraphBuildParams`:
    ``prune_target`` bounds the retained points in the recent-layer window,
    ``top_k`` is that window's depth, and ``alpha_mm=None`` selects the
    scale-free default of 1.5x the median Delaunay edge length.
    """

    def __init__(self, prune_target=400, top_k=5, alpha_mm=None,
                 alpha_factor=1.5, jitter_mm=1e-7, jitter_seed=0):
        self.prune_target = prune_target
        self.top_k = top_k
        self.alpha_mm = alpha_mm
        self.alpha_factor = alpha_factor
        self.jitter_mm = jitter_mm
        self.jitter_seed = jitter_seed

    def _build_params(self) -> GraphBuildParams:
        return GraphBuildParams(
            prune_target=self.prune_target, top_k=self.top_k,
            alpha_mm=self.alpha_mm, alpha_factor=self.alpha_factor,
            jitter_mm=self.jitter_mm, jitter_seed=self.jitter_seed,
        )

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: ThermalSequence) -> dict:
        if not isinstance(X, ThermalSequence):
            raise ValidationError("LayeredGraphBuilder expects a ThermalSequence")
        return build_layered_graphs(X, self._build_params())


class GraphHeatModel(BaseEstimator):
    """Learnable graph heat diffusion with physics regularization.

    ``fit`` trains the connectivity and dissipation nets (and the laser
    parameters) through the layer-by-layer curriculum; ``predict`` runs the
    frozen model over a sequence and returns the per-interval states.
    ``score`` is the negative mean dimensionless relative error, so higher
    is better as scikit-learn expects.
    """

    def __init__(self, scheme="crank_nicolson", substeps=4, hidden_width=256,
                 reg_subset="all", weight_level="normal", phi_reg="direct",
                 budget=4500, stage_tol=0.05, learning_rate=1e-5, beta1=0.5,
                 beta2=0.99, cg_tol=1e-10, seed=0, laser=True, t_ref=1000.0,
                 material="", prune_target=400, top_k=5, alpha_mm=None):
        self.scheme = scheme
        self.substeps = substeps
        self.hidden_width = hidden_width
        self.reg_subset = reg_subset
        self.weight_level = weight_level
        self.phi_reg = phi_reg
        self.budget = budget
        self.stage_tol = stage_tol
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.cg_tol = cg_tol
        self.seed = seed
        self.laser = laser
        self.t_ref = t_ref
        self.material = material
        self.prune_target = prune_target
        self.top_k = top_k
        self.alpha_mm = alpha_mm

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            scheme=self.scheme, substeps=self.substeps,
            hidden_width=self.hidden_width, reg_subset=self.reg_subset,
            weight_level=self.weight_level, phi_reg=self.phi_reg,
            budget=self.budget, stage_tol=self.stage_tol, lr=self.learning_rate,
            beta1=self.beta1, beta2=self.beta2, cg_tol=self.cg_tol,
            seed=self.seed, laser=self.laser, t_ref=self.t_ref,
            material=self.material,
        )

    def _graphs_for(self, X: ThermalSequence, graphs):
        if graphs is not None:
            return graphs
        builder = LayeredGraphBuilder(prune_target=self.prune_target,
                                      top_k=self.top_k, alpha_mm=self.alpha_mm)
        return builder.transform(X)

    def fit(self, X: ThermalSequence, y=None, graphs=None):
        graphs = self._graphs_for(X, graphs)
        result = train_curriculum(X, graphs, self._train_config())
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.stage_summaries_ = result.stage_summaries
        self.graphs_ = graphs
        return self

    def _require_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("GraphHeatModel is not fitted yet")

    def predict(self, X: ThermalSequence, graphs=None) -> InferenceResult:
        self._require_fitted()
        graphs = self._graphs_for(X, graphs)
        return inference_rollout(self.checkpoint_, X, graphs, self._train_config())

    def evaluate(self, X: ThermalSequence, graphs=None,
                 timing_repeats: int = 1) -> EvalReport:
        self._require_fitted()
        graphs = self._graphs_for(X, graphs)
        return evaluate_checkpoint(self.checkpoint_, X, graphs,
                                   self._train_config(), timing_repeats)

    def score(self, X: ThermalSequence, y=None, graphs=None) -> float:
        return -self.evaluate(X, graphs).mean_eps_r_nrmse
