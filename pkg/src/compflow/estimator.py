"""Estimator-style facade over the offline/online pipeline.

``NetworkRomEstimator`` follows the scikit-learn calling conventions
(keyword constructor parameters, ``fit`` / ``predict`` / ``score``,
fitted attributes with trailing underscores) so the training pipeline can
be driven from parameter-sweep tooling.  ``fit`` runs the offline stages
(port training, state training, optional adaptive enrichment); ``predict``
solves a network configuration with the trained reduced model.
"""

from __future__ import annotations

import numpy as np

from .geometry import NetworkConfig, build_network
from .fem import instantiate_network
from .ddopt import NEW, DDProblem, sqp_solve
from .rom import eval_errors, rom_dd_solve
from .training import (BoundarySampler, MarkingPolicy, adaptive_enrichment,
                       localized_state_training, pairwise_port_training,
                       port_based_state_enrichment, _rom_setup_for)


class NetworkRomEstimator:
    """Component-based reduced model for random network families.

    Parameters mirror the training pipeline; all are plain keyword
    arguments so instances can be cloned by ``type(est)(**est.get_params())``.
    """

    def __init__(self, res: int = 2, n_loc_s: int = 15, m0: int = 10,
                 n_networks: int = 20, n_comp_max: int = 4, n0: int = 10,
                 port_modes: int = 10, enrich_iterations: int = 0,
                 n_glo: int = 10, m_glo: int = 10, n_train_glo: int = 12,
                 mode: str = "minres", delta: float = 1e-8,
                 Re_range: tuple[float, float] = (50.0, 150.0),
                 Re_ref: float = 100.0, random_state: int = 0):
        self.res = res
        self.n_loc_s = n_loc_s
        self.m0 = m0
        self.n_networks = n_networks
        self.n_comp_max = n_comp_max
        self.n0 = n0
        self.port_modes = port_modes
        self.enrich_iterations = enrich_iterations
        self.n_glo = n_glo
        self.m_glo = m_glo
        self.n_train_glo = n_train_glo
        self.mode = mode
        self.delta = delta
        self.Re_range = Re_range
        self.Re_ref = Re_ref
        self.random_state = random_state

    # -- sklearn plumbing

    _param_names = ("res", "n_loc_s", "m0", "n_networks", "n_comp_max", "n0",
                    "port_modes", "enrich_iterations", "n_glo", "m_glo",
                    "n_train_glo", "mode", "delta", "Re_range", "Re_ref",
                    "random_state")

    def get_params(self, deep: bool = True) -> dict:
        return {k: getattr(self, k) for k in self._param_names}

    def set_params(self, **params) -> "NetworkRomEstimator":
        for k, v in params.items():
            if k not in self._param_names:
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    # -- offline

    def fit(self, X=None, y=None) -> "NetworkRomEstimator":
        """Run the offline pipeline; X and y are ignored (data is sampled)."""
        rng = np.random.default_rng(self.random_state)
        sampler = BoundarySampler(Re_range=self.Re_range, Re_ref=self.Re_ref)
        W = pairwise_port_training(rng, sampler, n_loc_s=self.n_loc_s,
                                   m0=self.m0, res=self.res, delta=self.delta)
        Z, data = localized_state_training(
            W, rng, sampler, n_networks=self.n_networks,
            n_comp_max=self.n_comp_max, n0=self.n0, res=self.res,
            delta=self.delta)
        if self.port_modes > 0:
            Z = port_based_state_enrichment(Z, W, data, res=self.res,
                                            n_new=self.port_modes)
        history = []
        if self.enrich_iterations > 0:
            policy = MarkingPolicy(maxit=self.enrich_iterations,
                                   n_glo=self.n_glo, m_glo=self.m_glo,
                                   n_train_glo=self.n_train_glo)
            result = adaptive_enrichment(policy, W, Z, rng, res=self.res,
                                         delta=self.delta, mode=self.mode,
                                         Re_range=self.Re_range,
                                         Re_ref=self.Re_ref)
            W, Z, history = result.W, result.Z, result.history
        self.control_basis_ = W
        self.state_bases_ = Z
        self.history_ = history
        return self

    def _check_fitted(self):
        if not hasattr(self, "control_basis_"):
            raise RuntimeError("estimator is not fitted; call fit() first")

    # -- online

    def predict(self, X):
        """Reduced DD solve per configuration; returns lists of states."""
        self._check_fitted()
        configs = [X] if isinstance(X, NetworkConfig) else list(X)
        out = []
        for config in configs:
            net = build_network(config)
            comps = instantiate_network(net, self.res)
            ctrl_bases, setup = _rom_setup_for(net, comps, self.control_basis_,
                                               self.state_bases_, self.mode)
            problem = DDProblem(comps=comps, ports=net.ports, formulation=NEW,
                                delta=self.delta, control_bases=ctrl_bases)
            res = rom_dd_solve(problem, setup)
            out.append(res.states)
        return out if not isinstance(X, NetworkConfig) else out[0]

    def score(self, X, y=None) -> float:
        """Negative mean relative state error against full-order DD."""
        self._check_fitted()
        configs = [X] if isinstance(X, NetworkConfig) else list(X)
        errs = []
        for config in configs:
            net = build_network(config)
            comps = instantiate_network(net, self.res)
            ref = sqp_solve(DDProblem(comps=comps, ports=net.ports,
                                      formulation=NEW, delta=self.delta))
            rom_states = self.predict(config)
            e = eval_errors([rom_states], [ref.states], comps)
            errs.append(e["mean"])
        return -float(np.mean(errs))
