"""Forward-map backends ``theta -> G(theta; d)`` shared by the EIG and MCMC code."""
from __future__ import annotations

import numpy as np

from .edm_solver import SolverConfig, observe, solve_forward
from .model import DesignPoint, ModelParams, ObservationSchedule
from .surrogate import ObservationOperator, SurrogateModel, config_hash, operator


class SolverBackend:
    """Full finite-volume solve per parameter vector."""

    name = "solver"

    def __init__(self, config: SolverConfig, phase_ratio: float = 1.5):
        self.config = config
        self.phase_ratio = phase_ratio

    def observation_fn(self, d: DesignPoint, schedule: ObservationSchedule):
        def fn(theta):
            params = ModelParams.from_theta(theta, self.phase_ratio)
            return observe(solve_forward(params, d, self.config), schedule).values
        return fn

    def observations(self, thetas, d: DesignPoint, schedule: ObservationSchedule) -> np.ndarray:
        fn = self.observation_fn(d, schedule)
        return np.array([fn(t) for t in np.atleast_2d(thetas)])

    def identity(self) -> str:
        return config_hash({"backend": self.name, "solver": self.config.to_dict(),
                            "phase_ratio": self.phase_ratio})


class SurrogateBackend:
    """Sparse-grid surrogate evaluated through a per-design linear operator."""

    name = "surrogate"

    def __init__(self, model: SurrogateModel):
        self.model = model

    def observation_fn(self, d: DesignPoint, schedule: ObservationSchedule) -> ObservationOperator:
        return operator(self.model, d, schedule)

    def observations(self, thetas, d: DesignPoint, schedule: ObservationSchedule) -> np.ndarray:
        return self.observation_fn(d, schedule)(np.atleast_2d(thetas))

    def identity(self) -> str:
        hashes = [i.content_hash() for row in self.model.interpolants for i in row]
        return config_hash({"backend": self.name, "spec": self.model.spec_dict(), "nodes": hashes})
