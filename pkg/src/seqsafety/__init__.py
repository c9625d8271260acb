"""Sequential vaccine-safety surveillance on simulated cohorts.

Simulation, design likelihoods, MaxSPRT, grid Bayesian posteriors and
negative-control bias correction, plus an experiment harness that scores
them against each other.
"""

__version__ = "0.1.0"
