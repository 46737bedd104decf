"""Simulation laboratory: finite populations, PPS sampling and Monte Carlo drivers."""

from .experiment import ExperimentDescriptor, ExperimentResult, run_experiment
from .gss import gss_replica, write_gss_replica
from .population import Population, PopulationSpec, generate_population
from .sampling import (SimulatedFile, apply_nonresponse_ratio, inclusion_probabilities,
                       make_public_file, pps_randomized_systematic)

__all__ = [
    "ExperimentDescriptor", "ExperimentResult", "Population", "PopulationSpec", "SimulatedFile",
    "apply_nonresponse_ratio", "generate_population", "gss_replica", "inclusion_probabilities",
    "make_public_file", "pps_randomized_systematic", "run_experiment", "write_gss_replica",
]
