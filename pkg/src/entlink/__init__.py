"""Simulation and analysis of long-distance free-space entanglement distribution."""
from .physics import SingletModel, VisibilityModel
from .scenario import Scenario, load_scenario
from .simulate import simulate_run
from .timetag import TagStream

__version__ = "0.1.0"

__all__ = ["SingletModel", "VisibilityModel", "Scenario", "load_scenario", "simulate_run", "TagStream"]
