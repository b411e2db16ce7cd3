"""Noisy quantum-walk transfer efficiencies and a cross-filter CNN that predicts them."""

from .graphs import Graph, WalkSetup, adjacency_matrix, make_cycle, pad_matrix, transition_matrix
from .efficiency import SimulationParams, TransferOutcome, label, sweep_ground_truth, threshold

__version__ = "0.1.0"
