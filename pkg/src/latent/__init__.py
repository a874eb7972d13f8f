"""Closed-loop generation of stealthy analog hardware Trojans.

The loop alternates between an insertion policy and a detection oracle:
``netlist`` parses and edits SPICE text, ``simulator`` runs DC sweeps,
``detector`` flags suspicious lines, ``agent`` drives the campaign and
``metrics`` scores the result.
"""

from .agent import CampaignConfig, CampaignResult, HeuristicPolicy, evasion_reward, run_campaign
from .detector import DetectionReport, DetectorConfig, RuleDetector, detect
from .metrics import MetricsRecord, activation_range, delta_a, delta_p, node_impact
from .netlist import Element, ElementKind, Netlist, parse, serialize
from .simulator import SimTrace, SweepSpec, dc_operating_point, dc_sweep

__version__ = "0.1.0"

__all__ = [
    "CampaignConfig", "CampaignResult", "DetectionReport", "DetectorConfig", "Element",
    "ElementKind", "HeuristicPolicy", "MetricsRecord", "Netlist", "RuleDetector", "SimTrace",
    "SweepSpec", "activation_range", "dc_operating_point", "dc_sweep", "delta_a", "delta_p",
    "detect", "evasion_reward", "node_impact", "parse", "run_campaign", "serialize",
]
