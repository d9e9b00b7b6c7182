"""Localization with switched uniform rectangular arrays from WiFi CSI.

Modules: ``geometry`` (array layout and steering), ``simulate`` (synthetic
CSI), ``calibration`` (phase offsets), ``aoa`` (MUSIC family), ``fusion``
(ray intersection and direct position determination), ``scenario`` and
``pipeline`` (declarative runs), ``cli``.
"""

from .aoa import SmoothingSpec, estimate_aoa
from .calibration import CalibrationProfile, calibrate_system, measure_profiles
from .fusion import closest_points, geometric_position, locate_dpd, smooth_trajectory
from .geometry import Direction, Ray, UraConfig, steering_vector
from .scenario import Scenario, load_scenario, parse_scenario
from .simulate import CaptureSchedule, HardwareImpairments, SourceSpec, simulate_ideal, simulate_switched

__version__ = "0.1.0"

__all__ = [
    "CalibrationProfile",
    "CaptureSchedule",
    "Direction",
    "HardwareImpairments",
    "Ray",
    "Scenario",
    "SmoothingSpec",
    "SourceSpec",
    "UraConfig",
    "calibrate_system",
    "closest_points",
    "estimate_aoa",
    "geometric_position",
    "load_scenario",
    "locate_dpd",
    "measure_profiles",
    "parse_scenario",
    "simulate_ideal",
    "simulate_switched",
    "smooth_trajectory",
    "steering_vector",
]
