# dicp_components/__init__.py
"""Differentiable weighted-ICP components package."""

from typing import Any, Dict, List

from .dicp_core import IcpComponent
from .dicp_grad import GradCheckComponent
from .experiment import EvalComponent
from .mask_trainer import TrainMaskComponent
from .radar_extract import ExtractComponent

__all__ = [
    "EvalComponent",
    "ExtractComponent",
    "GradCheckComponent",
    "IcpComponent",
    "TrainMaskComponent",
]

# Subcommand name -> component class
COMPONENT_MAP = {
    "extract": ExtractComponent,
    "icp": IcpComponent,
    "grad-check": GradCheckComponent,
    "train-mask": TrainMaskComponent,
    "eval": EvalComponent,
}


def get_component(command: str, settings: Dict[str, Any]) -> Any:
    """Return the component serving a subcommand.

    Args:
        command: CLI subcommand name
        settings: Parsed configuration document

    Returns:
        Component instance, or None for unknown commands
    """
    component_class = COMPONENT_MAP.get(command)
    if component_class:
        return component_class(settings)
    return None


def get_available_commands() -> List[str]:
    return list(COMPONENT_MAP.keys())


# Version info
__version__ = "0.1.0"
__description__ = "Differentiable weighted ICP with learned radar weight masks"
