"""Reference bundle dispatch managers."""

from .base import BaseBdm
from .contact import ContactBdm, ContactPlanEntry, PlanFileError, earliest_arrival, load_plan
from .opportunistic import OpportunisticBdm
from .static import RoutesFileError, StaticBdm, load_routes

__all__ = [
    "BaseBdm",
    "ContactBdm",
    "ContactPlanEntry",
    "OpportunisticBdm",
    "PlanFileError",
    "RoutesFileError",
    "StaticBdm",
    "earliest_arrival",
    "load_plan",
    "load_routes",
]
