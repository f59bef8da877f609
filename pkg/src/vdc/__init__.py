"""Virtual-data production management: recipe catalogs, derivations, dispatch."""

from .cookbook import CatalogState, Cookbook, replay
from .identity import ObjectId, canonical_encode, derivation_output_id, expand_partitions
from .model import (
    Dataset,
    Derivation,
    ParamDomain,
    ParamSchema,
    ParamSpec,
    ParamType,
    ProvenanceRecord,
    Recipe,
    Replica,
    State,
    Transformation,
)
from .planner import MaterializationPlan, Planner, PlannerConfig, plan_materialization
from .templating import RecipeTemplate, instantiate, parse_template

__version__ = "0.1.0"

__all__ = [
    "CatalogState",
    "Cookbook",
    "Dataset",
    "Derivation",
    "MaterializationPlan",
    "ObjectId",
    "ParamDomain",
    "ParamSchema",
    "ParamSpec",
    "ParamType",
    "Planner",
    "PlannerConfig",
    "ProvenanceRecord",
    "Recipe",
    "RecipeTemplate",
    "Replica",
    "State",
    "Transformation",
    "canonical_encode",
    "derivation_output_id",
    "expand_partitions",
    "instantiate",
    "parse_template",
    "plan_materialization",
    "replay",
]
