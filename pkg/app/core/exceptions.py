from typing import Any, Dict, Optional


class CarnotLabError(Exception):
    """Base error carrying a machine-readable code and context."""

    exit_code = 1
    code = "carnot_lab_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.code, "message": self.message, "details": self.details}


class ConfigError(CarnotLabError):
    """Run configuration failed schema validation."""
    exit_code = 2
    code = "config_error"


# Algebra errors

class AlgebraError(CarnotLabError):
    exit_code = 3
    code = "algebra_error"


class DimensionMismatch(AlgebraError):
    code = "dimension_mismatch"


class AntisymmetryViolation(AlgebraError):
    code = "antisymmetry_violation"


class JacobiViolation(AlgebraError):
    code = "jacobi_violation"


class GradingViolation(AlgebraError):
    code = "grading_violation"


class StratificationFailure(AlgebraError):
    code = "stratification_failure"


class UnsupportedStep(AlgebraError):
    code = "unsupported_step"


# Group errors

class GroupError(CarnotLabError):
    exit_code = 3
    code = "group_error"


class NonPositiveScale(GroupError):
    code = "non_positive_scale"


class QBelowThree(GroupError):
    code = "q_below_three"


class EmptyIntersection(CarnotLabError):
    exit_code = 4
    code = "empty_intersection"


# Potential errors

class PotentialError(CarnotLabError):
    exit_code = 3
    code = "potential_error"


class NotHType(PotentialError):
    code = "not_h_type"


class OriginSingularity(PotentialError):
    code = "origin_singularity"


class DegenerateConfiguration(PotentialError):
    code = "degenerate_configuration"


# Construction errors

class ConstructionError(CarnotLabError):
    exit_code = 4
    code = "construction_error"


class ConeViolation(ConstructionError):
    code = "cone_violation"


class BallTooLarge(ConstructionError):
    code = "ball_too_large"


class ShrinkEpsilon(ConstructionError):
    code = "shrink_epsilon"


class CertificationFailure(ConstructionError):
    code = "certification_failure"


class DepthOverflow(ConstructionError):
    code = "depth_overflow"


class InvalidNesting(ConstructionError):
    code = "invalid_nesting"


# Quadrature errors

class QuadratureError(CarnotLabError):
    exit_code = 5
    code = "quadrature_error"


class TruncationBelowResolution(QuadratureError):
    """A truncation radius below what the configured depth resolves; a configuration problem."""
    exit_code = 2
    code = "truncation_below_resolution"


class SignUncertain(QuadratureError):
    code = "sign_uncertain"


class InsufficientDepth(QuadratureError):
    exit_code = 2
    code = "insufficient_depth"


class PipelineGuard(CarnotLabError):
    """A command was run against inputs that lack a required certificate."""
    exit_code = 6
    code = "pipeline_guard"
