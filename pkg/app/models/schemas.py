from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, Dict, Any, List, Literal, Tuple, Union
from enum import Enum


class GroupPreset(str, Enum):
    """Named group instances."""
    HEISENBERG_1 = "heisenberg-1"
    HEISENBERG_2 = "heisenberg-2"
    H_TYPE = "h-type"
    ABELIAN_2 = "abelian-2"
    ABELIAN_3 = "abelian-3"
    ENGEL = "engel"
    INLINE = "inline"


class MetricKind(str, Enum):
    """Homogeneous norm driving the metric backend."""
    BOX = "box"
    GAUGE = "gauge"


class CenterRule(str, Enum):
    """How the centers p_1..p_M are placed on the coset."""
    GREEDY = "greedy"
    LATTICE = "lattice"
    GRID = "grid"


class RadiusRule(str, Enum):
    """How the contraction ratio r is derived from M and epsilon."""
    STRICT = "strict"
    BALANCED = "balanced"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Run configuration

class GroupConfig(StrictModel):
    """Group instance: a preset or inline structure constants."""
    preset: GroupPreset = GroupPreset.HEISENBERG_1
    center_dim: int = Field(default=1, ge=1, le=3)
    multiplicity: int = Field(default=1, ge=1, le=4)
    layers: Optional[List[int]] = None
    brackets: List[Tuple[int, int, int, int, int]] = Field(default_factory=list)

    @field_validator("layers")
    @classmethod
    def validate_layers(cls, v):
        if v is not None and (not v or any(d < 1 for d in v)):
            raise ValueError("layers must be a non-empty list of positive integers")
        return v

    @field_validator("brackets")
    @classmethod
    def validate_brackets(cls, v):
        for line, (i, j, k, num, den) in enumerate(v, start=1):
            if min(i, j, k) < 1:
                raise ValueError(f"bracket triple {line}: indices are 1-based")
            if den == 0:
                raise ValueError(f"bracket triple {line}: zero denominator")
        return v

    @model_validator(mode="after")
    def validate_inline(self):
        if self.preset == GroupPreset.INLINE and self.layers is None:
            raise ValueError("inline group requires layers")
        return self


class MetricConfig(StrictModel):
    """Metric backend selection."""
    kind: MetricKind = MetricKind.GAUGE
    c_gamma: float = Field(default=1.0, gt=0)


class ConeConfig(StrictModel):
    """Dilation cone: kernel component and sphere ball."""
    component: int = Field(default=1, ge=1)
    radius: Union[Literal["auto"], float] = "auto"
    margin: float = Field(default=0.1, ge=0, lt=1)

    @field_validator("radius")
    @classmethod
    def validate_radius(cls, v):
        if v != "auto" and v <= 0:
            raise ValueError("cone radius must be positive")
        return v


class ConstructionConfig(StrictModel):
    """Knobs of the epsilon certification loop."""
    epsilon_start: Optional[float] = Field(default=None, gt=0, le=1)
    retries: Optional[int] = Field(default=None, ge=1, le=64)
    safety_c0: Optional[float] = Field(default=None, ge=1)
    safety_c1: Optional[float] = Field(default=None, ge=1)
    center_rule: CenterRule = CenterRule.GREEDY
    radius_rule: RadiusRule = RadiusRule.STRICT
    balance: Optional[float] = Field(default=None, gt=0, lt=1)
    gap_fraction: Optional[float] = Field(default=None, gt=0, le=1)
    ball_radius: Union[Literal["auto"], float] = "auto"
    coset_samples: Optional[int] = Field(default=None, ge=16)
    sphere_samples: Optional[int] = Field(default=None, ge=16)
    max_centers: Optional[int] = Field(default=None, ge=2)
    grid: Optional[List[int]] = None

    @field_validator("grid")
    @classmethod
    def validate_grid(cls, v):
        if v is not None and (not v or min(v) < 1):
            raise ValueError("grid counts must be positive integers, one per coset coordinate")
        return v

    @model_validator(mode="after")
    def grid_needs_counts(self):
        if self.center_rule == CenterRule.GRID and self.grid is None:
            raise ValueError("center_rule \"grid\" needs construction.grid")
        return self


class DepthConfig(StrictModel):
    """Word-tree depths used by each stage."""
    construct: int = Field(default=4, ge=1, le=12)
    certify: List[int] = Field(default_factory=lambda: [3, 4, 5])
    ad_scan: int = Field(default=4, ge=1, le=12)

    @field_validator("certify")
    @classmethod
    def validate_ladder(cls, v):
        if not v or sorted(v) != v or v[0] < 1:
            raise ValueError("certify depths must be an increasing list of positive integers")
        return v


class QuadratureConfig(StrictModel):
    """Singular-integral evaluation knobs."""
    theta: Optional[float] = Field(default=None, ge=0, lt=1)
    grid_points: Optional[int] = Field(default=None, ge=1, le=256)
    ad_centers: Optional[int] = Field(default=None, ge=1)
    ad_radii: Optional[int] = Field(default=None, ge=2)
    far_samples: int = Field(default=16, ge=1)
    near_samples: int = Field(default=16, ge=1)
    probes: int = Field(default=8, ge=1)


class RunConfig(StrictModel):
    """One configuration document drives one run."""
    seed: Optional[int] = Field(default=None, ge=0, lt=2**64)
    output_dir: Optional[str] = None
    group: GroupConfig = Field(default_factory=GroupConfig)
    metric: MetricConfig = Field(default_factory=MetricConfig)
    cone: ConeConfig = Field(default_factory=ConeConfig)
    construction: ConstructionConfig = Field(default_factory=ConstructionConfig)
    depths: DepthConfig = Field(default_factory=DepthConfig)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)


# Persisted artifacts

class Provenance(BaseModel):
    """Reproducibility stamp embedded in every artifact."""
    config_hash: str
    seed: int
    library_version: str
    deterministic: bool = True


class AlgebraSummary(BaseModel):
    """Result of validating a group instance."""
    preset: str
    layer_dims: List[int]
    step: int
    total_dim: int
    horizontal_dim: int
    homogeneous_dimension: int
    bch_terms: int


class ConstructionParameters(BaseModel):
    """Derived constants of one construction attempt."""
    epsilon: float
    r: float
    r0: float
    M: int
    Q: int
    c0: float
    c1: float
    ball_diameter: float
    radius_rule: RadiusRule
    mass_identity_residual: float
    packing_lower_bound_ok: Optional[bool] = None
    kprime_dimension: float


class PieceGap(BaseModel):
    """Certified nearest-neighbour gap of one first-level piece."""
    piece: int
    nearest: int
    lower: float
    upper: float


class ProjectionGap(BaseModel):
    """S_0 versus the other pieces, through the horizontal projection."""
    a: float
    s0_interval: Tuple[float, float]
    rest_interval: Tuple[float, float]
    analytic_gap: float
    cloud_s0_max: float
    cloud_rest_min: float


class SeparationCertificate(BaseModel):
    """Raw gap data plus the verdicts derived from it."""
    depth: int
    cloud_depth: int
    invariant_box: List[List[float]] = Field(default_factory=list)
    backend: MetricKind
    seed: int
    target_gap: float
    gap_fraction: float
    quasi_triangle_constant: float
    radius_bound: float
    max_node_diameter: float
    piece_gaps: List[PieceGap]
    min_gap_lower: float
    s0_gap_lower: float
    search_exhausted: bool = False
    projection: ProjectionGap
    alpha_k: float
    alpha_by_letter: List[float]
    alpha_length_two: float
    r_plus_r0: float
    centers_ok: bool
    cone_margin: float
    nodes_in_cone: bool
    failures: List[str] = Field(default_factory=list)
    certified: bool


class InclusionReport(BaseModel):
    """Composed-word displacements against the neighborhood radii."""
    checked: int
    violations: int
    max_displacement: float
    max_ratio: float
    geometric_bound: float
    ok: bool


class SystemRecord(BaseModel):
    """Everything needed to rebuild an IfsSystem."""
    group: Dict[str, Any]
    metric: MetricKind
    quasi_triangle_constant: float
    c_gamma: float
    direction: List[float]
    a: float
    cone_center: List[float]
    cone_radius: float
    cone_component: int
    ball_center: List[float]
    ball_radius: float
    centers: List[List[float]]
    parameters: ConstructionParameters
    seed: int = 0
    attempts: List[Dict[str, Any]] = Field(default_factory=list)


class ConstructArtifact(BaseModel):
    provenance: Provenance
    system: SystemRecord
    certificate: SeparationCertificate


class UnbResult(BaseModel):
    """Quadrature of the non-vanishing integral with its error bar."""
    component: int
    word: List[int]
    depth: int
    value: float
    error_bar: float
    certified_sign: Optional[int] = None
    nodes: int


class LadderRow(BaseModel):
    depth: int
    value: float
    error_bar: float
    difference: Optional[float] = None
    ratio: Optional[float] = None


class ADScanReport(BaseModel):
    """Empirical two-sided density bounds of the measure."""
    depth: int
    c_low: float
    c_high: float
    regularity_ratio: Optional[float]
    slope: Optional[float]
    radii: List[float]
    insufficient_depth: bool = False


class SemmesReport(BaseModel):
    """Maximal versus floor-truncated transform over probe points."""
    depth: int
    grid: List[float]
    t_star_max: float
    t_floor_max: float
    gap: float
    upper_density: Optional[float] = None
    rows: List[Dict[str, float]] = Field(default_factory=list)


class CompopReport(BaseModel):
    """Left side, annulus term and the empirical A_K."""
    outer_word: List[int]
    inner_word: List[int]
    alpha_k: float
    left_max: float
    annulus_max: float
    a_k: float
    rows: List[Dict[str, float]] = Field(default_factory=list)


class CertifyReport(BaseModel):
    provenance: Provenance
    unb: UnbResult
    ladder: List[LadderRow]
    scale_invariance_residual: float
    ad_scan: Optional[ADScanReport] = None
    semmes: Optional[SemmesReport] = None
