import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import ConfigError, ConstructionError, NotHType, PipelineGuard, SignUncertain
from app.core.logging import get_logger
from app.models.schemas import (
    AlgebraSummary,
    CertifyReport,
    CompopReport,
    ConstructArtifact,
    Provenance,
    RunConfig,
    SemmesReport,
    ADScanReport,
)
from app.services.algebra_service import algebra_from_config
from app.services.group_service import CarnotGroup
from app.services.ifs_service import IfsSystem, construct_system, diameter_upper_bound, neighborhood_inclusion_check
from app.services.measure_service import ad_regularity_scan, measure_at_depth
from app.services.potential_service import HTypeKernel
from app.services.singint_service import (
    TruncationGrid,
    compop_check,
    depth_ladder,
    scale_invariance_residual,
    semmes_gap,
    unb_condition,
)
from app.utils import serialization

logger = get_logger(__name__)

SYSTEM_FILE = "system.json"
CERTIFICATE_FILE = "certificate.json"
FAILURE_FILE = "construct_failure.json"
CLOUD_FILE = "cloud.cnlb"


def load_config(path: Optional[str]) -> RunConfig:
    """Parse and validate a TOML run document; every failure is a ConfigError."""
    path = path or settings.config_path
    if not path:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config not found: {path}", {"path": str(path)}) from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}", {"path": str(path)}) from e
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(x) for x in first["loc"])
        raise ConfigError(
            f"{where}: {first['msg']}",
            {"path": str(path), "errors": [{"loc": list(map(str, err["loc"])), "msg": err["msg"]} for err in e.errors()]},
        ) from e


class PipelineService:
    """Runs one command against one configuration and persists its artifacts."""

    def __init__(self, config: RunConfig, seed: Optional[int] = None, out: Optional[str] = None):
        self.config = config
        self.seed = seed if seed is not None else (config.seed if config.seed is not None else settings.default_seed)
        self.out = Path(out or config.output_dir or settings.output_dir)
        self.config_hash = serialization.config_hash(config)

    def provenance(self) -> Provenance:
        return Provenance(
            config_hash=self.config_hash,
            seed=self.seed,
            library_version=settings.app_version,
            deterministic=settings.deterministic,
        )

    # Stages

    def validate(self) -> AlgebraSummary:
        group = CarnotGroup(algebra_from_config(self.config.group))
        summary = group.algebra.summary()
        logger.info("Validated configuration", preset=summary.preset, Q=group.Q, m=group.m, step=group.step)
        return summary

    def construct(self, depth: Optional[int] = None) -> ConstructArtifact:
        started = time.perf_counter()
        depth = depth or self.config.depths.construct
        try:
            system = construct_system(self.config, seed=self.seed)
        except ConstructionError as e:
            path = serialization.write_json(self.out / FAILURE_FILE, {"provenance": self.provenance(), **e.to_dict()})
            logger.error("Construction failed", error=e.code, reason=e.message, out=str(path),
                         attempts=len(e.details.get("attempts", [])))
            raise
        inclusion = neighborhood_inclusion_check(system, samples=200)
        if not inclusion.ok:
            logger.warning("Composed words left their neighborhoods", violations=inclusion.violations)
        artifact = ConstructArtifact(provenance=self.provenance(), system=system.to_record(),
                                     certificate=system.certificate)
        serialization.write_json(self.out / SYSTEM_FILE, artifact)
        serialization.write_json(self.out / CERTIFICATE_FILE, system.certificate)
        mu = measure_at_depth(system, depth)
        serialization.write_cloud(self.out / CLOUD_FILE, mu.points, mu.weights)
        logger.info("Persisted construction", out=str(self.out), M=system.M, depth=depth,
                    elapsed_ms=round((time.perf_counter() - started) * 1000, 2))
        return artifact

    def load_system(self, path: Optional[str] = None) -> IfsSystem:
        """Rebuild a persisted system; refuse anything without a passing certificate."""
        path = Path(path) if path else self.out / SYSTEM_FILE
        raw = serialization.read_json(path)
        try:
            artifact = ConstructArtifact.model_validate(raw)
        except ValidationError as e:
            raise PipelineGuard(f"{path} is not a construction artifact", {"path": str(path)}) from e
        if artifact.certificate is None or not artifact.certificate.certified:
            raise PipelineGuard("the system has no passing separation certificate", {"path": str(path)})
        system = IfsSystem.from_record(artifact.system)
        system.certificate = artifact.certificate
        return system

    def _kernel(self, system: IfsSystem) -> HTypeKernel:
        if system.kernel is None:
            raise NotHType(
                f"{system.group.algebra.name} has no closed-form kernel",
                {"group": system.group.algebra.name},
            )
        return system.kernel

    def certify(self, system_path: Optional[str] = None, depths: Optional[Sequence[int]] = None) -> CertifyReport:
        system = self.load_system(system_path)
        ker = self._kernel(system)
        depths = list(depths or self.config.depths.certify)
        component = system.cone.component + 1
        theta = self.config.quadrature.theta
        ladder = depth_ladder(ker, system, component, (0,), depths, theta=theta)
        last = unb_condition(ker, system, component, (0,), depths[-1], theta=theta)
        residual = scale_invariance_residual(ker, system, max(2, depths[0]))
        report = CertifyReport(
            provenance=self.provenance(),
            unb=last,
            ladder=ladder,
            scale_invariance_residual=residual,
            ad_scan=self.scan_ad(system, write=False),
            semmes=self.semmes(system, write=False),
        )
        serialization.write_json(self.out / "certify.json", report)
        self._table("ladder", [r.model_dump() for r in ladder], "depth", ["value", "error_bar"], "")
        if last.certified_sign is None:
            raise SignUncertain(
                f"sign not certified at depth {last.depth}",
                {"value": last.value, "error_bar": last.error_bar, "depth": last.depth},
            )
        return report

    def scan_ad(self, system: Optional[IfsSystem] = None, depth: Optional[int] = None, write: bool = True) -> ADScanReport:
        system = system or self.load_system()
        mu = measure_at_depth(system, depth or self.config.depths.ad_scan)
        q = self.config.quadrature
        report = ad_regularity_scan(mu, n_centers=q.ad_centers, n_radii=q.ad_radii, seed=self.seed,
                                    diameter=diameter_upper_bound(system))
        if write:
            serialization.write_json(self.out / "ad_scan.json", report)
        return report

    def semmes(self, system: Optional[IfsSystem] = None, depth: Optional[int] = None, write: bool = True) -> SemmesReport:
        system = system or self.load_system()
        ker = self._kernel(system)
        mu = measure_at_depth(system, depth or self.config.depths.ad_scan)
        q = self.config.quadrature
        diam = diameter_upper_bound(system)
        grid = TruncationGrid.for_measure(mu, diam, q.grid_points)
        report = semmes_gap(ker, mu, q.far_samples, q.near_samples, grid, seed=self.seed, diameter=diam)
        if write:
            serialization.write_json(self.out / "semmes.json", report)
            self._table("semmes", report.rows, "kind", ["t_star", "t_floor"], "")
        return report

    def compop(self, outer: Sequence[int], inner: Sequence[int], depth: Optional[int] = None,
               system_path: Optional[str] = None) -> CompopReport:
        system = self.load_system(system_path)
        ker = self._kernel(system)
        mu = measure_at_depth(system, depth or max(self.config.depths.ad_scan, len(inner) + 1))
        report = compop_check(ker, system, mu, outer, inner, system.cone.component + 1,
                              self.config.quadrature.probes, seed=self.seed)
        serialization.write_json(self.out / "compop.json", report)
        self._table("compop", report.rows, "left", ["annulus", "excess"], "")
        return report

    def export(self, depth: Optional[int] = None, system_path: Optional[str] = None) -> Dict[str, Any]:
        """Point cloud, centers table and gnuplot scripts for every report in the output directory."""
        system = self.load_system(system_path)
        depth = depth or self.config.depths.construct
        mu = measure_at_depth(system, depth)
        written: List[str] = [str(serialization.write_cloud(self.out / f"cloud-depth{depth}.cnlb", mu.points, mu.weights))]
        centers = [{f"x{k + 1}": float(v) for k, v in enumerate(c)} for c in system.centers]
        written.append(str(serialization.write_csv(self.out / "centers.csv", centers)))
        certify = self.out / "certify.json"
        if certify.exists():
            rows = serialization.read_json(certify)["ladder"]
            written += self._table("ladder", rows, "depth", ["value", "error_bar"], "")
        ad = self.out / "ad_scan.json"
        if ad.exists():
            radii = serialization.read_json(ad)["radii"]
            written += self._table("ad_radii", [{"index": i, "radius": r} for i, r in enumerate(radii)],
                                   "index", ["radius"], "y")
        logger.info("Exported artifacts", files=len(written), depth=depth)
        return {"files": written, "depth": depth, "atoms": len(mu)}

    def _table(self, name: str, rows: List[Dict[str, Any]], x: str, ys: List[str], logscale: str) -> List[str]:
        if not rows:
            return []
        columns = [x] + [y for y in ys if y != x] + sorted({k for r in rows for k in r} - {x, *ys})
        csv_path = serialization.write_csv(self.out / f"{name}.csv", rows, columns)
        plot = serialization.write_gnuplot(self.out / f"{name}.gp", csv_path.name, x, ys, columns, name, logscale)
        return [str(csv_path), str(plot)]
