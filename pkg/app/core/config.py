from pydantic_settings import BaseSettings
from typing import Optional
import os


class Settings(BaseSettings):
    # Application settings
    app_name: str = "Carnot Cantor Lab"
    app_version: str = "1.0.0"
    environment: str = "development"
    debug: bool = False

    # Logging settings
    log_level: str = "INFO"
    log_format: str = "json"

    # Sampling settings
    default_seed: int = 7
    sphere_samples: int = 4096
    radius_samples: int = 33
    coset_samples: int = 100_000
    triangle_samples: int = 100_000
    cone_samples: int = 20_000

    # Construction settings
    epsilon_start: float = 0.2
    epsilon_retries: int = 12
    safety_c0: float = 1.25
    safety_c1: float = 1.25
    safety_smooth: float = 1.25
    gap_fraction: float = 0.6
    balance: float = 0.25
    max_centers: int = 4096
    box_pair_budget: int = 2_000_000
    separation_depth: int = 3
    cloud_budget: int = 50_000

    # Quadrature settings
    node_budget: int = 5_000_000
    barnes_hut_theta: float = 0.25
    grid_points: int = 12
    ad_centers: int = 64
    ad_radii: int = 12

    # Execution settings
    workers: int = int(os.getenv("CARNOT_WORKERS", "1"))
    deterministic: bool = True
    reduction_block: int = 4096
    output_dir: str = "runs"
    config_path: Optional[str] = None

    class Config:
        env_file = ".env"
        env_prefix = "CARNOT_"
        case_sensitive = False


settings = Settings()
