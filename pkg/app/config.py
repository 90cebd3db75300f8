"""Application configuration loaded from environment variables."""

from pydantic_settings import BaseSettings
from pydantic import Field


class Settings(BaseSettings):
    """All pipeline settings, loaded from the environment or a .env file.

    Command-line flags override these values; these values override the
    defaults baked into the compute functions.
    """

    # Storage
    data_dir: str = Field(default="./data", alias="PROSTATE_WSI_DATA_DIR")

    # Slide packages
    tile_size: int = Field(default=512, alias="TILE_SIZE")
    default_mpp: float = Field(default=0.5, alias="DEFAULT_MPP")

    # Stain decomposition
    stain_lambda: float = Field(default=1.0, alias="STAIN_LAMBDA")
    stain_sample_pixels: int = Field(default=1_048_576, alias="STAIN_SAMPLE_PIXELS")
    stain_grad_tol: float = Field(default=1e-10, alias="STAIN_GRAD_TOL")

    # Tumor mask
    kmeans_k: int = Field(default=3, alias="KMEANS_K")
    kmeans_max_iter: int = Field(default=100, alias="KMEANS_MAX_ITER")
    mask_max_pixels: int = Field(default=4_000_000, alias="MASK_MAX_PIXELS")

    # Patches / grading
    patch_size: int = Field(default=256, alias="PATCH_SIZE")
    patches_per_slide: int = Field(default=500, alias="PATCHES_PER_SLIDE")

    # Nuclei
    nucleus_threshold: int = Field(default=128, alias="NUCLEUS_THRESHOLD")
    nucleus_min_area_um2: float = Field(default=10.0, alias="NUCLEUS_MIN_AREA_UM2")
    nucleus_max_area_um2: float = Field(default=120.0, alias="NUCLEUS_MAX_AREA_UM2")
    graph_radius_um: float = Field(default=30.0, alias="GRAPH_RADIUS_UM")

    # Pattern detectors
    nucleoli_separation: float = Field(default=50.0, alias="NUCLEOLI_SEPARATION")
    nucleoli_min_dark_weight: float = Field(default=0.05, alias="NUCLEOLI_MIN_DARK_WEIGHT")
    lumen_channel_threshold: int = Field(default=200, alias="LUMEN_CHANNEL_THRESHOLD")
    lumen_min_roundness: float = Field(default=0.7, alias="LUMEN_MIN_ROUNDNESS")
    cribriform_min_lumens: int = Field(default=3, alias="CRIBRIFORM_MIN_LUMENS")
    gland_dilation_um: float = Field(default=15.0, alias="GLAND_DILATION_UM")

    # Parallelism
    jobs: int = Field(default=1, alias="JOBS")

    # App
    app_env: str = Field(default="development", alias="APP_ENV")
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "extra": "ignore",
    }


settings = Settings()
