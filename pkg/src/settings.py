from pydantic import AliasChoices, Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="COTLAB_", env_file=".env", extra="ignore"
    )

    log_level: str = Field(default="info")
    out_dir: str = Field(default="runs")
    default_seed: int = Field(default=0)

    # Bounded pool for pilot runs, repeats and simulations
    workers: int = Field(default=1, ge=1)

    # Search preset override, see src.search.SearchPreset
    search_preset: str | None = Field(
        default=None,
        validation_alias=AliasChoices("COTLAB_SEARCH_PRESET", "SEARCH_PRESET"),
    )

    run_slow: bool = Field(default=False)


settings = Settings()  # singleton for simplicity
