"""
Paramètres d'exécution lus depuis l'environnement (préfixe FGSMGLM_) ou un fichier .env.
"""

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class FgsmSettings(BaseSettings):
    """Paramètres globaux de la CLI et du harnais d'expériences."""

    model_config = SettingsConfigDict(
        env_prefix="FGSMGLM_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    output_dir: str = "./runs"
    cache_dir: str = "./cache"
    cache_enabled: bool = True
    cache_ttl: int = Field(7 * 86400, gt=0)
    threads: int = Field(1, ge=1)
    log_level: str = "INFO"
    log_json: bool = False
    moment_samples: int = Field(100_000, ge=10_000)

    # Seuils d'acceptation appliqués avec --check
    check_slope_bound: float = Field(0.15, gt=0)
    check_ks_bound: float = Field(0.10, gt=0)


def get_settings() -> FgsmSettings:
    """Retourne une instance fraîche (relit l'environnement)."""
    return FgsmSettings()
