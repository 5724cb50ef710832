"""
Gestionnaire de cache disque pour les calculs Monte Carlo coûteux.
Utilise diskcache pour la persistance locale entre deux exécutions de la CLI.
"""

import hashlib
import json
from typing import Any, Callable, Optional

import structlog
from diskcache import Cache

logger = structlog.get_logger(__name__)


class CacheManager:
    """Cache des moments de population (M, V, E|ε|) indexés par modèle, taille MC et graine."""

    def __init__(self, cache_dir: str = "./cache", ttl: int = 7 * 86400, size_limit: int = 2**30):
        """
        Initialise le gestionnaire de cache.

        Args:
            cache_dir: Dossier de cache
            ttl: Durée de vie en secondes (défaut : 7 jours)
            size_limit: Taille maximale en octets (défaut : 1 Go)
        """
        self.cache_dir = cache_dir
        self.ttl = ttl
        self.moment_cache = Cache(f"{cache_dir}/moments", size_limit=size_limit)
        self.moment_cache.stats(enable=True)

        logger.info("Cache manager initialized", cache_dir=cache_dir, ttl=ttl)

    def _generate_key(self, *args, **kwargs) -> str:
        """Génère une clé md5 à partir des arguments sérialisés en JSON."""
        key_data = json.dumps({"args": args, "kwargs": kwargs}, sort_keys=True)
        return hashlib.md5(key_data.encode()).hexdigest()

    def get_or_compute(self, compute: Callable[[], Any], *key_parts, **key_kwargs) -> Any:
        """Retourne la valeur en cache ou la calcule puis la stocke."""
        cache_key = self._generate_key(*key_parts, **key_kwargs)

        cached = self.moment_cache.get(cache_key)
        if cached is not None:
            logger.debug("Moment cache hit", key=cache_key[:8])
            return cached

        logger.debug("Moment cache miss", key=cache_key[:8])
        result = compute()
        self.moment_cache.set(cache_key, result, expire=self.ttl)
        return result

    def get_cache_stats(self) -> dict:
        """Retourne les statistiques du cache."""
        hits, misses = self.moment_cache.stats()
        return {
            "moments": {
                "size": len(self.moment_cache),
                "volume": self.moment_cache.volume(),
                "hits": hits,
                "misses": misses,
            }
        }

    def clear_cache(self):
        """Vide le cache."""
        self.moment_cache.clear()
        logger.info("Moment cache cleared")

    def close(self):
        self.moment_cache.close()


_cache_manager: Optional[CacheManager] = None


def get_cache_manager(cache_dir: str = "./cache", ttl: int = 7 * 86400) -> CacheManager:
    """Instance partagée, créée au premier appel (pas de dossier créé à l'import)."""
    global _cache_manager
    if _cache_manager is None or _cache_manager.cache_dir != cache_dir:
        _cache_manager = CacheManager(cache_dir=cache_dir, ttl=ttl)
    return _cache_manager
