"""
Reproducibility metadata for simcache-lab outputs
Every artifact carries a block of the form:
- seeds: the seeds that drove any randomness
- config_hash: sha256 of the canonical JSON of the effective configuration
- run_id: first 12 hex digits of config_hash, prefixed with the command name
- artifact_version: installed package version
"""
import hashlib
import json
import logging
from importlib import metadata
from typing import Any, Dict, Iterable, Optional

from utils.results_export import ResultsExporter

logger = logging.getLogger(__name__)

PACKAGE_NAME = 'simcache-lab'
FALLBACK_VERSION = '0.1.0'


class RunIdentity:
    """Derives stable identifiers for a run from its configuration"""

    @staticmethod
    def artifact_version() -> str:
        try:
            return metadata.version(PACKAGE_NAME)
        except metadata.PackageNotFoundError:
            logger.debug(f"{PACKAGE_NAME} is not installed; reporting version {FALLBACK_VERSION}")
            return FALLBACK_VERSION

    @staticmethod
    def config_hash(config: Any) -> str:
        """sha256 over sorted-key JSON so dict ordering never changes the hash"""
        canonical = json.dumps(ResultsExporter.serialize_value(config), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @staticmethod
    def run_id(command: str, config: Any) -> str:
        return f"{command}-{RunIdentity.config_hash(config)[:12]}"

    @staticmethod
    def block(command: str, config: Any, seeds: Optional[Iterable[int]] = None) -> Dict[str, Any]:
        return {
            'run_id': RunIdentity.run_id(command, config),
            'seeds': sorted({int(s) for s in seeds}) if seeds is not None else [],
            'config_hash': RunIdentity.config_hash(config),
            'artifact_version': RunIdentity.artifact_version(),
        }
