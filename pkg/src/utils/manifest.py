"""
Run Manifest
Records every emitted file with its content hash plus the configuration,
seed, prior scales and package versions of the run.
"""

import hashlib
import json
import logging
import platform
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
TRACKED_PACKAGES = ('numpy', 'scipy', 'pandas', 'pydantic', 'click')


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> Dict[str, Optional[str]]:
    versions: Dict[str, Optional[str]] = {'python': platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_manifest(
    output_dir: Union[str, Path],
    command: str,
    config: Dict[str, Any],
    config_hash: str,
    seed: int,
    files: Iterable[Union[str, Path]],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write ``manifest.json`` into ``output_dir``.

    Files are listed relative to ``output_dir`` with their sha256, sorted by
    path so reruns produce identical listings.

    Args:
        output_dir: Directory holding the command outputs
        command: CLI command name
        config: Merged configuration as plain data
        config_hash: sha256 of the canonical configuration
        seed: Master seed
        files: Paths written by the command
        extra: Command-specific provenance (e.g. resolved prior SDs)
    """
    output_dir = Path(output_dir)
    listing = {}
    for path in files:
        path = Path(path)
        if path.name == MANIFEST_NAME or not path.exists():
            continue
        try:
            key = str(path.resolve().relative_to(output_dir.resolve()))
        except ValueError:
            key = str(path)
        listing[key] = file_sha256(path)

    manifest = {
        'command': command,
        'created_at': datetime.now(timezone.utc).isoformat(),
        'seed': seed,
        'config_hash': config_hash,
        'config': config,
        'versions': package_versions(),
        'files': dict(sorted(listing.items())),
    }
    if extra:
        manifest.update(extra)

    path = output_dir / MANIFEST_NAME
    output_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str), encoding='utf-8')
    logger.info(f"Manifest with {len(listing)} files written to {path}")
    return path


def read_manifest(output_dir: Union[str, Path]) -> Dict[str, Any]:
    path = Path(output_dir) / MANIFEST_NAME
    return json.loads(path.read_text(encoding='utf-8'))
