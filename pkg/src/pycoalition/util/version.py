#!/usr/bin/env python3
import importlib.metadata
from datetime import datetime


def package_version() -> str:
    """
    pycoalition version string (written into manifests and checkpoint headers)
    """
    try:
        return importlib.metadata.version("pycoalition")
    except importlib.metadata.PackageNotFoundError:
        # Heads up! This means that the version for local development changes daily,
        # so manifests written on different days won't carry the same version string
        return f"local-dev-{datetime.today().strftime('%Y-%m-%d')}"
