#!/usr/bin/env python3
# Coalition-guided perturbation saliency
from pycoalition.util.version import package_version

__version__ = package_version()
