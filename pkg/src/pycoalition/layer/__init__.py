#!/usr/bin/env python3
#
# Layer loader: each layer kind lives in its own module, named after its class
#
from pycoalition.layer.layer import Layer
from pycoalition.util.types import LayerKind
import importlib
import numpy as np


def create_layer(schema: dict, rng: np.random.Generator | None = None) -> Layer:
    """
    Create a layer from its schema ({"kind": ..., parameters...})
    """
    try:
        kind = LayerKind(str(schema["kind"]).strip().lower())
    except (KeyError, ValueError):
        raise ValueError(f"unsupported layer kind: {schema.get('kind')}")

    module = importlib.import_module(f"pycoalition.layer.{kind.module}", "pycoalition")
    handle = getattr(module, kind.module)
    return handle(schema, rng)


__all__ = ["Layer", "create_layer"]
