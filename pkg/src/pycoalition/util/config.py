#!/usr/bin/env python3
#
# Run configuration: sectioned settings read from YAML, overridable by dotted
# names on the command line, echoed in full into every run's manifest
#
from pycoalition.util.value_format import value_format
from pycoalition.util.version import package_version
from pycoalition.util.files import atomic_write
import os
import copy
import yaml
import logging

# Environment variable naming the output root (used when the config doesn't set one)
OUTPUT_ENV = "PYCOALITION_OUTPUT"

DEFAULTS = {
    "model": {
        "checkpoint": "model.cpfc",  # relative paths resolve against the output root
        "channels": [16, 32, 32],  # conv widths of the default architecture
        "num_classes": 4,
    },
    "training": {
        "epochs": 20,
        "lr": 0.03,
        "batch_size": 16,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "augment": True,  # random flips + background erasing
        "seed": 0,
    },
    "extraction": {
        "clusters": 20,  # l, initial cluster count
        "min_clusters": 4,  # k, stop once this many labels remain
        "lam": 1.0,  # continuity weight
        "max_iters": 200,
        "lr": 0.1,
        "seed": 0,
    },
    "perturbation": {
        "mu": 100.0,
        "v": 1.0,
        "sigma": 1.0,
        "steps": 300,
        "lr": 0.1,
        "a_samples": 1,
        "mode": "mask_blend",
        "hinge": "preserve",  # "literal" flips the confidence margin
        "baseline": "zeros",
        "blur_sigma": 2.0,  # blur baseline width (also used when scoring)
        "feasibility": True,  # scale the final mask toward 0 until t survives at a = 1
        "seed": 0,
    },
    "evaluation": {
        "retention": 0.4,
        "fractions": [round(0.1 * i, 1) for i in range(11)],
        "patch": 8,  # occlusion patch side
        "stride": 4,  # occlusion step
        "method": "coalition",
        "baseline": "zeros",  # retention fill
        "clamp_ad": False,
    },
    "dataset": {
        "path": "shapes.npz",
        "n": 500,
        "size": 32,
        "seed": 0,
    },
    "pipeline": {
        "workers": 1,
        "max_samples": 0,  # 0 = every test image
        "seeds": [0],  # perturbation seeds used by the ablation
    },
    "output": {
        "directory": None,  # None = $PYCOALITION_OUTPUT, else ./output
    },
}


class RunConfig:
    """
    Fully resolved run settings

    Unknown sections or keys are rejected so typos in config files and
    overrides fail loudly instead of being silently ignored.
    """

    def __init__(self, sections: dict | None = None) -> None:
        self._logger = logging.getLogger("pycoalition.config")
        self.sections = copy.deepcopy(DEFAULTS)
        for section, values in (sections or {}).items():
            for key, value in (values or {}).items():
                self.set(f"{section}.{key}", value)

    def __repr__(self) -> str:
        return f"RunConfig({self.sections})"

    def __getitem__(self, section: str) -> dict:
        if section not in self.sections:
            raise KeyError(f"unknown config section {section}")
        return self.sections[section]

    # =================================================================================================================

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        """
        Read a YAML document with one mapping per section (.yaml / .yml), or
        any other file as flat key = value text (see from_text)
        """
        path = os.path.realpath(str(path))
        if not os.path.exists(path):
            raise FileNotFoundError(f"config not found: {path}")
        with open(path, "r") as f:
            text = f.read()
        if os.path.splitext(path)[1].lower() not in (".yaml", ".yml"):
            return cls.from_text(text, path)

        document = yaml.safe_load(text) or {}
        if not isinstance(document, dict):
            raise ValueError(f"config {path} must be a mapping of sections")
        return cls(document)

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "RunConfig":
        """
        Flat key = value lines: either dotted keys (perturbation.v = 0) or
        plain keys under a [section] header. '#' starts a comment; values are
        typed like command-line overrides.
        """
        cfg = cls()
        section = None
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{source}:{number}: expected key = value, got '{raw.strip()}'")
            key = key.strip()
            if "." not in key:
                if section is None:
                    raise ValueError(f"{source}:{number}: key '{key}' outside any [section]")
                key = f"{section}.{key}"
            cfg.set(key, value.strip())
        return cfg

    def get(self, dotted: str):
        section, key = self._split(dotted)
        return self.sections[section][key]

    def set(self, dotted: str, value) -> None:
        """
        Set one key. Text values (command-line overrides) are typed like the
        default they replace: numbers, booleans, nulls, comma-separated lists.
        """
        section, key = self._split(dotted)
        current = self.sections[section][key]

        if isinstance(value, str) and isinstance(current, list):
            value = [value_format(v) for v in value.split(",") if v.strip() != ""]
        elif isinstance(value, str):
            value = value_format(value)

        if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif isinstance(current, str) and value is not None and not isinstance(value, str):
            value = str(value)

        self.sections[section][key] = value

    def _split(self, dotted: str) -> tuple[str, str]:
        section, _, key = str(dotted).partition(".")
        if section not in self.sections:
            raise ValueError(f"unknown config section '{section}' in '{dotted}'")
        if key not in self.sections[section]:
            raise ValueError(f"unknown config key '{key}' in section '{section}'")
        return section, key

    @staticmethod
    def keys() -> list[str]:
        """
        Every dotted key the configuration accepts
        """
        return [f"{section}.{key}" for section, values in DEFAULTS.items() for key in values]

    # =================================================================================================================

    @property
    def output_directory(self) -> str:
        directory = self.sections["output"]["directory"] or os.environ.get(OUTPUT_ENV) or "output"
        return os.path.realpath(str(directory))

    def resolve(self, path: str) -> str:
        """
        Relative artifact paths (checkpoint, dataset) live under the output root
        """
        path = str(path)
        return path if os.path.isabs(path) else os.path.join(self.output_directory, path)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.sections, sort_keys=False, default_flow_style=None)

    def write_manifest(self, directory: str, extra: dict | None = None) -> str:
        """
        manifest.yaml: resolved config, code version, plus run-specific entries
        """
        document = {
            "version": package_version(),
            "output": self.output_directory,
            "config": copy.deepcopy(self.sections),
        }
        document.update(extra or {})
        path = atomic_write(
            os.path.join(str(directory), "manifest.yaml"),
            yaml.safe_dump(document, sort_keys=False, default_flow_style=None),
        )
        self._logger.debug(f"manifest written: {path}")
        return path
