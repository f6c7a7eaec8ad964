"""Loading and validation of the tunable-knob catalog file.

The catalog is user-editable JSON describing, per tiering solution, the knob
names, their discrete candidate values, the default, and (for kernel knobs)
the sysfs/procfs path to write. A built-in catalog ships with the package;
the TMTUNE_CATALOG environment variable or an explicit path overrides it.
"""
from __future__ import annotations

import json
import os
from importlib import resources

from .core import ParamSpace, ParamSpec, ValidationError

CATALOG_ENV_VAR = "TMTUNE_CATALOG"
CATALOG_SCHEMA_VERSION = 1


class CatalogError(ValueError):
    """The catalog file is missing, malformed, or fails validation."""


def builtin_catalog_text() -> str:
    return resources.files("tmtune.data").joinpath("default_catalog.json").read_text()


def load_catalog(path: str | None = None) -> dict[str, ParamSpace]:
    """Load the knob catalog, returning one ParamSpace per solution.

    Resolution order: explicit path argument, then TMTUNE_CATALOG, then the
    built-in catalog shipped with the package.
    """
    if path is None:
        path = os.environ.get(CATALOG_ENV_VAR)
    if path is None:
        text = builtin_catalog_text()
        source = "<builtin>"
    else:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise CatalogError(f"cannot read catalog {path!r}: {e}") from e
        source = path
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CatalogError(f"catalog {source} is not valid JSON: {e}") from e
    return parse_catalog(doc, source=source)


def parse_catalog(doc: dict, source: str = "<dict>") -> dict[str, ParamSpace]:
    if not isinstance(doc, dict) or "version" not in doc:
        raise CatalogError(f"catalog {source} lacks a top-level version field")
    if doc["version"] != CATALOG_SCHEMA_VERSION:
        raise CatalogError(
            f"catalog {source} has version {doc['version']}, "
            f"expected {CATALOG_SCHEMA_VERSION}"
        )
    solutions = doc.get("solutions")
    if not isinstance(solutions, dict) or not solutions:
        raise CatalogError(f"catalog {source} has no solutions")
    spaces: dict[str, ParamSpace] = {}
    for name, entry in solutions.items():
        try:
            specs = tuple(
                ParamSpec(
                    name=s["name"],
                    candidates=tuple(s["candidates"]),
                    default=s["default"],
                    apply_path=s.get("apply_path"),
                )
                for s in entry["specs"]
            )
            spaces[name] = ParamSpace(solution=name, specs=specs)
        except (KeyError, TypeError, ValidationError) as e:
            raise CatalogError(f"catalog {source}, solution {name!r}: {e}") from e
    return spaces


def get_space(solution: str, path: str | None = None) -> ParamSpace:
    spaces = load_catalog(path)
    if solution not in spaces:
        raise CatalogError(
            f"unknown solution {solution!r}; catalog defines {sorted(spaces)}"
        )
    return spaces[solution]
