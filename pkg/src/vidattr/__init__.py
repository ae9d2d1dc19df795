"""Video pedestrian attribute recognition with a frozen dual encoder and
trainable spatio-temporal side networks."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_schema_path(name: str) -> Path:
    """Path to a schema shipped with the package.

    Known names: ``synthetic_small``, ``mars_reconstructed``, ``duke_reconstructed``.
    """
    ref = resources.files("vidattr") / "schemas" / f"{name}.json"
    with resources.as_file(ref) as p:
        if not p.exists():
            raise FileNotFoundError(f"no bundled schema named {name!r}")
        return Path(p)
