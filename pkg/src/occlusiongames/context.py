import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import attrs
from attrs import define, field

from .settings import UserSettings
from .utils import dumps


class Context:
    """
    Represents the application context
    """

    MAINDIR = Path(
        os.environ.get("OCCLUSIONGAMES_OUTPUT_DIR", "~/occlusiongames")
    ).expanduser()

    INSTANCE = None

    def __init__(self, path: Optional[Path] = None):
        Context.INSTANCE = self

        # Read user preferences
        settings_path = (
            Path("~").expanduser() / ".config" / "occlusiongames" / "settings.json"
        )
        self.settings = UserSettings.load(settings_path)

        if path is None:
            if (
                "OCCLUSIONGAMES_OUTPUT_DIR" not in os.environ
                and self.settings.output_dir
            ):
                path = Path(self.settings.output_dir).expanduser()
            else:
                path = Context.MAINDIR
        self._path = Path(path)
        self.traceback = False

    @staticmethod
    def instance():
        if Context.INSTANCE is None:
            Context.INSTANCE = Context()
        return Context.INSTANCE

    @property
    def output_dir(self) -> Path:
        return self._path

    @property
    def workers(self) -> int:
        return self.settings.workers

    def output(self, *parts: str) -> Path:
        """Path of an output file, creating its directory"""
        path = self._path.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


@define
class RunManifest:
    """What a command invocation wrote, and with which inputs

    Wall-clock information only lives here, so that re-running a command
    writes identical result files.
    """

    command: str
    config_hash: Optional[str] = None
    seeds: List[int] = field(factory=list)
    version: str = field(factory=lambda: _version())
    outputs: List[str] = field(factory=list)
    timings: Dict[str, Any] = field(factory=dict)
    started: float = field(factory=time.time)

    def add_output(self, path: Path):
        path = str(path)
        if path not in self.outputs:
            self.outputs.append(path)

    def to_dict(self):
        return {
            "schema": "occlusiongames.manifest/1",
            **attrs.asdict(self),
        }

    def write(self, path: Path) -> Path:
        self.timings.setdefault("total", time.time() - self.started)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(self.to_dict(), indent=2))
        logging.info("Wrote the run manifest %s", path)
        return path


def _version() -> str:
    from occlusiongames import __version__

    return __version__
