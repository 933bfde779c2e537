"""User settings utility classes"""
import json
import logging
from pathlib import Path
from typing import Optional

import marshmallow as mm


class JsonSettings:
    """Settings stored as a JSON file and validated by ``SCHEMA``"""

    SCHEMA = None

    @classmethod
    def load(cls, path: Path):
        path = Path(path)
        if not path.is_file():
            return cls()
        data = json.loads(path.read_text())
        try:
            return cls.SCHEMA().load(data)
        except mm.ValidationError as e:
            logging.warning("Ignoring invalid settings in %s: %s", path, e.messages)
            return cls()

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.SCHEMA().dump(self), indent=2))


# --- User settings


class UserSettingsSchema(mm.Schema):
    workers = mm.fields.Integer(validate=mm.validate.Range(min=1))
    output_dir = mm.fields.String(allow_none=True)

    @mm.post_load
    def make_settings(self, data, **kwargs):
        settings = UserSettings()
        for key, value in data.items():
            setattr(settings, key, value)
        return settings


class UserSettings(JsonSettings):
    """User settings"""

    SCHEMA = UserSettingsSchema

    def __init__(self):
        #: Default number of worker processes for ensembles
        self.workers: int = 1
        #: Default output directory
        self.output_dir: Optional[str] = None
