from pathlib import Path
import logging
import shutil

import pytest

from occlusiongames.context import Context


@pytest.fixture(scope="session")
def context(tmp_path_factory):
    """Sets a temporary output directory"""
    dir = tmp_path_factory.mktemp("occlusiongames-output")
    context = Context(Path(dir))
    logging.info("Created occlusiongames test directory %s", dir)

    yield context

    logging.info("Removing occlusiongames test directory %s", dir)
    shutil.rmtree(dir, ignore_errors=True)
