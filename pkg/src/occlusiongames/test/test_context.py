import json

from occlusiongames.context import Context, RunManifest
from occlusiongames.settings import UserSettings


def test_context_output(context):
    assert Context.instance() is not None
    path = context.output("runs", "a.json")
    assert path.parent.is_dir()
    assert path.parent.parent == context.output_dir


def test_settings(tmp_path):
    path = tmp_path / "settings.json"
    assert UserSettings.load(path).workers == 1

    settings = UserSettings()
    settings.workers = 4
    settings.save(path)
    assert UserSettings.load(path).workers == 4

    path.write_text(json.dumps({"workers": 0}))
    assert UserSettings.load(path).workers == 1


def test_manifest(tmp_path):
    manifest = RunManifest("solve", config_hash="abc", seeds=[3])
    manifest.add_output(tmp_path / "a.json")
    manifest.add_output(tmp_path / "a.json")
    path = manifest.write(tmp_path / "manifest.json")

    data = json.loads(path.read_text())
    assert data["schema"] == "occlusiongames.manifest/1"
    assert data["outputs"] == [str(tmp_path / "a.json")]
    assert data["seeds"] == [3]
    assert "total" in data["timings"]
