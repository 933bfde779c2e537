"""Result and data files

Every file starts with its schema: a ``schema`` key for JSON documents, the
header record for newline-delimited JSON and a ``# schema: ...`` comment line
for CSV tables. Floats are written with their shortest round-tripping
representation, so that identical results give identical files.
"""
import csv
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ObservationError
from .game import Trajectory, VisibilityModel
from .inverse import ObservationSequence
from .utils import dumps

OBSERVATIONS_SCHEMA = "occlusiongames.observations/1"
TRAJECTORIES_SCHEMA = "occlusiongames.trajectories/1"
OBSERVATION_COLUMNS = ("seed", "agent_id", "k", "y_x", "y_y")


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_json(path: Path, o: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(o, indent=2) + "\n")
    logging.info("Wrote %s", path)
    return path


def write_ndjson(path: Path, header: Mapping[str, Any], records: Iterable[Any]) -> Path:
    """One JSON document per line: the header, then the records"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wt") as fp:
        fp.write(dumps(header, sort_keys=True) + "\n")
        for record in records:
            fp.write(dumps(record, sort_keys=True) + "\n")
    logging.info("Wrote %s", path)
    return path


def read_ndjson(path: Path) -> Iterator[Dict[str, Any]]:
    with Path(path).open("rt") as fp:
        for line in fp:
            if line.strip():
                yield json.loads(line)


def write_table(
    path: Path,
    schema: str,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    """CSV table preceded by ``# key: value`` lines"""
    buffer = io.StringIO()
    buffer.write(f"# schema: {schema}\n")
    for key, value in (metadata or {}).items():
        buffer.write(f"# {key}: {_cell(value)}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(value) for value in row])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buffer.getvalue())
    logging.info("Wrote %s", path)
    return path


def read_table(path: Path):
    """Returns the metadata (with the schema) and the rows as dictionaries"""
    metadata, lines = {}, []
    with Path(path).open("rt") as fp:
        for line in fp:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                metadata[key.strip()] = value.strip()
            elif line.strip():
                lines.append(line)
    return metadata, list(csv.DictReader(lines))


# --- Observations


def write_observations(path: Path, observations: ObservationSequence) -> Path:
    return write_table(
        path,
        OBSERVATIONS_SCHEMA,
        OBSERVATION_COLUMNS,
        observations.rows(),
        {"sigma": observations.sigma},
    )


def read_observations(
    path: Path, agents: Optional[Iterable[int]] = None
) -> ObservationSequence:
    """Reads observations written by `write_observations`

    :param agents: all the agents of the game (visible or not); defaults to
        the observed ones
    """
    path = Path(path)
    if not path.is_file():
        raise ObservationError(f"no observation file {path}")
    metadata, rows = read_table(path)
    if metadata.get("schema") != OBSERVATIONS_SCHEMA:
        raise ObservationError(
            f"{path}: expected schema {OBSERVATIONS_SCHEMA},"
            f" got {metadata.get('schema')}"
        )
    if not rows or set(rows[0]) != set(OBSERVATION_COLUMNS):
        raise ObservationError(f"{path}: expected columns {OBSERVATION_COLUMNS}")

    positions: Dict[int, Dict[int, List[float]]] = {}
    seeds = set()
    for row in rows:
        agent = positions.setdefault(int(row["agent_id"]), {})
        agent[int(row["k"])] = [float(row["y_x"]), float(row["y_y"])]
        seeds.add(row["seed"])

    starts = {min(steps) for steps in positions.values()}
    if len(starts) != 1:
        raise ObservationError(f"{path}: agents are observed from different steps")
    start = starts.pop()
    sequences = {}
    for agent_id, steps in positions.items():
        expected = list(range(start, start + len(steps)))
        if sorted(steps) != expected:
            raise ObservationError(f"{path}: agent {agent_id} has missing steps")
        sequences[agent_id] = np.array([steps[k] for k in expected])

    seed = seeds.pop() if len(seeds) == 1 else ""
    visible = sorted(sequences)
    agents = sorted(set(agents) if agents is not None else visible)
    return ObservationSequence(
        sequences,
        float(metadata.get("sigma", 0.0)),
        VisibilityModel(agents, visible, {}),
        seed=int(seed) if seed else None,
        start=start,
    )


# --- Trajectories


def trajectory_rows(trajectories: Mapping[int, Trajectory]):
    """``agent_id, k, x, y, vx, vy, ux, uy`` rows (no control at the last step)"""
    for agent_id, trajectory in sorted(trajectories.items()):
        for k, state in enumerate(trajectory.states):
            control = (
                trajectory.controls[k] if k < trajectory.horizon else (None, None)
            )
            yield (agent_id, k, *state, *control)


def write_trajectories(
    path: Path,
    trajectories: Mapping[int, Trajectory],
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    return write_table(
        path,
        TRAJECTORIES_SCHEMA,
        ("agent_id", "k", "x", "y", "vx", "vy", "ux", "uy"),
        trajectory_rows(trajectories),
        metadata,
    )
