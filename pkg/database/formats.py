"""
Versioned file formats.

Instance files are JSON documents::

    {"version": 1, "prng": "numpy-philox4x64/seedsequence",
     "width": 5, "height": 5,
     "grid": ["0000 4002 0401 1200 0000", ...],
     "cities": [{"arrival": [1, 2], "departure": [3, 2]}],
     "trains": [{"id": 0, "start": [3, 2], "orientation": "W", "goal": [1, 2],
                 "cmax": 1, "edt": 1, "eat": 10}],
     "tmax": 96, "malfunction": {"lambda": 0.0, "min": 10, "max": 50},
     "seed": 0, "level": null, "name": "ring"}

Each grid row lists one 4-digit hex transition mask per cell. Line-oriented
files (malfunction sidecar, trajectory log, command rows) start with a
`# <kind> v<version>` header; blank lines and further `#` lines are skipped.
"""
import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

from engine.simulator import Command, EpisodeResult, TrajectoryRecord
from errors import InstanceFormatError, InstanceValidationError, PlanMismatchError
from models.railmap import Cell, City, Orientation, RailMap
from models.scenario import (
    PRNG_NAME,
    Instance,
    MalfunctionEvent,
    MalfunctionParams,
    TrainSpec,
    validate_instance,
)
from planning.sipp import Path, Visit

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

_ORIENTATION_LETTERS = "NESW"


def _require(doc: Dict[str, Any], key: str, where: str) -> Any:
    if not isinstance(doc, dict):
        raise InstanceFormatError(f"{where or 'document'}: expected an object")
    if key not in doc:
        raise InstanceFormatError(f"{where}{key}: missing field")
    return doc[key]


def _int(doc: Dict[str, Any], key: str, where: str) -> int:
    value = _require(doc, key, where)
    if isinstance(value, bool) or not isinstance(value, int):
        raise InstanceFormatError(f"{where}{key}: expected an integer, got {value!r}")
    return value


def _number(doc: Dict[str, Any], key: str, where: str) -> float:
    value = _require(doc, key, where)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InstanceFormatError(f"{where}{key}: expected a number, got {value!r}")
    return float(value)


def _cell(doc: Dict[str, Any], key: str, where: str) -> Cell:
    value = _require(doc, key, where)
    if (
        not isinstance(value, list)
        or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise InstanceFormatError(f"{where}{key}: expected [row, col], got {value!r}")
    return value[0], value[1]


def _orientation(doc: Dict[str, Any], key: str, where: str) -> Orientation:
    value = _require(doc, key, where)
    if not isinstance(value, str) or len(value) != 1 or value not in _ORIENTATION_LETTERS:
        raise InstanceFormatError(f"{where}{key}: expected one of N, E, S, W, got {value!r}")
    return Orientation(_ORIENTATION_LETTERS.index(value))


def _check_version(doc: Dict[str, Any], kind: str):
    version = _int(doc, "version", "")
    if version != FORMAT_VERSION:
        raise InstanceFormatError(f"version: unsupported {kind} version {version}")


def _loads(text: str, source: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InstanceFormatError(f"{source}: line {e.lineno}: {e.msg}") from e


def instance_to_dict(instance: Instance) -> Dict[str, Any]:
    rail_map = instance.map
    rows = []
    for row in range(rail_map.height):
        start = row * rail_map.width
        rows.append(" ".join(f"{mask:04x}" for mask in rail_map.grid[start:start + rail_map.width]))
    return {
        "version": FORMAT_VERSION,
        "prng": PRNG_NAME,
        "name": instance.name,
        "level": instance.level,
        "width": rail_map.width,
        "height": rail_map.height,
        "grid": rows,
        "cities": [
            {"arrival": list(city.arrival), "departure": list(city.departure)} for city in rail_map.cities
        ],
        "trains": [
            {
                "id": train.id,
                "start": list(train.start),
                "orientation": _ORIENTATION_LETTERS[train.initial_orientation],
                "goal": list(train.goal),
                "cmax": train.cmax,
                "edt": train.edt,
                "eat": train.eat,
            }
            for train in instance.trains
        ],
        "tmax": instance.tmax,
        "malfunction": {
            "lambda": instance.malfunction.rate,
            "min": instance.malfunction.min_duration,
            "max": instance.malfunction.max_duration,
        },
        "seed": instance.seed,
    }


def instance_from_dict(doc: Dict[str, Any]) -> Instance:
    """
    Parse an instance document without checking its invariants.

    Raises:
        InstanceFormatError: A field is missing or malformed; the message names it
    """
    _check_version(doc, "instance")
    width = _int(doc, "width", "")
    height = _int(doc, "height", "")
    rows = _require(doc, "grid", "")
    if not isinstance(rows, list) or len(rows) != height:
        raise InstanceFormatError(f"grid: expected {height} rows")
    grid = []
    for r, row in enumerate(rows):
        tokens = row.split() if isinstance(row, str) else None
        if tokens is None or len(tokens) != width:
            raise InstanceFormatError(f"grid[{r}]: expected {width} hex masks")
        for c, token in enumerate(tokens):
            try:
                mask = int(token, 16)
            except ValueError:
                raise InstanceFormatError(f"grid[{r}][{c}]: {token!r} is not a hex mask") from None
            if not 0 <= mask <= 0xFFFF:
                raise InstanceFormatError(f"grid[{r}][{c}]: mask {token} out of range")
            grid.append(mask)

    cities = []
    for i, city in enumerate(_require(doc, "cities", "")):
        where = f"cities[{i}]."
        cities.append(City(_cell(city, "arrival", where), _cell(city, "departure", where)))

    trains = []
    for i, train in enumerate(_require(doc, "trains", "")):
        where = f"trains[{i}]."
        trains.append(
            TrainSpec(
                id=_int(train, "id", where),
                start=_cell(train, "start", where),
                initial_orientation=_orientation(train, "orientation", where),
                goal=_cell(train, "goal", where),
                cmax=_int(train, "cmax", where),
                edt=_int(train, "edt", where),
                eat=_int(train, "eat", where),
            )
        )

    malfunction = _require(doc, "malfunction", "")
    params = MalfunctionParams(
        rate=_number(malfunction, "lambda", "malfunction."),
        min_duration=_int(malfunction, "min", "malfunction."),
        max_duration=_int(malfunction, "max", "malfunction."),
    )
    level = doc.get("level")
    if level is not None and (isinstance(level, bool) or not isinstance(level, int)):
        raise InstanceFormatError(f"level: expected an integer or null, got {level!r}")
    return Instance(
        map=RailMap(width, height, tuple(grid), tuple(cities)),
        trains=tuple(trains),
        tmax=_int(doc, "tmax", ""),
        malfunction=params,
        seed=_int(doc, "seed", ""),
        level=level,
        name=str(doc.get("name") or ""),
    )


def dumps_instance(instance: Instance) -> str:
    return json.dumps(instance_to_dict(instance), indent=2) + "\n"


def loads_instance(text: str, source: str = "<string>") -> Instance:
    """
    Parse and validate an instance document.

    Raises:
        InstanceFormatError: Malformed JSON or fields
        InstanceValidationError: The instance breaks one of its invariants
    """
    instance = instance_from_dict(_loads(text, source))
    problems = validate_instance(instance)
    if problems:
        raise InstanceValidationError(f"{source}: " + "; ".join(problems[:5]))
    return instance


def save_instance(instance: Instance, path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_instance(instance))
    logger.debug("Wrote instance %s to %s", instance.name, path)


def load_instance(path: str) -> Instance:
    with open(path, "r", encoding="utf-8") as f:
        return loads_instance(f.read(), path)


def _data_lines(text: str, kind: str, source: str):
    lines = text.splitlines()
    header = f"# {kind} v{FORMAT_VERSION}"
    if not lines or lines[0].strip() != header:
        raise InstanceFormatError(f"{source}: line 1: expected header '{header}'")
    for number, line in enumerate(lines[1:], start=2):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield number, stripped.split()


def dumps_malfunctions(schedule: Sequence[Sequence[MalfunctionEvent]]) -> str:
    lines = [f"# malfunctions v{FORMAT_VERSION}", "# agent start duration"]
    for events in schedule:
        lines.extend(f"{e.agent} {e.start} {e.duration}" for e in events)
    return "\n".join(lines) + "\n"


def loads_malfunctions(text: str, agents: int, source: str = "<string>") -> List[List[MalfunctionEvent]]:
    schedule: List[List[MalfunctionEvent]] = [[] for _ in range(agents)]
    for number, fields in _data_lines(text, "malfunctions", source):
        try:
            agent, start, duration = (int(v) for v in fields)
        except ValueError:
            raise InstanceFormatError(f"{source}: line {number}: expected 'agent start duration'") from None
        if not 0 <= agent < agents or start < 0 or duration < 1:
            raise InstanceFormatError(f"{source}: line {number}: event out of range")
        schedule[agent].append(MalfunctionEvent(agent, start, duration))
    for events in schedule:
        events.sort(key=lambda e: e.start)
    return schedule


def save_malfunctions(schedule: Sequence[Sequence[MalfunctionEvent]], path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_malfunctions(schedule))


def load_malfunctions(path: str, agents: int) -> List[List[MalfunctionEvent]]:
    with open(path, "r", encoding="utf-8") as f:
        return loads_malfunctions(f.read(), agents, path)


# Everything a plan depends on; metadata such as the name and malfunction
# parameters may change without invalidating a plan.
_FINGERPRINT_FIELDS = ("width", "height", "grid", "cities", "trains", "tmax")


def instance_fingerprint(instance: Instance) -> Dict[str, Any]:
    doc = instance_to_dict(instance)
    material = json.dumps({key: doc[key] for key in _FINGERPRINT_FIELDS}, sort_keys=True, separators=(",", ":"))
    return {
        "width": instance.map.width,
        "height": instance.map.height,
        "trains": len(instance.trains),
        "tmax": instance.tmax,
        "sha256": hashlib.sha256(material.encode("utf-8")).hexdigest(),
    }


def dumps_plan(instance: Instance, paths: Sequence[Optional[Path]], label: str = "") -> str:
    entries = []
    for path in paths:
        if path is None:
            entries.append(None)
            continue
        entries.append({
            "agent": path.agent,
            "entry": path.entry_time,
            "arrival": path.planned_arrival,
            "records": [
                [v.cell[0], v.cell[1], _ORIENTATION_LETTERS[v.orientation], v.enter, v.leave]
                for v in path.occupancy
            ],
        })
    doc = {"version": FORMAT_VERSION, "label": label, "instance": instance_fingerprint(instance), "paths": entries}
    return json.dumps(doc, indent=1) + "\n"


def loads_plan(text: str, instance: Instance, source: str = "<string>") -> List[Optional[Path]]:
    """
    Parse a plan file for `instance`.

    Raises:
        PlanMismatchError: The file is truncated or was written for another instance
    """
    try:
        doc = _loads(text, source)
        _check_version(doc, "plan")
        fingerprint = _require(doc, "instance", "")
        entries = _require(doc, "paths", "")
    except InstanceFormatError as e:
        raise PlanMismatchError(f"plan/instance mismatch: {e}") from e
    if fingerprint != instance_fingerprint(instance) or not isinstance(entries, list) or len(entries) != len(instance.trains):
        raise PlanMismatchError(f"plan/instance mismatch: {source} was not written for {instance.name or 'this instance'}")

    paths: List[Optional[Path]] = []
    for agent, entry in enumerate(entries):
        if entry is None:
            paths.append(None)
            continue
        where = f"paths[{agent}]."
        try:
            records = []
            for k, record in enumerate(_require(entry, "records", where)):
                row, col, letter, enter, leave = record
                records.append(Visit((row, col), Orientation(_ORIENTATION_LETTERS.index(letter)), enter, leave))
            if _int(entry, "agent", where) != agent:
                raise InstanceFormatError(f"{where}agent: expected {agent}")
            paths.append(
                Path(
                    agent=agent,
                    entry_time=_int(entry, "entry", where),
                    occupancy=tuple(records),
                    planned_arrival=_int(entry, "arrival", where),
                    goal=instance.trains[agent].goal,
                )
            )
        except (InstanceFormatError, TypeError, ValueError) as e:
            raise PlanMismatchError(f"plan/instance mismatch: {where.rstrip('.')}: {e}") from e
    return paths


def save_plan(instance: Instance, paths: Sequence[Optional[Path]], path: str, label: str = ""):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_plan(instance, paths, label))


def load_plan(path: str, instance: Instance) -> List[Optional[Path]]:
    with open(path, "r", encoding="utf-8") as f:
        return loads_plan(f.read(), instance, path)


def dumps_trajectory(records: Sequence[TrajectoryRecord]) -> str:
    lines = [f"# trajectory v{FORMAT_VERSION}", "# t agent status row col orientation counter malfunction_left"]
    for r in records:
        cell = f"{r.cell[0]} {r.cell[1]}" if r.cell is not None else "- -"
        lines.append(
            f"{r.t} {r.agent} {r.status.value} {cell} {_ORIENTATION_LETTERS[r.orientation]} {r.counter} {r.malfunction_left}"
        )
    return "\n".join(lines) + "\n"


def save_trajectory(records: Sequence[TrajectoryRecord], path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_trajectory(records))


def dumps_commands(rows: Dict[int, Sequence[Command]]) -> str:
    lines = [f"# commands v{FORMAT_VERSION}", "# t then one of S F L R per agent"]
    for t in sorted(rows):
        lines.append(" ".join([str(t)] + [command.letter for command in rows[t]]))
    return "\n".join(lines) + "\n"


def loads_commands(text: str, agents: int, source: str = "<string>") -> Dict[int, List[Command]]:
    rows: Dict[int, List[Command]] = {}
    for number, fields in _data_lines(text, "commands", source):
        try:
            t = int(fields[0])
            commands = [Command.from_letter(letter) for letter in fields[1:]]
        except ValueError:
            raise InstanceFormatError(f"{source}: line {number}: expected 't' followed by S/F/L/R letters") from None
        if len(commands) != agents:
            raise InstanceFormatError(f"{source}: line {number}: expected {agents} commands, got {len(commands)}")
        rows[t] = commands
    return rows


def save_commands(rows: Dict[int, Sequence[Command]], path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_commands(rows))


def load_commands(path: str, agents: int) -> Dict[int, List[Command]]:
    with open(path, "r", encoding="utf-8") as f:
        return loads_commands(f.read(), agents, path)


def episode_record(instance: Instance, mode: str, seed: int, result: EpisodeResult) -> Dict[str, Any]:
    """One episode report as a flat, JSON-serializable record."""

    def finite(value):
        return value if value != float("inf") else None

    return {
        "instance": instance.name,
        "level": instance.level,
        "mode": mode,
        "seed": seed,
        "agents": len(instance.trains),
        "arrivals": list(result.arrivals),
        "delays": [finite(d) for d in result.delays],
        "total_delay": finite(result.total_delay),
        "reward": result.reward,
        "success_rate": result.success_rate,
        "replans": result.replans,
        "planning_seconds": result.planning_seconds,
        "aborted": result.aborted,
    }


def save_report(record: Dict[str, Any], path: str):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2)
        f.write("\n")


def save_trace(records: Sequence, path: str):
    """LNS iteration trace: iteration strategy size before after accepted."""
    lines = [f"# lns-trace v{FORMAT_VERSION}", "# iteration strategy size before after accepted"]
    for r in records:
        lines.append(f"{r.iteration} {r.strategy} {r.size} {r.before} {r.after} {int(r.accepted)}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
