"""Fall-episode contact logs: fall detection and per-link damage statistics."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, LogFormatError

LOG_HEADER = ("episode", "scenario", "time_s", "link", "px", "py", "pz", "force_N")
SCENARIOS = ("push", "power_loss", "slip", "trip")
# trials per failure mode in the reference fall study
SCENARIO_TRIALS = {"push": 400, "power_loss": 400, "trip": 400, "slip": 100}
DEFAULT_FEET = frozenset({"left_foot", "right_foot"})
HEAT_HEADER = ("link", "cell_u", "cell_v", "count", "peak_force_N")


@dataclass(frozen=True)
class ContactEvent:
    episode_id: str
    scenario: str
    time: float
    link: str
    position: tuple[float, float, float]
    normal_force: float

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario tag {self.scenario!r}", field="scenario")
        if not (math.isfinite(self.normal_force) and self.normal_force >= 0):
            raise ConfigError(f"normal force must be >= 0, got {self.normal_force}", field="normal_force")
        if not (math.isfinite(self.time) and self.time >= 0):
            raise ConfigError(f"time must be >= 0, got {self.time}", field="time")


def parse_contact_log_text(text: str) -> list[ContactEvent]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not any(cell.strip() for cell in rows[0]):
        return []
    header = tuple(c.strip() for c in rows[0])
    if header != LOG_HEADER:
        raise LogFormatError(f"expected header {','.join(LOG_HEADER)}", line=1)
    events = []
    scenario_of: dict[str, str] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(LOG_HEADER):
            raise LogFormatError(f"expected {len(LOG_HEADER)} fields, got {len(row)}", line=lineno)
        episode, scenario, t, link, px, py, pz, force = (c.strip() for c in row)
        if scenario not in SCENARIOS:
            raise LogFormatError(f"unknown scenario tag {scenario!r}", line=lineno)
        if not episode or not link:
            raise LogFormatError("empty episode or link name", line=lineno)
        try:
            t, px, py, pz, force = (float(v) for v in (t, px, py, pz, force))
        except ValueError:
            raise LogFormatError("non-numeric time, position or force", line=lineno) from None
        if not all(math.isfinite(v) for v in (t, px, py, pz, force)):
            raise LogFormatError("non-finite value", line=lineno)
        if force < 0:
            raise LogFormatError(f"negative force {force}", line=lineno)
        if t < 0:
            raise LogFormatError(f"negative time {t}", line=lineno)
        if scenario_of.setdefault(episode, scenario) != scenario:
            raise LogFormatError(
                f"episode {episode!r} tagged {scenario!r} but earlier rows say {scenario_of[episode]!r}", line=lineno
            )
        events.append(ContactEvent(episode, scenario, t, link, (px, py, pz), force))
    return events


def parse_contact_log(path) -> list[ContactEvent]:
    return parse_contact_log_text(Path(path).read_text())


def format_contact_log(events) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for e in events:
        w.writerow([e.episode_id, e.scenario, repr(float(e.time)), e.link, *(repr(float(v)) for v in e.position), repr(float(e.normal_force))])
    return buf.getvalue()


def group_episodes(events) -> dict[str, list[ContactEvent]]:
    out: dict[str, list[ContactEvent]] = defaultdict(list)
    for e in events:
        out[e.episode_id].append(e)
    return dict(out)


@dataclass(frozen=True)
class FallStatus:
    is_fall: bool
    first_fall_time: float | None


def detect_falls(episodes, foot_links=DEFAULT_FEET) -> dict[str, FallStatus]:
    """An episode is a fall iff any link outside ``foot_links`` touched the ground."""
    foot_links = frozenset(foot_links)
    if not foot_links:
        raise ConfigError("foot_links must not be empty", field="foot_links")
    if not isinstance(episodes, dict):
        episodes = group_episodes(episodes)
    out = {}
    for ep, evs in episodes.items():
        times = [e.time for e in evs if e.link not in foot_links]
        out[ep] = FallStatus(bool(times), min(times) if times else None)
    return out


@dataclass
class CellStats:
    count: int = 0
    peak_force: float = 0.0


@dataclass
class LinkStats:
    count: int
    peak_force: float
    mean_episode_peak: float
    axes: tuple[int, int]
    histogram: dict[tuple[int, int], CellStats] = field(default_factory=dict)


@dataclass
class ScenarioStats:
    events: int
    episodes: int
    falls: int


@dataclass
class DamageMap:
    links: dict[str, LinkStats]
    scenarios: dict[str, ScenarioStats]
    episode_count: int
    cell_size: float

    def peak_forces(self) -> dict[str, float]:
        return {name: s.peak_force for name, s in self.links.items()}

    def hottest_cells(self, k: int) -> list[tuple[str, int, int, int, float]]:
        """Top ``k`` (link, u, v, count, peak) cells by count, then peak force, then name."""
        cells = [
            (link, u, v, c.count, c.peak_force)
            for link, s in self.links.items()
            for (u, v), c in s.histogram.items()
        ]
        cells.sort(key=lambda r: (-r[3], -r[4], r[0], r[1], r[2]))
        return cells[:k]


def projection_axes(positions: np.ndarray) -> tuple[int, int]:
    """Indices of the two largest bounding-box extents (ties by axis order), ascending."""
    positions = np.atleast_2d(positions)
    extent = np.ptp(positions, axis=0) if len(positions) else np.zeros(3)
    order = sorted(range(3), key=lambda a: (-extent[a], a))
    return tuple(sorted(order[:2]))


def aggregate(events, cell_size: float = 0.01, foot_links=DEFAULT_FEET) -> DamageMap:
    """Per-link and per-scenario statistics; independent of event order."""
    if not cell_size > 0:
        raise ConfigError("cell_size must be > 0", field="cell_size")
    events = sorted(events, key=lambda e: (e.episode_id, e.link, e.time, e.position, e.normal_force, e.scenario))
    by_link: dict[str, list[ContactEvent]] = defaultdict(list)
    for e in events:
        by_link[e.link].append(e)
    links = {}
    for name in sorted(by_link):
        evs = by_link[name]
        pos = np.array([e.position for e in evs])
        axes = projection_axes(pos)
        hist: dict[tuple[int, int], CellStats] = {}
        per_episode: dict[str, float] = {}
        for e, p in zip(evs, pos):
            cell = (int(math.floor(p[axes[0]] / cell_size)), int(math.floor(p[axes[1]] / cell_size)))
            c = hist.setdefault(cell, CellStats())
            c.count += 1
            c.peak_force = max(c.peak_force, e.normal_force)
            per_episode[e.episode_id] = max(per_episode.get(e.episode_id, 0.0), e.normal_force)
        links[name] = LinkStats(
            count=len(evs),
            peak_force=max(e.normal_force for e in evs),
            mean_episode_peak=math.fsum(per_episode.values()) / len(per_episode),
            axes=axes,
            histogram=dict(sorted(hist.items())),
        )
    episodes = group_episodes(events)
    falls = detect_falls(episodes, foot_links)
    scenarios = {}
    for tag in SCENARIOS:
        eps = [ep for ep, evs in episodes.items() if min(e.scenario for e in evs) == tag]
        n_events = sum(1 for e in events if e.scenario == tag)
        if eps or n_events:
            scenarios[tag] = ScenarioStats(n_events, len(eps), sum(falls[ep].is_fall for ep in eps))
    return DamageMap(links, scenarios, len(episodes), cell_size)


def format_heat_table(dmap: DamageMap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEAT_HEADER)
    for link in sorted(dmap.links):
        for (u, v), c in sorted(dmap.links[link].histogram.items()):
            if c.count > 0:
                w.writerow([link, u, v, c.count, repr(float(c.peak_force))])
    return buf.getvalue()


def export_heat_table(dmap: DamageMap, path) -> None:
    Path(path).write_text(format_heat_table(dmap))


def load_heat_table(path) -> dict[str, dict[tuple[int, int], CellStats]]:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or tuple(rows[0]) != HEAT_HEADER:
        raise LogFormatError(f"expected header {','.join(HEAT_HEADER)}", line=1)
    out: dict[str, dict[tuple[int, int], CellStats]] = defaultdict(dict)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            link, u, v, count, peak = row
            out[link][(int(u), int(v))] = CellStats(int(count), float(peak))
        except ValueError:
            raise LogFormatError("malformed heat-table row", line=lineno) from None
    return dict(out)
