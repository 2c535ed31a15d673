"""Reward and termination kernels for fall-policy evaluation over logged frames."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, FormatError
from .kvfile import read_kv

CHANNELS = ("p", "R", "v", "w")
LAMBDAS = ("task", "safe", "limit", "smooth", "contact")
FRAME_HEADER = ("tick", "e_p", "e_R", "e_v", "e_w", "contacts", "anchor_height_error", "anchor_orientation_error")
PENALTY_COLUMNS = ("r_limit", "r_smooth", "r_contact")

CONTINUE = "continue"
ANCHOR_HEIGHT = "anchor_height"
ANCHOR_ORIENTATION = "anchor_orientation"
UNSAFE_CONTACT = "unsafe_contact"


@dataclass(frozen=True)
class MimicFrame:
    """Squared tracking errors per channel plus contacts and anchor errors for one tick."""

    errors: dict
    contacts: frozenset = frozenset()
    anchor_height_error: float = 0.0
    anchor_orientation_error: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "errors", {c: float(self.errors.get(c, 0.0)) for c in CHANNELS})
        object.__setattr__(self, "contacts", frozenset(self.contacts))
        for c, e in self.errors.items():
            if not (e >= 0 and math.isfinite(e)):
                raise ConfigError(f"tracking error e_{c} must be finite and >= 0, got {e}", field=f"e_{c}")
        for name in ("anchor_height_error", "anchor_orientation_error"):
            v = getattr(self, name)
            if not v >= 0:
                raise ConfigError(f"{name} must be >= 0, got {v}", field=name)


@dataclass(frozen=True)
class RewardConfig:
    sigma: dict = field(default_factory=lambda: {c: 1.0 for c in CHANNELS})
    safe_weights: dict = field(default_factory=dict)
    lambdas: dict = field(default_factory=lambda: {k: 1.0 for k in LAMBDAS})
    anchor_height_threshold: float = math.inf
    anchor_orientation_threshold: float = math.inf
    unsafe_links: frozenset = frozenset({"head"})
    links: frozenset = frozenset()

    def __post_init__(self):
        sigma = {c: float(self.sigma.get(c, 1.0)) for c in CHANNELS}
        if any(not s > 0 for s in sigma.values()):
            raise ConfigError("every sigma must be > 0", field="sigma")
        lam = {k: float(self.lambdas.get(k, 0.0)) for k in LAMBDAS}
        if any(not v >= 0 for v in lam.values()):
            raise ConfigError("every lambda must be >= 0", field="lambdas")
        weights = {str(k): float(v) for k, v in self.safe_weights.items()}
        if any(not v >= 0 for v in weights.values()):
            raise ConfigError("safe-contact weights must be >= 0", field="safe_weights")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "safe_weights", weights)
        object.__setattr__(self, "unsafe_links", frozenset(self.unsafe_links))
        object.__setattr__(self, "links", frozenset(self.links))

    @property
    def registry(self) -> frozenset:
        """Known link names; empty means any name is accepted."""
        if not self.links:
            return frozenset()
        return self.links | frozenset(self.safe_weights) | self.unsafe_links

    def check_links(self, contacts) -> None:
        reg = self.registry
        if reg:
            unknown = sorted(set(contacts) - reg)
            if unknown:
                raise ConfigError(f"unknown link(s) in contact set: {', '.join(unknown)}", field="contacts")


def kernel(error: float, sigma: float) -> float:
    return math.exp(-error / sigma**2)


def tracking_reward(frame: MimicFrame, config: RewardConfig) -> tuple[dict, float]:
    per = {c: kernel(frame.errors[c], config.sigma[c]) for c in CHANNELS}
    return per, math.fsum(per.values())


def safe_contact_reward(contacts, config: RewardConfig) -> float:
    contacts = frozenset(contacts)
    config.check_links(contacts)
    return math.fsum(w for link, w in config.safe_weights.items() if link in contacts)


def total_reward(frame: MimicFrame, penalties: dict | None = None, config: RewardConfig | None = None) -> float:
    """Weighted sum of task, safe-contact and caller-supplied penalty terms."""
    config = config or RewardConfig()
    penalties = penalties or {}
    lam = config.lambdas
    terms = {
        "task": tracking_reward(frame, config)[1],
        "safe": safe_contact_reward(frame.contacts, config),
        "limit": float(penalties.get("r_limit", 0.0)),
        "smooth": float(penalties.get("r_smooth", 0.0)),
        "contact": float(penalties.get("r_contact", 0.0)),
    }
    return math.fsum(lam[k] * terms[k] for k in LAMBDAS)


@dataclass(frozen=True)
class Termination:
    terminated: bool
    reason: str = CONTINUE


def should_terminate(frame: MimicFrame, config: RewardConfig) -> Termination:
    """Anchor height, then anchor orientation, then unsafe contact; first rule to fire wins."""
    config.check_links(frame.contacts)
    if frame.anchor_height_error > config.anchor_height_threshold:
        return Termination(True, ANCHOR_HEIGHT)
    if frame.anchor_orientation_error > config.anchor_orientation_threshold:
        return Termination(True, ANCHOR_ORIENTATION)
    if frame.contacts & config.unsafe_links:
        return Termination(True, UNSAFE_CONTACT)
    return Termination(False)


def _names(text: str) -> list[str]:
    return [s.strip() for s in text.replace(";", ",").split(",") if s.strip()]


def load_reward_config(path) -> RewardConfig:
    """Read ``sigma_<c>``, ``lambda_<term>``, ``weight.<link>``, thresholds and link lists."""
    kv = read_kv(path)
    sigma, lambdas, weights = {}, {}, {}
    kwargs = {}
    for key, value in kv.items():
        try:
            if key.startswith("sigma_") and key[6:] in CHANNELS:
                sigma[key[6:]] = float(value)
            elif key.startswith("lambda_") and key[7:] in LAMBDAS:
                lambdas[key[7:]] = float(value)
            elif key.startswith("weight."):
                weights[key[7:]] = float(value)
            elif key in ("anchor_height_threshold", "anchor_orientation_threshold"):
                kwargs[key] = float(value)
            elif key in ("unsafe_links", "links"):
                kwargs[key] = frozenset(_names(value))
            else:
                raise ConfigError(f"{path}: unknown reward key {key!r}", field=key)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: {key}: not a number: {value!r}", field=key) from None
    return RewardConfig(sigma=sigma or {c: 1.0 for c in CHANNELS}, safe_weights=weights, lambdas=lambdas or {k: 1.0 for k in LAMBDAS}, **kwargs)


def parse_frames(text: str) -> list[tuple[int, MimicFrame, dict]]:
    """(tick, frame, penalties) per row; penalty columns are optional."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    header = tuple(c.strip() for c in rows[0])
    if header[: len(FRAME_HEADER)] != FRAME_HEADER or any(c not in PENALTY_COLUMNS for c in header[len(FRAME_HEADER):]):
        raise FormatError(f"expected header {','.join(FRAME_HEADER)}[,{','.join(PENALTY_COLUMNS)}]", line=1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        rec = dict(zip(header, (c.strip() for c in row)))
        try:
            frame = MimicFrame(
                {c: float(rec[f"e_{c}"]) for c in CHANNELS},
                frozenset(_names(rec["contacts"])),
                float(rec["anchor_height_error"]),
                float(rec["anchor_orientation_error"]),
            )
            penalties = {k: float(rec[k]) for k in PENALTY_COLUMNS if k in rec}
            tick = int(rec["tick"])
        except ConfigError as exc:
            raise FormatError(str(exc), line=lineno) from None
        except ValueError:
            raise FormatError("non-numeric field", line=lineno) from None
        out.append((tick, frame, penalties))
    return out


def load_frames(path) -> list[tuple[int, MimicFrame, dict]]:
    return parse_frames(Path(path).read_text())


REPORT_HEADER = FRAME_HEADER + PENALTY_COLUMNS + tuple(f"r_{c}" for c in CHANNELS) + ("r_task", "r_safe", "r_total", "terminated", "reason")


def reward_report(frames, config: RewardConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for tick, frame, pen in frames:
        per, r_task = tracking_reward(frame, config)
        r_safe = safe_contact_reward(frame.contacts, config)
        total = total_reward(frame, pen, config)
        term = should_terminate(frame, config)
        w.writerow(
            [tick]
            + [repr(frame.errors[c]) for c in CHANNELS]
            + [";".join(sorted(frame.contacts)), repr(frame.anchor_height_error), repr(frame.anchor_orientation_error)]
            + [repr(float(pen.get(k, 0.0))) for k in PENALTY_COLUMNS]
            + [repr(per[c]) for c in CHANNELS]
            + [repr(r_task), repr(r_safe), repr(total), str(term.terminated).lower(), term.reason]
        )
    return buf.getvalue()
