"""Input files and argument lists exercising every CLI subcommand on small problems."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from softpad.calibrate import simulate
from softpad.cli import drop_config_from_kv
from softpad.damage import ContactEvent, format_contact_log
from softpad.droptest import save_trace
from softpad.kvfile import parse_kv
from softpad.material import MaterialParams
from softpad.pressure import PressureField, save_field_csv
from softpad.unwrap import grid_patch, save_obj

SMALL_DROP = """\
payload_mass=1.0
impact_velocity=1.0
impactor_kind=box
impactor_half_extents=0.012,0.012,0.005
impactor_friction=0.0
slab_length_x=0.012
slab_length_y=0.012
slab_thickness=0.012
slab_resolution=0.006
spawn_gap=0.0
max_time=0.1
ground_friction=1.0
"""

# (before, after) medians reproduce a 42.1 % reduction
BEFORE_MPA = np.array([[0.0, 18.0, 19.5], [21.0, 0.0, 0.0]])
AFTER_MPA = np.array([[0.0, 10.0, 11.3], [12.0, 0.0, 0.0]])


def write_inputs(root: Path) -> dict[str, Path]:
    """Write every input file once; returns named paths."""
    root.mkdir(parents=True, exist_ok=True)
    p = {}
    p["drop"] = root / "drop.cfg"
    p["drop"].write_text(SMALL_DROP)

    p["mesh_cfg"] = root / "mesh.cfg"
    p["mesh_cfg"].write_text("slab_length_x=0.02\nslab_length_y=0.02\nslab_thickness=0.006\nslab_resolution=0.005\n")

    cfg = drop_config_from_kv(parse_kv(SMALL_DROP))
    truth = MaterialParams(young_modulus=0.8e6)
    p["trace"] = root / "observed.csv"
    save_trace(simulate(truth, replace(cfg, impact_velocity=2.0)).trace, p["trace"])
    p["calibrate"] = root / "calibrate.cfg"
    p["calibrate"].write_text(
        SMALL_DROP
        + "observed=observed.csv\nimpact_velocities=2.0\nthicknesses=0.012\n"
        + "free_params=E0\nrestarts=1\nscreen=2\nmax_evals=12\n"
    )

    p["sweep"] = root / "sweep.cfg"
    p["sweep"].write_text(SMALL_DROP + "forces=200.0,400.0\nthicknesses=0.006,0.012\n")

    p["surface"] = root / "surface.csv"
    p["surface"].write_text(
        "force_N,thickness_m,peak_pressure_Pa\n"
        "100.0,0.006,15e6\n100.0,0.012,5e6\n100.0,0.018,3e6\n"
        "400.0,0.006,60e6\n400.0,0.012,20e6\n400.0,0.018,11e6\n"
    )
    events = [
        ContactEvent("e1", "push", 0.1, "left_foot", (0.0, 0.0, 0.0), 300.0),
        ContactEvent("e1", "push", 0.5, "left_knee", (0.1, 0.02, 0.3), 250.0),
        ContactEvent("e2", "trip", 0.4, "right_forearm", (0.3, 0.01, 0.9), 380.0),
        ContactEvent("e3", "slip", 0.2, "right_foot", (0.0, 0.1, 0.0), 120.0),
        ContactEvent("e4", "power_loss", 0.6, "head", (0.0, 0.2, 1.4), 399.0),
    ]
    p["log"] = root / "contacts.csv"
    p["log"].write_text(format_contact_log(events))
    p["codesign"] = root / "codesign.cfg"
    p["codesign"].write_text("threshold=10e6\nno_pad_floor=150.0\n")

    p["before"] = root / "before.csv"
    p["after"] = root / "after.csv"
    save_field_csv(PressureField(BEFORE_MPA * 1e6), p["before"])
    save_field_csv(PressureField(AFTER_MPA * 1e6), p["after"])

    a = grid_patch(4, 3, 0.05, 0.03)
    b = grid_patch(3, 3, 0.04, 0.04, bend=0.8)
    verts = np.vstack([a.vertices, b.vertices + [0.1, 0, 0]])
    tris = np.vstack([a.triangles, b.triangles + len(a.vertices)])
    p["obj"] = root / "surface.obj"
    save_obj(p["obj"], verts, tris)
    p["labels"] = root / "labels.csv"
    labels = ["elbow-1"] * len(a.triangles) + ["elbow-2"] * len(b.triangles)
    p["labels"].write_text("triangle_index,patch_id\n" + "".join(f"{i},{lab}\n" for i, lab in enumerate(labels)))

    p["frames"] = root / "frames.csv"
    p["frames"].write_text(
        "tick,e_p,e_R,e_v,e_w,contacts,anchor_height_error,anchor_orientation_error\n"
        "0,0,0,0,0,,0,0\n1,0.02,0.1,0.3,0.5,forearm_l,0.05,0.1\n2,0.1,0.3,1.0,2.0,head,0.2,0.3\n"
    )
    p["reward_cfg"] = root / "reward.cfg"
    p["reward_cfg"].write_text(
        "sigma_p=0.2\nsigma_R=0.5\nsigma_v=1.0\nsigma_w=2.0\nweight.forearm_l=1.0\nweight.knee_l=0.5\n"
        "lambda_task=1.0\nlambda_safe=0.5\nanchor_height_threshold=0.3\nunsafe_links=head\n"
    )
    return p


def subcommands(p: dict[str, Path]) -> dict[str, list[str]]:
    """Argument lists (without ``--out``) for every subcommand."""
    return {
        "gen-mesh": ["gen-mesh", "--config", str(p["mesh_cfg"])],
        "drop": ["drop", "--config", str(p["drop"])],
        "calibrate": ["calibrate", "--config", str(p["calibrate"])],
        "sweep": ["sweep", "--config", str(p["sweep"])],
        "codesign": ["codesign", "--config", str(p["codesign"]), "--surface", str(p["surface"]), "--log", str(p["log"])],
        "damage-map": ["damage-map", "--log", str(p["log"])],
        "pressure-stats": ["pressure-stats", "--before", str(p["before"]), "--after", str(p["after"])],
        "unwrap": ["unwrap", "--mesh", str(p["obj"]), "--labels", str(p["labels"])],
        "rewards": ["rewards", "--frames", str(p["frames"]), "--config", str(p["reward_cfg"])],
    }


def stable_manifest(text: str) -> str:
    """Manifest minus wall-clock measurements."""
    return "".join(
        line + "\n" for line in text.splitlines() if not line.startswith(("timing.", "wall_time_s="))
    )


def output_snapshot(out: Path) -> dict[str, bytes]:
    snap = {}
    for f in sorted(out.iterdir()):
        data = f.read_bytes()
        snap[f.name] = stable_manifest(data.decode()).encode() if f.name == "manifest.txt" else data
    return snap
