"""Command-line entry point: one subcommand per pipeline stage, each writing files plus a run manifest."""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path

from . import calibrate as cal
from . import codesign, damage, droptest, pressure, rewards, unwrap
from .errors import ConfigError, DomainError, FormatError, NumericalError, SoftpadError, TopologyError
from .kvfile import format_kv, format_value, get_float, get_int, get_list, read_kv
from .material import MATERIAL_KEYS, MaterialParams, load_material
from .mesh import SlabSpec, generate_slab, save_mesh
from .solver import BOX, SPHERE, Collider, SolverConfig

log = logging.getLogger("softpad")

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_NUMERICAL = 0, 1, 2, 3
MANIFEST_NAME = "manifest.txt"


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.0.0"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    seed: int
    config_hash: str = ""
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    tool_version: str = field(default_factory=tool_version)
    wall_time_s: float = 0.0

    def add_input(self, name: str, path) -> None:
        self.inputs[name] = sha256_file(path)

    def format(self) -> str:
        items = {
            "subcommand": self.subcommand,
            "tool_version": self.tool_version,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }
        items.update({f"input.{k}": v for k, v in sorted(self.inputs.items())})
        items.update({f"output.{k}": v for k, v in sorted(self.outputs.items())})
        items.update({f"param.{k}": v for k, v in sorted(self.params.items())})
        items.update({f"timing.{k}": v for k, v in sorted(self.timing.items())})
        items["wall_time_s"] = round(self.wall_time_s, 6)
        return format_kv(items)


class _Run:
    """Output directory, manifest bookkeeping and config loading for one subcommand."""

    def __init__(self, args, name: str):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(name, args.seed)
        self.kv: dict[str, str] = {}
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            self.kv = read_kv(path)
            self.manifest.config_hash = sha256_file(path)
            self.manifest.add_input("config", path)

    def input(self, name: str, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"input file not found: {p}")
        self.manifest.add_input(name, p)
        return p

    def write(self, name: str, content) -> Path:
        p = self.out / name
        if isinstance(content, bytes):
            p.write_bytes(content)
        else:
            p.write_text(content)
        self.manifest.outputs[name] = sha256_file(p)
        return p

    def finish(self, t0: float) -> None:
        self.manifest.wall_time_s = time.perf_counter() - t0
        (self.out / MANIFEST_NAME).write_text(self.manifest.format())


def _check_keys(kv: dict, allowed) -> None:
    unknown = sorted(set(kv) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}", field=unknown[0])


SLAB_KEYS = ("slab_length_x", "slab_length_y", "slab_thickness", "slab_resolution")
SIM_KEYS = ("dt", "local_global_iters", "linear_iters", "contact_tol", "gravity", "residual_tol", "max_contact_passes", "rotation_iters")
DROP_KEYS = (
    ("payload_mass", "drop_height", "impact_velocity", "impactor_kind", "impactor_radius", "impactor_half_extents")
    + ("impactor_friction", "sample_rate", "spawn_gap", "max_time", "ground_friction", "grid_spacing")
    + ("material_file", "film")
    + SLAB_KEYS
    + SIM_KEYS
    + MATERIAL_KEYS
)


def slab_from_kv(kv: dict, base: SlabSpec | None = None) -> SlabSpec:
    base = base or SlabSpec(0.1, 0.1, 0.012, 0.004)
    return SlabSpec(
        get_float(kv, "slab_length_x", base.length_x),
        get_float(kv, "slab_length_y", base.length_y),
        get_float(kv, "slab_thickness", base.thickness),
        get_float(kv, "slab_resolution", base.resolution),
    )


def drop_config_from_kv(kv: dict, seed: int = 0, base_dir: Path | None = None) -> droptest.DropConfig:
    """Drop scenario from flat SI keys; material keys override an optional ``material_file``."""
    d = droptest.DropConfig()
    material = MaterialParams()
    if "material_file" in kv:
        path = Path(kv["material_file"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        material = load_material(path)
    material = replace(material, **{k: get_float(kv, k) for k in MATERIAL_KEYS if k in kv})

    kind = kv.get("impactor_kind", "sphere")
    if kind not in (SPHERE, BOX):
        raise ConfigError(f"impactor_kind must be sphere or box, got {kind!r}", field="impactor_kind")
    imp = d.impactor
    impactor = Collider(
        kind,
        radius=get_float(kv, "impactor_radius", imp.radius),
        half_extents=tuple(get_list(kv, "impactor_half_extents", (0.02, 0.02, 0.005))),
        friction=get_float(kv, "impactor_friction", imp.friction),
    )
    sim = SolverConfig(
        dt=get_float(kv, "dt", d.sim.dt),
        local_global_iters=get_int(kv, "local_global_iters", d.sim.local_global_iters),
        linear_iters=get_int(kv, "linear_iters", d.sim.linear_iters),
        contact_tol=get_float(kv, "contact_tol", d.sim.contact_tol),
        gravity=get_float(kv, "gravity", -d.sim.gravity[2]),
        residual_tol=get_float(kv, "residual_tol", d.sim.residual_tol),
        max_contact_passes=get_int(kv, "max_contact_passes", d.sim.max_contact_passes),
        rotation_iters=get_int(kv, "rotation_iters", d.sim.rotation_iters),
        seed=seed,
    )
    velocity = get_float(kv, "impact_velocity", 0.0)
    height = get_float(kv, "drop_height", 0.0 if velocity > 0 else d.drop_height)
    return droptest.DropConfig(
        payload_mass=get_float(kv, "payload_mass", d.payload_mass),
        drop_height=height if height > 0 else None,
        impact_velocity=velocity if velocity > 0 else None,
        impactor=impactor,
        slab=slab_from_kv(kv, d.slab),
        material=material,
        sample_rate=get_float(kv, "sample_rate", d.sample_rate),
        sim=sim,
        spawn_gap=get_float(kv, "spawn_gap", d.spawn_gap),
        max_time=get_float(kv, "max_time", d.max_time),
        ground_friction=get_float(kv, "ground_friction", d.ground_friction),
        grid_spacing=get_float(kv, "grid_spacing", d.grid_spacing),
    )


def _film(name: str) -> pressure.FilmSpec:
    if name not in pressure.FILMS:
        raise ConfigError(f"unknown film {name!r}; expected one of {', '.join(pressure.FILMS)}", field="film")
    return pressure.FILMS[name]


def _config_dir(args) -> Path | None:
    return Path(args.config).parent if getattr(args, "config", None) else None


# ---- subcommands -------------------------------------------------------------------------------


def cmd_gen_mesh(run: _Run) -> None:
    a, kv = run.args, run.kv
    _check_keys(kv, SLAB_KEYS)
    if a.thickness_mm is not None:
        kv = {**kv, "slab_thickness": repr(a.thickness_mm * 1e-3)}
    if a.resolution_mm is not None:
        kv = {**kv, "slab_resolution": repr(a.resolution_mm * 1e-3)}
    spec = slab_from_kv(kv)
    mesh = generate_slab(spec)
    path = run.out / "slab.tet"
    save_mesh(mesh, path)
    run.manifest.outputs["slab.tet"] = sha256_file(path)
    run.manifest.params.update(
        length_x=spec.length_x, length_y=spec.length_y, thickness=spec.thickness, resolution=spec.resolution,
        vertices=mesh.n_vertices, tets=len(mesh.tets),
    )
    print(f"wrote {path} ({mesh.n_vertices} vertices, {len(mesh.tets)} tets)")


def cmd_drop(run: _Run) -> None:
    a, kv = run.args, dict(run.kv)
    _check_keys(kv, DROP_KEYS)
    if a.thickness_mm is not None:
        kv["slab_thickness"] = repr(a.thickness_mm * 1e-3)
    if a.height is not None:
        kv["drop_height"] = repr(a.height)
    if "material_file" in kv:
        mpath = Path(kv["material_file"])
        base = _config_dir(a)
        run.input("material", base / mpath if base is not None and not mpath.is_absolute() else mpath)
    cfg = drop_config_from_kv(kv, a.seed, _config_dir(a))
    film = _film(kv.get("film", "MS"))
    res = droptest.run_drop(cfg)
    if res.truncated:
        log.warning("drop reached max_time %.3g s before the payload separated", cfg.max_time)
    run.write("trace.csv", droptest.format_trace(res.trace))
    run.write("summary.csv", droptest.format_summary([res]))
    run.write("pressure.csv", pressure.format_field_csv(res.pressure_field))
    run.write("pressure.pgm", pressure.pgm_bytes(res.pressure_field, film))
    run.manifest.params.update({k: format_value(v) for k, v in cfg.as_dict().items()})
    steps = res.step_times
    run.manifest.timing.update(
        steps=len(steps),
        total_step_s=round(float(steps.sum()) / 1e3, 6),
        mean_step_ms=round(float(steps.mean()), 6) if len(steps) else 0.0,
        max_step_ms=round(float(steps.max()), 6) if len(steps) else 0.0,
    )
    print(f"peak force {res.peak_force:.6g} N, duration {res.impulse_duration * 1e3:.4g} ms, "
          f"peak pressure {res.pressure_field.grid.max() / 1e6:.4g} MPa")


CAL_KEYS = DROP_KEYS + ("observed", "impact_velocities", "thicknesses", "free_params", "restarts", "screen", "max_evals")


def cmd_calibrate(run: _Run) -> None:
    a, kv = run.args, run.kv
    _check_keys(kv, CAL_KEYS)
    base_dir = _config_dir(a) or Path(".")
    if "observed" not in kv:
        raise ConfigError("calibrate needs an 'observed' list of trace files", field="observed")
    paths = [s.strip() for s in kv["observed"].split(",") if s.strip()]
    template = drop_config_from_kv({k: v for k, v in kv.items() if k in DROP_KEYS}, a.seed, base_dir)
    vels = get_list(kv, "impact_velocities", [template.velocity] * len(paths))
    thick = get_list(kv, "thicknesses", [template.slab.thickness] * len(paths))
    if not len(vels) == len(thick) == len(paths):
        raise ConfigError("observed, impact_velocities and thicknesses must have equal length", field="observed")
    observed = []
    for i, (p, v, t) in enumerate(zip(paths, vels, thick)):
        path = Path(p) if Path(p).is_absolute() else base_dir / p
        run.input(f"trace{i}", path)
        cfg = replace(template.with_thickness(t), drop_height=None, impact_velocity=v)
        observed.append((cfg, droptest.load_trace(path)))
    free = tuple(cal.canonical(s.strip()) for s in kv.get("free_params", ",".join(cal.FIT_PARAMS)).split(",") if s.strip())
    problem = cal.CalibrationProblem(observed, free, {}, None, template.material)
    result = cal.fit(
        problem,
        restarts=get_int(kv, "restarts", 4),
        seed=a.seed,
        screen=get_int(kv, "screen", 0) or None,
        max_evals=get_int(kv, "max_evals", 400),
        jobs=a.jobs,
    )
    run.write("material.txt", cal.format_report(result))
    run.write("residuals.csv", cal.format_residuals(result, [Path(p).name for p in paths]))
    run.manifest.params.update(free_params=",".join(free), restarts=result.restarts_used, evaluations=result.evaluations)
    print(f"residual {result.residual:.6g} after {result.evaluations} simulations; converged={result.converged}")


SWEEP_KEYS = DROP_KEYS + ("forces", "thicknesses", "reference_pulse")


def cmd_sweep(run: _Run) -> None:
    a, kv = run.args, run.kv
    _check_keys(kv, SWEEP_KEYS)
    template = drop_config_from_kv({k: v for k, v in kv.items() if k in DROP_KEYS}, a.seed, _config_dir(a))
    forces = get_list(kv, "forces")
    thick = get_list(kv, "thicknesses")
    pulse = get_float(kv, "reference_pulse", codesign.REFERENCE_PULSE)
    surface = codesign.sweep(forces, thick, template, jobs=a.jobs, pulse=pulse)
    run.write("surface.csv", codesign.format_surface(surface))
    run.manifest.params.update(forces=",".join(map(repr, forces)), thicknesses=",".join(map(repr, thick)), reference_pulse=pulse)
    bad = int((~surface.valid).sum())
    print(f"swept {surface.peak_pressure.size} cells ({bad} failed); scenario {surface.scenario_hash}")


CODESIGN_KEYS = ("threshold", "no_pad_floor", "interpolation", "cell_size", "foot_links")


def cmd_codesign(run: _Run) -> None:
    a, kv = run.args, run.kv
    _check_keys(kv, CODESIGN_KEYS)
    surface = codesign.load_surface(run.input("surface", a.surface))
    events = damage.parse_contact_log(run.input("log", a.log))
    feet = _names(kv.get("foot_links", ",".join(sorted(damage.DEFAULT_FEET))))
    dmap = damage.aggregate(events, get_float(kv, "cell_size", 0.01), feet)
    threshold = a.threshold if a.threshold is not None else get_float(kv, "threshold", codesign.DEFAULT_THRESHOLD)
    spec = codesign.protector_spec(
        dmap, surface, threshold, get_float(kv, "no_pad_floor", 0.0), interp=kv.get("interpolation", "log")
    )
    run.write("protector_spec.csv", codesign.format_spec(spec))
    run.manifest.params.update(threshold=threshold, infeasible=",".join(spec.infeasible))
    for link in spec.infeasible:
        print(f"infeasible: {link} needs more than {surface.thicknesses[-1] * 1e3:.3g} mm")
    print(f"{len(spec.links)} links, {len(spec.infeasible)} infeasible")


def _names(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_damage_map(run: _Run) -> None:
    a, kv = run.args, run.kv
    _check_keys(kv, ("cell_size", "foot_links"))
    events = damage.parse_contact_log(run.input("log", a.log))
    feet = _names(kv.get("foot_links", ",".join(sorted(damage.DEFAULT_FEET))))
    dmap = damage.aggregate(events, get_float(kv, "cell_size", 0.01), feet)
    run.write("heat.csv", damage.format_heat_table(dmap))
    rows = ["link,count,peak_force_N,mean_episode_peak_N"]
    rows += [f"{n},{s.count},{float(s.peak_force)!r},{float(s.mean_episode_peak)!r}" for n, s in dmap.links.items()]
    run.write("links.csv", "\n".join(rows) + "\n")
    rows = ["scenario,events,episodes,falls"]
    rows += [f"{t},{s.events},{s.episodes},{s.falls}" for t, s in dmap.scenarios.items()]
    run.write("scenarios.csv", "\n".join(rows) + "\n")
    falls = damage.detect_falls(damage.group_episodes(events), feet)
    rows = ["episode,is_fall,first_fall_time_s"]
    rows += [f"{ep},{str(s.is_fall).lower()},{'' if s.first_fall_time is None else repr(s.first_fall_time)}" for ep, s in sorted(falls.items())]
    run.write("falls.csv", "\n".join(rows) + "\n")
    print(f"{dmap.episode_count} episodes, {sum(s.is_fall for s in falls.values())} falls, {len(dmap.links)} links")


def cmd_pressure_stats(run: _Run) -> None:
    a = run.args
    _check_keys(run.kv, ("threshold", "grid_spacing"))
    spacing = a.spacing if a.spacing is not None else get_float(run.kv, "grid_spacing", 1e-3)
    threshold = a.threshold if a.threshold is not None else get_float(run.kv, "threshold", codesign.DEFAULT_THRESHOLD)
    fields = {"before": pressure.load_field_csv(run.input("before", a.before), spacing=spacing)}
    if a.after:
        fields["after"] = pressure.load_field_csv(run.input("after", a.after), spacing=spacing)
    st = {k: pressure.stats(f, threshold) for k, f in fields.items()}
    rows = ["field,area_above_m2,median_Pa,max_Pa"]
    for k, s in st.items():
        rows.append(f"{k},{float(s.area_above)!r},{'' if s.median is None else repr(float(s.median))},{float(s.max)!r}")
        med = "absent" if s.median is None else f"{s.median / 1e6:.4g} MPa"
        print(f"{k}: area above {threshold / 1e6:.4g} MPa = {s.area_above * 1e4:.6g} cm^2, median {med}, max {s.max / 1e6:.4g} MPa")
    if "after" in st:
        b, c = st["before"], st["after"]
        if b.median is not None and c.median is not None:
            r = pressure.reduction(b.median, c.median)
            rows.append(f"median_reduction_percent,{float(r)!r},,")
            print(f"median pressure reduction {r:.1f}%")
        if b.area_above > 0:
            r = pressure.reduction(b.area_above, c.area_above)
            rows.append(f"area_reduction_percent,{float(r)!r},,")
            print(f"area-above-threshold reduction {r:.1f}%")
    run.write("stats.csv", "\n".join(rows) + "\n")
    run.manifest.params.update(threshold=threshold, grid_spacing=spacing)


def cmd_unwrap(run: _Run) -> None:
    a = run.args
    verts, tris = unwrap.load_obj(run.input("mesh", a.mesh))
    if a.labels:
        labels = unwrap.load_labels(run.input("labels", a.labels), len(tris))
    else:
        labels = ["0"] * len(tris)
    patches = unwrap.split_patches(verts, tris, labels)
    templates = unwrap.flatten_all(patches, jobs=a.jobs)
    run.write("outline.svg", unwrap.outline_svg(templates))
    run.write("outline.csv", unwrap.outline_csv(templates))
    rows = ["patch_id,vertices,triangles,conformal_energy,area_ratio_spread,max_angle_error_deg,flipped,degenerate"]
    for p, t in zip(patches, templates):
        d = t.distortion
        rows.append(f"{t.patch_id},{len(p.vertices)},{len(p.triangles)},{float(d.conformal_energy)!r},"
                    f"{float(d.area_ratio_spread)!r},{float(d.max_angle_error_deg)!r},{d.flipped_count},{d.degenerate_count}")
    run.write("distortion.csv", "\n".join(rows) + "\n")
    print(f"flattened {len(templates)} patches")


def cmd_rewards(run: _Run) -> None:
    a = run.args
    if not getattr(a, "config", None):
        raise ConfigError("rewards needs --config with sigma, weights and thresholds")
    config = rewards.load_reward_config(a.config)
    frames = rewards.load_frames(run.input("frames", a.frames))
    run.write("rewards.csv", rewards.reward_report(frames, config))
    n_term = sum(rewards.should_terminate(f, config).terminated for _, f, _ in frames)
    print(f"{len(frames)} frames, {n_term} terminating")


COMMANDS = {
    "gen-mesh": cmd_gen_mesh,
    "drop": cmd_drop,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "codesign": cmd_codesign,
    "damage-map": cmd_damage_map,
    "pressure-stats": cmd_pressure_stats,
    "unwrap": cmd_unwrap,
    "rewards": cmd_rewards,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--config", help="key=value config file (SI units)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="softpad", description="Soft impact-pad simulation and protector design pipeline.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen-mesh", parents=[common], help="write a tetrahedral slab mesh")
    s.add_argument("--thickness-mm", type=float)
    s.add_argument("--resolution-mm", type=float)
    s = sub.add_parser("drop", parents=[common], help="simulate one drop-weight impact")
    s.add_argument("--thickness-mm", type=float)
    s.add_argument("--height", type=float, help="drop height in m")
    sub.add_parser("calibrate", parents=[common], help="fit material parameters to observed traces")
    sub.add_parser("sweep", parents=[common], help="peak pressure over a force x thickness grid")
    s = sub.add_parser("codesign", parents=[common], help="per-link protector thickness")
    s.add_argument("--surface", required=True)
    s.add_argument("--log", required=True, help="contact-event log CSV")
    s.add_argument("--threshold", type=float, help="pressure threshold in Pa")
    s = sub.add_parser("damage-map", parents=[common], help="fall detection and per-link contact statistics")
    s.add_argument("--log", required=True)
    s = sub.add_parser("pressure-stats", parents=[common], help="pressure-field statistics and reductions")
    s.add_argument("--before", required=True)
    s.add_argument("--after")
    s.add_argument("--threshold", type=float, help="pressure threshold in Pa")
    s.add_argument("--spacing", type=float, help="grid spacing in m")
    s = sub.add_parser("unwrap", parents=[common], help="flatten surface patches to cut outlines")
    s.add_argument("--mesh", required=True, help="triangle mesh (OBJ)")
    s.add_argument("--labels", help="CSV of triangle_index,patch_id")
    s = sub.add_parser("rewards", parents=[common], help="evaluate reward kernels over a frame log")
    s.add_argument("--frames", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        run = _Run(args, args.command)
        COMMANDS[args.command](run)
        run.finish(t0)
    except (ConfigError, DomainError, FormatError, TopologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SoftpadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
