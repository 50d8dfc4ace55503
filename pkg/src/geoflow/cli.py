"""Command-line entry point: ``geoflow run | converge | validate``.

Settings come from a flat ``key = value`` file (``--config``) overridden by
flags; ``--set key=value`` reaches any key without a dedicated flag.  Exit
status is 0 on success, 1 on a solver, mesh or protocol failure and 2 on a
usage error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .densities import BUILTIN, get_density
from .diagnostics import EnergyRecord, convergence_study, discrete_energy, write_energy_csv
from .discrete_ops import face_frames
from .errors import GeoflowError, MeshCollapseError, ObjParseError, ProtocolError, SolverError
from .mesh import (
    SurfaceMesh,
    enclosed_volume,
    make_ellipsoid,
    make_icosphere,
    make_torus,
    read_obj,
    triangle_areas,
    validate,
    write_obj,
)
from .solver import StepConfig, initial_state, run

log = logging.getLogger("geoflow")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SURFACES = ("icosphere", "ellipsoid", "torus", "obj")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    surface: str = "icosphere"
    radius: float = 1.0
    a: float = 2.0
    b: float = 1.0
    R: float = math.sqrt(2.0)
    r: float = math.sqrt(2.0) / 2.0
    subdivisions: int = 3
    n_major: int = 48
    n_minor: int = 24
    mesh: str = ""
    density: str = "willmore"
    tau: float = 1e-3
    t_end: float = 0.1
    newton_tol: float = 1e-10
    max_newton_iters: int = 50
    alpha0: float = 1e6
    alpha_factor: float = 5.0
    tangential: bool = True
    normal_weighting: str = "area"
    frame_stride: int = 50
    out: str = ""
    # convergence study
    levels: tuple = (1, 2, 3)
    reference_level: int = 4
    checkpoints: tuple = (0.01, 0.02)
    resolution: int = 128
    z_exact: bool = True
    allow_free_tau: bool = False
    free_tau: bool = False

    _POSITIVE = ("radius", "a", "b", "R", "r", "tau", "newton_tol", "alpha0", "frame_stride", "max_newton_iters")

    def check(self) -> None:
        if self.surface not in SURFACES:
            raise UsageError(f"unknown surface kind {self.surface!r}; choose from {', '.join(SURFACES)}")
        if self.density not in BUILTIN:
            raise UsageError(f"unknown density {self.density!r}; choose from {', '.join(BUILTIN)}")
        for name in self._POSITIVE:
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")
        if self.t_end < 0:
            raise UsageError("t_end must be non-negative")
        if not self.alpha_factor > 1:
            raise UsageError("alpha_factor must exceed 1")
        if self.surface == "obj" and not self.mesh:
            raise UsageError("surface=obj needs mesh=PATH")

    def step_config(self, tau: Optional[float] = None) -> StepConfig:
        return StepConfig(tau=self.tau if tau is None else tau, **self.step_options())

    def step_options(self) -> dict:
        return dict(
            density=get_density(self.density),
            newton_tol=self.newton_tol,
            max_newton_iters=self.max_newton_iters,
            alpha0=self.alpha0,
            alpha_factor=self.alpha_factor,
            tangential=self.tangential,
            normal_weighting=self.normal_weighting,
        )

    def build_mesh(self, level: Optional[int] = None) -> SurfaceMesh:
        """Surface for this config; ``level`` replaces the refinement when given."""
        if self.surface == "icosphere":
            return make_icosphere(self.subdivisions if level is None else level, self.radius)
        if self.surface == "ellipsoid":
            return make_ellipsoid(self.a, self.b, self.subdivisions if level is None else level)
        if self.surface == "torus":
            scale = 1 if level is None else 2**level
            return make_torus(self.R, self.r, self.n_major * scale, self.n_minor * scale)
        if level is not None:
            raise UsageError("a convergence study needs a generated surface, not an OBJ file")
        return read_obj(self.mesh)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, text: str):
    f = _FIELDS.get(key.replace("-", "_"))
    if f is None or key.startswith("_"):
        raise UsageError(f"unknown config key {key!r}")
    default = f.default
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s for s in text.replace(",", " ").split() if s]
            conv = int if key == "levels" else float
            return tuple(conv(s) for s in items)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from None
    return text.strip()


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = _coerce(key, value)
    return values


def build_config(args) -> RunConfig:
    values = read_config(args.config) if args.config else {}
    for item in args.set or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip().replace("-", "_")] = _coerce(key.strip(), value)
    flags = {
        "out": args.out,
        "surface": args.surface,
        "density": args.density,
        "tau": args.tau,
        "t_end": args.t_end,
        "frame_stride": args.frame_stride,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.allow_free_tau:
        values["allow_free_tau"] = True
    # any explicit tau counts as an override of the convergence protocol
    if "tau" in values:
        values["free_tau"] = True
    cfg = RunConfig(**values)
    cfg.check()
    return cfg


def _output_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("an output directory is required (--out DIR)")
    out = Path(cfg.out)
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


class _Recorder:
    """Run hook collecting energy rows and writing OBJ frames on a stride."""

    def __init__(self, out: Path, stride: int, alpha0: float, energy0: float):
        self.out, self.stride = out, stride
        self.alpha0, self.energy0 = alpha0, energy0
        self.records = []
        self.last = None

    def __call__(self, state, stats):
        if stats is None:
            self.records.append(
                EnergyRecord(0, state.time, self.energy0, _area(state.mesh), _volume(state.mesh), 0.0, 0.0, self.alpha0, 0)
            )
        else:
            self.records.append(
                EnergyRecord(
                    stats.step, stats.time, stats.energy, stats.area, stats.volume,
                    stats.v_l2, stats.beta_max, stats.alpha, stats.newton_iters,
                )
            )
        self.last = state
        if state.step_index % self.stride == 0:
            write_obj(state.mesh, self.out / f"frame_{state.step_index:06d}.obj")


def _area(mesh):
    return float(triangle_areas(mesh).sum())


def _volume(mesh):
    return enclosed_volume(mesh, check=False)


def _write_summary(path: Path, cfg: RunConfig, recorder: _Recorder, status: str, message: str = "") -> None:
    recs = recorder.records
    lines = [
        f"status: {status}",
        f"surface: {cfg.surface}",
        f"density: {cfg.density}",
        f"tau: {cfg.tau:.12g}",
        f"t_end: {cfg.t_end:.12g}",
        f"total_steps: {recs[-1].step if recs else 0}",
        f"final_time: {recs[-1].time if recs else 0.0:.12g}",
        f"initial_energy: {recs[0].energy if recs else float('nan'):.12g}",
        f"final_energy: {recs[-1].energy if recs else float('nan'):.12g}",
        f"max_newton_iters: {max((r.newton_iters for r in recs), default=0)}",
    ]
    if message:
        lines.append(f"message: {message}")
    path.write_text("\n".join(lines) + "\n")


def cmd_run(cfg: RunConfig) -> int:
    out = _output_dir(cfg)
    mesh = cfg.build_mesh()
    config = cfg.step_config()
    state = initial_state(mesh, config)
    energy0 = discrete_energy(face_frames(mesh), state.curvature, config.density)
    rec = _Recorder(out, cfg.frame_stride, config.alpha0, energy0)
    status, message, code = "completed", "", EXIT_OK
    try:
        run(state, config, cfg.t_end, [rec])
    except (SolverError, MeshCollapseError) as exc:
        status, message, code = "failed", str(exc), EXIT_FAILURE
        print(f"geoflow: run failed: {exc}", file=sys.stderr)
    finally:
        write_energy_csv(rec.records, out / "energy.csv")
        if rec.last is not None and rec.last.step_index % cfg.frame_stride:
            write_obj(rec.last.mesh, out / f"frame_{rec.last.step_index:06d}.obj")
        _write_summary(out / "summary.txt", cfg, rec, status, message)
    if code == EXIT_OK:
        last = rec.records[-1]
        print(f"steps={last.step} t={last.time:.6g} energy={last.energy:.12g}")
    return code


def cmd_converge(cfg: RunConfig) -> int:
    out = _output_dir(cfg)
    if len(cfg.levels) < 3:
        raise UsageError(f"a convergence study needs at least 3 levels, got {len(cfg.levels)}")
    if cfg.surface == "obj":
        raise UsageError("a convergence study needs a generated surface, not an OBJ file")
    tau = cfg.tau if cfg.free_tau else None
    if tau is not None and not cfg.allow_free_tau:
        print(
            "geoflow: protocol violation: --tau overrides tau = h^2/180; pass --allow-free-tau to proceed",
            file=sys.stderr,
        )
        return EXIT_FAILURE
    table = convergence_study(
        cfg.build_mesh,
        get_density(cfg.density),
        cfg.levels,
        cfg.checkpoints,
        cfg.reference_level,
        resolution=cfg.resolution,
        z_exact=cfg.z_exact,
        tau_override=tau,
        allow_free_tau=cfg.allow_free_tau,
        progress=lambda msg: print(msg, file=sys.stderr),
        **{k: v for k, v in cfg.step_options().items() if k != "density"},
    )
    table.write_csv(out / "convergence.csv")
    for t in table.times():
        pairs = ", ".join(f"{o:.3f}" for o in table.pairwise_orders(t))
        print(f"t={t:.6g} fitted order {table.fitted_order(t):.3f} (pairwise {pairs})")
    return EXIT_OK


def cmd_validate(path: str) -> int:
    try:
        mesh = read_obj(path)
    except ObjParseError as exc:
        print(f"geoflow: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    report = validate(mesh)
    print(report)
    return EXIT_OK if report.is_valid else EXIT_FAILURE


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoflow", description="Curvature-driven flows of closed triangulated surfaces.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every time step")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="flat key = value settings file")
        sp.add_argument("--out", metavar="DIR", help="existing output directory")
        sp.add_argument("--surface", metavar="KIND", help=f"one of {', '.join(SURFACES)}")
        sp.add_argument("--density", metavar="NAME", help=f"one of {', '.join(BUILTIN)}")
        sp.add_argument("--tau", type=float, metavar="X", help="time step")
        sp.add_argument("--t-end", dest="t_end", type=float, metavar="X", help="final time")
        sp.add_argument("--frame-stride", dest="frame_stride", type=int, metavar="N", help="OBJ frame every N steps")
        sp.add_argument("--allow-free-tau", dest="allow_free_tau", action="store_true",
                        help="let --tau override the convergence protocol")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    common(sub.add_parser("run", help="evolve one surface and write energy.csv, frames and summary.txt"))
    common(sub.add_parser("converge", help="mesh-refinement study writing convergence.csv"))
    v = sub.add_parser("validate", help="check an OBJ surface")
    v.add_argument("path")
    return p


def _thread_limit():
    raw = os.environ.get("GEOFLOW_THREADS")
    if raw is None or not raw.strip():
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GEOFLOW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"GEOFLOW_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = _thread_limit()
        if args.command == "validate":
            return cmd_validate(args.path)
        cfg = build_config(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return cmd_run(cfg) if args.command == "run" else cmd_converge(cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"geoflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProtocolError as exc:
        print(f"geoflow: protocol violation: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (GeoflowError, SolverError) as exc:
        print(f"geoflow: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        parser.print_usage(sys.stderr)
        print(f"geoflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
