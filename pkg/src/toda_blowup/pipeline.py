"""Experiment stages behind the command-line interface. Every stage writes
its files into the output directory and registers them with the manifest."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ansatz import build_ansatz, residual_fields, fit_scaling
from .config import ExperimentConfig, dump_config
from .errors import ConfigurationError, EscapedConfigurationError, NonConvergenceError, TodaLabError
from .green import ANALYTIC_DISK, NUMERIC, GreenFunction
from .meanfield import MeanFieldProblem, nondegeneracy_check, solve_meanfield
from .mesh import DomainSpec, build_mesh, write_field
from .reduced import CriticalPoint, ReducedEnergy, find_critical
from .reporting import RunManifest, write_csv, write_json
from .toda import continuation

__all__ = ["RunContext", "StageError", "STAGES", "run_stage", "default_seeds"]

log = logging.getLogger(__name__)


class StageError(TodaLabError, RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dataclass
class RunContext:
    cfg: ExperimentConfig
    out: Path
    threads: int = 1
    verbosity: int = 0
    manifest: RunManifest | None = None
    critical: CriticalPoint | None = None
    written: list = field(default_factory=list)

    def __post_init__(self):
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)
        if self.manifest is None:
            self.manifest = RunManifest(self.cfg.hash(), __version__, self.cfg.seed)

    @property
    def domain(self) -> DomainSpec:
        return self.cfg.domain_spec()

    def register(self, path: Path) -> Path:
        self.manifest.add_file(self.out, path)
        self.written.append(path)
        return path

    def map(self, fn, items):
        items = list(items)
        if self.threads <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))


def _green_mode(cfg: ExperimentConfig) -> str:
    if cfg.green_mode != "auto":
        return cfg.green_mode
    return ANALYTIC_DISK if cfg.domain.kind == "unit-disk" else NUMERIC


def _reduced_energy(ctx: RunContext) -> ReducedEnergy:
    cfg = ctx.cfg
    return ReducedEnergy(ctx.domain, cfg.rho2, h=cfg.mesh.h_target, green_mode=_green_mode(cfg), gtol=cfg.tolerances.meanfield_gtol)


def _interior_sample(domain: DomainSpec, rng, n: int, margin: float) -> np.ndarray:
    if domain.kind == "unit-disk":
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    else:
        v = domain.polygon_vertices
        lo, hi = v.min(axis=0), v.max(axis=0)
    out = []
    while len(out) < n:
        p = lo + (hi - lo) * rng.random(2)
        if domain.boundary_distance(p[None])[0] > margin:
            out.append(p)
    return np.array(out)


def default_seeds(domain: DomainSpec, k: int, count: int, seed: int) -> list[np.ndarray]:
    """Deterministic multistart seeds: a regular k-gon around the domain's
    centre first, then random admissible configurations."""
    rng = np.random.default_rng(seed)
    scale = domain.diameter / 2
    margin = 0.15 * scale
    if domain.kind == "unit-disk":
        centre = np.zeros(2)
    else:
        v = domain.polygon_vertices
        centre = v.mean(axis=0)
        if domain.boundary_distance(centre[None])[0] <= margin:
            centre = _interior_sample(domain, rng, 1, margin)[0]
    seeds = []
    if k == 1:
        seeds.append(centre[None, :] + 0.1 * scale * np.array([[0.3, -0.2]]))
    else:
        ang = 2 * math.pi * np.arange(k) / k
        ring = centre + 0.4 * scale * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        if np.all(domain.boundary_distance(ring) > margin):
            seeds.append(ring)
    while len(seeds) < count:
        cand = _interior_sample(domain, rng, k, margin)
        if k > 1:
            d = np.linalg.norm(cand[:, None] - cand[None], axis=-1)[np.triu_indices(k, 1)]
            if d.min() < 0.2 * scale:
                continue
        seeds.append(cand)
    return seeds


# ---------------------------------------------------------------------------
# Stages


def stage_green_check(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    domain = ctx.domain
    rng = np.random.default_rng(cfg.seed)
    n = cfg.scan.green_pairs
    pts = _interior_sample(domain, rng, 2 * n, 0.2 * domain.diameter / 2)
    X, Y = pts[:n], pts[n:]
    exact = GreenFunction(ANALYTIC_DISK) if domain.kind == "unit-disk" else None
    rows = []
    for level in range(cfg.mesh.refinement_levels):
        h = cfg.mesh.h_target / 2**level
        mesh = build_mesh(domain, h)
        g = GreenFunction(NUMERIC, mesh)
        num = np.array([g.H(x, y) for x, y in zip(X, Y)])
        sym = np.array([abs(g.H(x, y) - g.H(y, x)) for x, y in zip(X, Y)])
        err = np.array([abs(a - exact.H(x, y)) for a, x, y in zip(num, X, Y)]) if exact else np.full(n, math.nan)
        rows.append(
            {
                "level": level,
                "h_target": h,
                "h_max": mesh.h_max,
                "n_nodes": mesh.n_nodes,
                "max_abs_error": float(err.max()),
                "max_symmetry_defect": float(sym.max()),
            }
        )
    footer = {}
    if exact and len(rows) >= 2:
        fit = fit_scaling([r["h_max"] for r in rows], [r["max_abs_error"] for r in rows], min_samples=2, min_decades=0)
        footer["order"] = fit.slope
    cols = ["level", "h_target", "h_max", "n_nodes", "max_abs_error", "max_symmetry_defect"]
    ctx.register(write_csv(ctx.out / "green_check.csv", cols, rows, footer or None))
    return {"rows": rows, **footer}


def _resolve_xi(ctx: RunContext) -> np.ndarray:
    if ctx.cfg.xi != "auto":
        return np.asarray(ctx.cfg.xi, dtype=float)
    if ctx.critical is None:
        stage_find_critical(ctx)
    return ctx.critical.xi


def stage_find_critical(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    seeds = default_seeds(ctx.domain, cfg.k, cfg.scan.multistart, cfg.seed)
    tol = cfg.tolerances.critical_tol or None

    def run(seed):
        energy = _reduced_energy(ctx)
        try:
            return find_critical(energy, seed, tol=tol)
        except (EscapedConfigurationError, NonConvergenceError) as exc:
            return exc

    results = ctx.map(run, seeds)
    records = []
    for i, (s, r) in enumerate(zip(seeds, results)):
        if isinstance(r, CriticalPoint):
            records.append({"seed_index": i, "seed": s, "status": "converged", **r.as_dict()})
        else:
            rec = {"seed_index": i, "seed": s, "status": type(r).__name__, "message": str(r)}
            if isinstance(r, EscapedConfigurationError):
                rec["escape_direction"] = r.direction
            records.append(rec)
    found = [r for r in results if isinstance(r, CriticalPoint)]
    best = min(found, key=lambda c: (c.gradient_norm > (tol or 1e-3), c.value)) if found else None
    ctx.critical = best
    ctx.register(write_json(ctx.out / "critical.json", {"results": records, "best": best.as_dict() if best else None}))
    if best is None:
        raise StageError("find-critical", "no critical configuration found; every multistart run escaped or stalled")
    return best.as_dict()


def stage_meanfield(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    xi = _resolve_xi(ctx)
    mesh = build_mesh(ctx.domain, cfg.mesh.h_target)
    green = GreenFunction.for_mesh(mesh, _green_mode(cfg))
    problem = MeanFieldProblem(mesh, xi, cfg.rho2, green)
    sol = solve_meanfield(problem, gtol=cfg.tolerances.meanfield_gtol)
    rep = nondegeneracy_check(sol)
    summary = {
        "xi": xi,
        "rho2": cfg.rho2,
        "energy": sol.energy,
        "iterations": sol.iterations,
        "gradient_norm": sol.gradient_norm,
        "mass": sol.mass,
        "nondegeneracy": {
            "value": rep.value,
            "laplacian_value": rep.laplacian_value,
            "ratio": rep.ratio,
            "passed": rep.passed,
            "converged": rep.converged,
        },
    }
    ctx.register(write_json(ctx.out / "meanfield.json", summary))
    path = ctx.out / "meanfield_z.txt"
    write_field(sol.z, path)
    ctx.register(path)
    if ctx.verbosity >= 2:
        cols = ["iteration", "energy", "gradient_norm"]
        rows = [{c: t.get(c, math.nan) for c in cols} for t in sol.trace]
        ctx.register(write_csv(ctx.out / "meanfield_trace.csv", cols, rows))
    return summary


def stage_lambda_scan(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    domain = ctx.domain
    n = cfg.scan.grid_points
    if domain.kind == "unit-disk":
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    else:
        v = domain.polygon_vertices
        lo, hi = v.min(axis=0), v.max(axis=0)
    xs = np.linspace(lo[0], hi[0], n + 2)[1:-1]
    ys = np.linspace(lo[1], hi[1], n + 2)[1:-1]
    margin = 2 * cfg.mesh.h_target
    grid = [np.array([x, y]) for y in ys for x in xs if domain.boundary_distance(np.array([[x, y]]))[0] > margin]
    others = None
    if cfg.k > 1:
        if cfg.xi == "auto":
            raise StageError("lambda-scan", "scanning with k > 1 needs explicit xi for the fixed points")
        others = np.asarray(cfg.xi, dtype=float)[1:]
    energy = _reduced_energy(ctx)
    rows = []
    for p in grid:
        xi = p[None, :] if others is None else np.vstack([p, others])
        try:
            ev = energy.evaluate(xi)
        except ConfigurationError:
            continue
        g = energy.gradient(xi, ev)
        rows.append(
            {
                "xi_x": p[0],
                "xi_y": p[1],
                "Lambda": ev.value,
                "half_I": ev.half_I,
                "robin_sum": ev.robin_sum,
                "pair_sum": ev.pair_sum,
                "grad_x": g[0, 0],
                "grad_y": g[0, 1],
                "meanfield_iterations": ev.meanfield.iterations if ev.meanfield else 0,
            }
        )
    cols = ["xi_x", "xi_y", "Lambda", "half_I", "robin_sum", "pair_sum", "grad_x", "grad_y", "meanfield_iterations"]
    ctx.register(write_csv(ctx.out / "lambda_scan.csv", cols, rows))
    return {"samples": len(rows)}


def stage_residual_scan(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    xi = _resolve_xi(ctx)
    lams = sorted((float(l) for l in cfg.scan.residual_lambdas), reverse=True)

    def run(lam):
        A = build_ansatz(
            ctx.domain, xi, lam, cfg.rho2, h=cfg.mesh.h_target, grading=cfg.mesh.grading,
            rule=cfg.mesh.quadrature, green_mode=_green_mode(cfg),
        )
        return residual_fields(A)

    reports = ctx.map(run, lams)
    rows = [r.row() for r in reports]
    fits = {}
    if len(lams) >= 4 and math.log10(max(lams) / min(lams)) >= 2 - 1e-12:
        for key in ("E_L1.2", "E_L1.5", "E0_sup"):
            vals = [r[key] for r in rows]
            if all(v > 0 for v in vals):
                fits[key] = fit_scaling(lams, vals).slope
    cols = list(rows[0].keys())
    ctx.register(write_csv(ctx.out / "residual_scan.csv", cols, rows, {"slopes": fits}))
    return {"slopes": fits}


def stage_branch(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    xi = _resolve_xi(ctx)
    lad = cfg.ladder
    try:
        rec = continuation(
            ctx.domain, xi, cfg.rho2, None, lad.lambda_start, lad.lambda_min, lad.shrink,
            h=cfg.mesh.h_target, grading=cfg.mesh.grading, rule=cfg.mesh.quadrature,
            green_mode=_green_mode(cfg), rtol=cfg.tolerances.newton_rtol, keep_states=cfg.scan.dump_states,
        )
    except TodaLabError as exc:
        raise StageError("branch", str(exc)) from exc
    cols = ["lambda", "rho1", "J", "defect", "newton_iterations", "u_minus_W", "jacobian_sigma_min"]
    footer = {"truncated": rec.truncated, "diagnostics": rec.diagnostics} if rec.truncated else None
    ctx.register(write_csv(ctx.out / "branch.csv", cols, [s.row() for s in rec.samples], footer))
    if cfg.scan.dump_states:
        for j, st in enumerate(rec.states):
            for name, f in (("u1", st.u1), ("u2", st.u2)):
                path = ctx.out / f"state_{j:02d}_{name}.txt"
                write_field(f, path)
                ctx.register(path)
    if rec.truncated:
        raise StageError("branch", rec.diagnostics)
    return {"samples": len(rec.samples), "final_rho1": rec.samples[-1].rho1}


STAGES = {
    "green-check": [stage_green_check],
    "meanfield": [stage_meanfield],
    "lambda-scan": [stage_lambda_scan],
    "find-critical": [stage_find_critical],
    "residual-scan": [stage_residual_scan],
    "branch": [stage_branch],
    "full-pipeline": [stage_find_critical, stage_residual_scan, stage_branch],
}


def run_stage(name: str, ctx: RunContext) -> dict:
    """Run a command's stages in order, recording status in the manifest;
    the manifest is written even when a stage fails."""
    results = {}
    ctx.out.mkdir(parents=True, exist_ok=True)
    cfg_path = ctx.out / "config.toml"
    cfg_path.write_text(dump_config(ctx.cfg))
    ctx.register(cfg_path)
    try:
        for fn in STAGES[name]:
            stage = fn.__name__.removeprefix("stage_").replace("_", "-")
            try:
                results[stage] = fn(ctx)
            except StageError as exc:
                ctx.manifest.record_stage(exc.stage, "failed", str(exc))
                raise
            except TodaLabError as exc:
                ctx.manifest.record_stage(stage, "failed", str(exc))
                raise StageError(stage, str(exc)) from exc
            ctx.manifest.record_stage(stage, "ok")
    finally:
        ctx.manifest.write(ctx.out)
    return results
