#!/usr/bin/env python3
"""
got CLI: optimal transport experiments on metric graphs and their epsilon-tubes.

Commands:
  converge:     tube OT against graph OT as epsilon shrinks
  figure1:      grid-geodesic trajectories of an optimal assignment on a branching network
  stability:    OT before and after edge edits, with the witness and sup-norm bounds
  monotonicity: solve OT instances and check cyclical monotonicity of the plans
  dynamic:      minimal-action transport between two network grid states
  jko:          minimizing-movement gradient flow of a network energy

Every command reads one experiment config (YAML or JSON), stages its artifacts in a
temporary directory and moves them into place when the run succeeds.
"""

import argparse
import contextlib
import logging
import math
import os
import shutil
import sys
import tempfile
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError
from tqdm import tqdm

from config import config
from dynamic_ot import (
    ActionSpec,
    NetworkGrid,
    NetworkState,
    SolverOptions,
    discrete_continuity_residual,
    minimize_action,
    simulate_drift_diffusion,
    stationary_reference,
)
from errors import EXIT_INTERNAL, ConfigError, DomainError, GotError, exit_code_for
from gradient_flow import EnergySpec, JkoOptions, PipeParameters, PressureLaw, run_flow
from graphcore import Edge, MetricGraph, load_graph
from ids import make_run_id
from measures import (
    AmbientPoint,
    DiscreteMeasure,
    load_measure,
    project_measure,
    project_to_graph,
    sample_graph_measure,
    thicken_measure,
)
from models import EdgeRecord, ExperimentConfig, MeasureSource, StateSpec
from networks import builtin_network
from render import FigureStyle, field_frames, trajectory_svg, write_csv, write_json
from static_ot import (
    Coupling,
    CostMatrix,
    GraphCost,
    TubeCost,
    check_cyclical_monotonicity,
    solve_ot,
    solve_transport,
    stability_experiment,
    wasserstein_p,
)
from tube import (
    Metric,
    Trajectory,
    TubeGrid,
    export_raster,
    extract_trajectories,
    geodesic_length_matrix,
    rasterize,
    sandwich_report,
)
from utils.hash_utils import array_digest, sha256_file, sha256_json

logger = logging.getLogger(__name__)

REPORT_FORMAT = "got-report/1"
CLUSTER_TRIES = 10_000  # rejection draws per clustered point
ENERGY_RTOL = 1e-12  # slack when checking that an energy log is non-increasing

Summary = tuple[dict[str, Any], list[str]]


# Config loading


def _yaml_mark(node: yaml.Node | None, loc: Sequence[int | str]) -> yaml.Mark | None:
    """Start mark of the deepest YAML node on the path ``loc``."""
    mark = node.start_mark if node is not None else None
    for key in loc:
        nxt: yaml.Node | None = None
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == str(key)), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        if nxt is None:
            break
        node, mark = nxt, nxt.start_mark
    return mark


def load_experiment(path: Path) -> ExperimentConfig:
    """Parse and validate an experiment config; every error message carries a line/column position.

    Raises:
        ConfigError: the file is missing, is not valid YAML/JSON, or fails schema validation.
    """
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: {getattr(e, 'problem', None) or e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        lines = []
        for err in e.errors():
            loc = [str(part) for part in err["loc"]]
            mark = _yaml_mark(root, err["loc"])
            where = f"line {mark.line + 1}, column {mark.column + 1}" if mark is not None else "top level"
            lines.append(f"  {'.'.join(loc) or '<root>'} ({where}): {err['msg']}")
        raise ConfigError(f"{path}: invalid experiment config\n" + "\n".join(lines)) from e
    for ref in cfg.referenced_files():
        if not (path.parent / ref).is_file():
            raise ConfigError(f"{path}: referenced file {ref!r} does not exist")
    return cfg


# Run context


@dataclass
class RunContext:
    cfg: ExperimentConfig
    config_path: Path
    seed: int | None
    stage: Path
    graph: MetricGraph
    header: dict[str, Any]
    rng: np.random.Generator = field(init=False)

    def __post_init__(self) -> None:
        # one generator per run; every random draw derives its seed from it
        self.rng = np.random.default_rng(self.seed)

    @property
    def base_dir(self) -> Path:
        return self.config_path.parent

    def child_seed(self) -> int:
        return int(self.rng.integers(2**31 - 1))

    def measure(self, source: MeasureSource | None, fresh: bool = False) -> DiscreteMeasure:
        """Load or sample a graph measure; ``fresh`` ignores a fixed sampler seed."""
        if source is None:
            raise ConfigError("measure source missing")
        if source.file is not None:
            if fresh:
                raise ConfigError("repeated instances need sampled measures, not files")
            m = load_measure(self.base_dir / source.file)
        else:
            assert source.sample is not None
            spec = source.sample
            seed = self.child_seed()
            if spec.seed is not None and not fresh:
                seed = spec.seed
            m = sample_graph_measure(self.graph, spec.n, seed, spec.edges)
        if m.kind != "graph":
            raise DomainError(f"command {self.cfg.command!r} expects graph measures")
        for loc in m.locations:
            self.graph.check_point(loc)  # type: ignore[arg-type]
        return m


def _resolve_graph(cfg: ExperimentConfig, base: Path) -> MetricGraph:
    if cfg.graph is not None:
        return load_graph(base / cfg.graph)
    return builtin_network(cfg.network or "figure1")


def _output_dir(args: argparse.Namespace, cfg: ExperimentConfig, base: Path, run_id: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out).resolve()
    if cfg.output:
        return (base / cfg.output).resolve()
    return config.output_path / run_id


@contextlib.contextmanager
def staged_output(out: Path) -> Iterator[Path]:
    """Yield a scratch directory next to ``out``; on success it replaces ``out`` in one rename."""
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if out.exists():
        old = out.with_name(f".{out.name}-old")
        shutil.rmtree(old, ignore_errors=True)
        os.replace(out, old)
        os.replace(stage, out)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(stage, out)


def _run_command(args: argparse.Namespace, command: str, body: Callable[[RunContext], Summary]) -> int:
    """Shared driver: load the config, build the context, run ``body``, write report.json."""
    try:
        config_path = Path(args.config).resolve()
        cfg = load_experiment(config_path)
        if cfg.command != command:
            raise ConfigError(f"{config_path} configures {cfg.command!r}, not {command!r}")
        seed = args.seed if getattr(args, "seed", None) is not None else cfg.seed
        if seed is None and cfg.samples():
            raise ConfigError(f"{command} draws random samples; set 'seed' in the config or pass --seed")
        run_id = make_run_id(command, config_path, seed)
        header = {
            "format": REPORT_FORMAT,
            "command": command,
            "seed": seed,
            "config_sha256": sha256_file(config_path),
            "run_id": run_id,
        }
        graph = _resolve_graph(cfg, config_path.parent)
        graph.require_valid()
        header["graph_sha256"] = sha256_json(graph.to_record().model_dump(mode="json"))
        out = _output_dir(args, cfg, config_path.parent, run_id)
        with staged_output(out) as stage:
            ctx = RunContext(cfg=cfg, config_path=config_path, seed=seed, stage=stage, graph=graph, header=header)
            report, lines = body(ctx)
            write_json({**header, **report}, stage / "report.json")
    except (GotError, ValidationError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.exception("%s failed unexpectedly", command)
        print(f"Error: {command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL

    print(f"\n{command} complete ({run_id}):")
    for line in lines:
        print(f"  {line}")
    print(f"  Output: {out}")
    return 0


# converge


def fit_order(epsilons: Sequence[float], deltas: Sequence[float]) -> float | None:
    """Least-squares slope of log|delta| against log epsilon over the positive deltas."""
    pts = [(e, d) for e, d in zip(epsilons, deltas, strict=True) if d > 0]
    if len(pts) < 2:
        return None
    x = np.log([e for e, _ in pts])
    y = np.log([d for _, d in pts])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def projected_plan_diagnostics(
    g: MetricGraph,
    pi: Coupling,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    p: float,
    ot_0: float,
    delta: float,
) -> dict[str, Any]:
    """Push a tube plan to the graph: its graph cost, suboptimality and delta-monotonicity."""
    px = [project_to_graph(g, x) for x in mu.locations]  # type: ignore[arg-type]
    py = [project_to_graph(g, y) for y in nu.locations]  # type: ignore[arg-type]
    c0 = CostMatrix(g.distance_matrix(px, py) ** p, name=f"graph^{p:g}")
    pushed = float(np.sum(pi.dense() * c0.values))
    mono = check_cyclical_monotonicity(pi, c0, delta=delta)
    return {
        "projected_cost": pushed,
        "suboptimality": pushed - ot_0,
        "projected_violations": len(mono.violations),
        "projected_delta": delta,
    }


def run_converge(ctx: RunContext) -> Summary:
    cfg, g = ctx.cfg, ctx.graph
    if not g.has_embeddings:
        raise DomainError("converge needs a graph with embedded edges")
    mu0 = ctx.measure(cfg.source)
    nu0 = ctx.measure(cfg.target)
    reference = solve_transport(mu0, nu0, GraphCost(g), cfg.p)
    diam = g.diameter_bound()
    rows: list[dict[str, Any]] = []
    for eps in tqdm(cfg.epsilons, desc="converge"):
        h = eps / cfg.grid_ratio
        tg = rasterize(g, eps, h)
        mu_e = thicken_measure(mu0, g, tg, ctx.child_seed())
        nu_e = thicken_measure(nu0, g, tg, ctx.child_seed())
        ot_eps = solve_transport(mu_e, nu_e, TubeCost(tg), cfg.p)
        ot_0 = solve_transport(project_measure(mu_e, g), project_measure(nu_e, g), GraphCost(g), cfg.p)
        row: dict[str, Any] = {
            "epsilon": eps,
            "h": h,
            "cells": tg.cell_count,
            "OT_eps": ot_eps.value,
            "OT_0": ot_0.value,
            "abs_delta": abs(ot_eps.value - ot_0.value),
            "gap_eps": ot_eps.certificate.gap,
            "gap_0": ot_0.certificate.gap,
        }
        if cfg.converge.check_projected:
            delta = 2 * (2 * eps**2 + 4 * h * diam)
            row.update(projected_plan_diagnostics(g, ot_eps.coupling, mu_e, nu_e, cfg.p, ot_0.value, delta))
        if cfg.converge.sandwich_pairs:
            sw = sandwich_report(tg, cfg.converge.sandwich_pairs, seed=ctx.child_seed())
            row.update({"sandwich_fraction": sw.fraction, "sandwich_K": sw.K})
        tqdm.write(
            f"  eps={eps:g} h={h:g}: OT_eps={ot_eps.value:.6g} OT_0={ot_0.value:.6g} |delta|={row['abs_delta']:.3e}"
        )
        rows.append(row)
    order = fit_order(cfg.epsilons, [r["abs_delta"] for r in rows])
    write_csv(pd.DataFrame(rows), ctx.stage / "converge.csv")
    report = {"rows": rows, "fitted_order": order, "ot_graph_reference": reference.value}
    lines = [f"epsilons: {len(rows)}", f"OT(mu0, nu0) on the graph: {reference.value:.6g}"]
    if order is not None:
        lines.append(f"fitted order: {order:.3f}")
    else:
        lines.append("fitted order: n/a (fewer than two nonzero deltas)")
    return report, lines


# figure1


def cluster_measure(
    tg: TubeGrid,
    g: MetricGraph,
    nodes: Sequence[str],
    n: int,
    radius: float,
    rng: np.random.Generator,
) -> DiscreteMeasure:
    """n uniform-weight ambient points in Gaussian clusters around ``nodes`` (round robin), inside the mask."""
    centers = [g.embed_point(g.node_point(v)) for v in nodes]
    points = []
    for k in range(n):
        center = centers[k % len(centers)]
        for _ in range(CLUSTER_TRIES):
            cand = center + rng.normal(scale=radius, size=center.shape)
            if tg.contains(cand):
                points.append(AmbientPoint(tuple(cand)))
                break
        else:
            raise DomainError(f"no point of the cluster at {nodes[k % len(nodes)]!r} landed inside the tube")
    return DiscreteMeasure.uniform(points)


def shared_corridors(trajectories: Sequence[Trajectory]) -> tuple[int, int]:
    """Interior cells used by two or more trajectories, and the number of trajectories using them."""
    users: dict[int, set[int]] = {}
    for k, t in enumerate(trajectories):
        for cell in t.cells[1:-1]:
            users.setdefault(cell, set()).add(k)
    shared = {cell: ks for cell, ks in users.items() if len(ks) >= 2}
    sharing = set().union(*shared.values()) if shared else set()
    return len(shared), len(sharing)


def figure_cost_matrix(
    tg: TubeGrid, src: DiscreteMeasure, dst: DiscreteMeasure, metric: Metric, p: float
) -> CostMatrix:
    """Assignment costs for the trajectory figure.

    The pixel stencil already sums squared increments, so its Dijkstra value is the cost as is.
    Euclidean grid lengths are raised to the power p.
    """
    values = geodesic_length_matrix(tg, src.coordinates(), dst.coordinates(), metric)
    if metric == "pixel":
        return CostMatrix(values, name="tube-pixel")
    return CostMatrix(values**p, name=f"tube-length^{p:g}")


def run_figure1(ctx: RunContext) -> Summary:
    cfg, g = ctx.cfg, ctx.graph
    fig = cfg.figure
    h = fig.epsilon / cfg.grid_ratio
    tg = rasterize(g, fig.epsilon, h)
    rng = np.random.default_rng(ctx.child_seed())
    src = cluster_measure(tg, g, fig.source_nodes, fig.n_sources, fig.cluster_radius, rng)
    dst = cluster_measure(tg, g, fig.target_nodes, fig.n_targets, fig.cluster_radius, rng)
    c = figure_cost_matrix(tg, src, dst, fig.metric, cfg.p)
    pi, cert = solve_ot(c, src, dst)
    trajectories = extract_trajectories(tg, pi, src, dst, fig.metric)
    contained = all(bool(tg.contains_many(t.points).all()) for t in trajectories)
    shared_cells, sharing = shared_corridors(trajectories)
    title = "Matched grid geodesics (reconstructed network)" if cfg.graph is None else "Matched grid geodesics"
    trajectory_svg(tg, trajectories, ctx.stage / "figure1.svg", FigureStyle(title=title))
    export_raster(tg, ctx.stage / "mask")
    report = {
        "epsilon": fig.epsilon,
        "h": h,
        "cells": tg.cell_count,
        "network": cfg.network or cfg.graph or "figure1",
        "reconstruction": cfg.graph is None and (cfg.network or "figure1") == "figure1",
        "value": pi.value,
        "gap": cert.gap,
        "trajectories": len(trajectories),
        "mask_contained": contained,
        "shared_cells": shared_cells,
        "trajectories_sharing": sharing,
    }
    lines = [
        f"trajectories: {len(trajectories)} (all inside mask: {contained})",
        f"shared interior cells: {shared_cells} across {sharing} trajectories",
        f"assignment cost: {pi.value:.6g}",
    ]
    return report, lines


# stability


def _edge_from_record(r: EdgeRecord) -> Edge:
    embed = tuple(tuple(float(c) for c in pt) for pt in r.embed) if r.embed is not None else None
    return Edge(r.id, r.tail, r.head, float(r.length), embed)


def deletion_candidates(g: MetricGraph, measures: Sequence[DiscreteMeasure]) -> list[str]:
    """Edges whose removal keeps the network valid and strands no atom inside the edge."""
    out = []
    for eid in g.edge_ids:
        if not g.edited(remove=[eid]).validation.ok:
            continue
        inside = any(
            loc.edge == eid and g.node_at(loc) is None  # type: ignore[union-attr, arg-type]
            for m in measures
            for loc in m.locations
        )
        if not inside:
            out.append(eid)
    return out


def run_stability(ctx: RunContext) -> Summary:
    cfg, g = ctx.cfg, ctx.graph
    mu = ctx.measure(cfg.source)
    nu = ctx.measure(cfg.target)
    edits = [(tuple(e.remove), tuple(_edge_from_record(r) for r in e.add)) for e in cfg.stability.edits]
    if cfg.stability.random_deletions:
        pool = deletion_candidates(g, [mu, nu])
        k = min(cfg.stability.random_deletions, len(pool))
        picks = sorted(ctx.rng.choice(len(pool), size=k, replace=False).tolist()) if k else []
        edits += [((pool[i],), ()) for i in picks]
    rows = []
    for remove, add in tqdm(edits, desc="stability"):
        rep = stability_experiment(g, mu, nu, remove, add, cfg.p)
        rows.append(rep.to_dict())
        tqdm.write(f"  -{list(remove)} +{[e.id for e in add]}: delta={rep.delta:.6g} witness={rep.bound_pi:.6g}")
    frame = pd.DataFrame(rows)
    if not frame.empty:
        frame["removed"] = frame["removed"].map(" ".join)
        frame["added"] = frame["added"].map(" ".join)
    write_csv(frame, ctx.stage / "stability.csv")
    lines = [f"edits: {len(rows)}", "bounds held for every edit"]
    return {"edits": rows}, lines


# monotonicity


def run_monotonicity(ctx: RunContext) -> Summary:
    cfg, g = ctx.cfg, ctx.graph
    sec = cfg.monotonicity
    rows = []
    for k in tqdm(range(sec.instances), desc="monotonicity"):
        mu = ctx.measure(cfg.source, fresh=k > 0)
        nu = ctx.measure(cfg.target, fresh=k > 0)
        res = solve_transport(mu, nu, GraphCost(g), cfg.p)
        mono = check_cyclical_monotonicity(
            res.coupling, res.cost, sec.max_cycle, sec.trials, sec.delta, seed=ctx.child_seed()
        )
        if k == 0:
            record = res.to_record(mono)
            (ctx.stage / "otresult.json").write_text(record.model_dump_json(indent=2) + "\n", encoding="utf-8")
        rows.append(
            {
                "instance": k,
                "value": res.value,
                "gap": res.certificate.gap,
                "slackness_violations": res.certificate.slackness_violations(res.coupling, res.cost),
                "support": len(res.coupling.support()),
                **mono.to_dict(),
            }
        )
    write_csv(pd.DataFrame(rows), ctx.stage / "monotonicity.csv")
    total = sum(r["violations"] for r in rows)
    lines = [f"instances: {len(rows)}", f"violating cycles: {total}"]
    return {"instances": rows, "violations": total}, lines


# dynamic


def build_state(grid: NetworkGrid, spec: StateSpec) -> NetworkState:
    """Grid state from a config section: a Gaussian bump on one edge (or uniform) plus node masses."""
    g = grid.graph
    unknown = sorted(set(spec.nodes) - set(g.nodes))
    if unknown:
        raise DomainError(f"unknown node(s) {unknown}")
    gamma = [spec.nodes.get(v, 0.0) for v in g.nodes]
    bump = spec.bump
    if bump is None:
        return grid.state_from_density(lambda e, x: np.ones_like(x), gamma)
    edge = g.edge(bump.edge)
    if bump.center > edge.length:
        raise DomainError(f"bump centre {bump.center} lies beyond edge {edge.id!r} of length {edge.length}")

    def density(e: str, x: np.ndarray) -> np.ndarray:
        if e != bump.edge:
            return np.zeros_like(x)
        return np.exp(-0.5 * ((x - bump.center) / bump.width) ** 2)

    return grid.state_from_density(density, gamma)


def _solver_options(max_iter: int | None, tol: float | None) -> SolverOptions:
    return SolverOptions(
        max_iter=max_iter if max_iter is not None else config.GOT_PD_MAX_ITER,
        tol=tol if tol is not None else config.GOT_PD_TOL,
    )


def run_dynamic(ctx: RunContext) -> Summary:
    cfg, g = ctx.cfg, ctx.graph
    dyn = cfg.dynamic
    grid = NetworkGrid(g, cells_per_edge=dyn.cells_per_edge)
    mu0 = build_state(grid, dyn.initial)
    mu1 = build_state(grid, dyn.final)
    spec = ActionSpec(cfg.p, cfg.variant)
    res = minimize_action(mu0, mu1, spec, dyn.steps, _solver_options(dyn.max_iter, dyn.tol))
    oracle = wasserstein_p(g, grid.to_measure(mu0), grid.to_measure(mu1), cfg.p)
    residual = discrete_continuity_residual(res.field).max_abs()
    edges, nodes = field_frames(res.field)
    write_csv(edges, ctx.stage / "field.csv")
    write_csv(nodes, ctx.stage / "nodes.csv")
    write_json(res.log, ctx.stage / "residuals.json")
    rel = abs(res.value - oracle) / oracle if oracle > 0 else None
    report = {
        "variant": cfg.variant,
        "p": cfg.p,
        "cells": grid.n_cells,
        "steps": dyn.steps,
        "value": res.value,
        "action": res.action,
        "static_oracle": oracle,
        "relative_error": rel,
        "converged": res.converged,
        "iterations": res.iterations,
        "residuals": res.residuals,
        "continuity_residual": residual,
        "field_sha256": array_digest(res.field.rho, res.field.flux, res.field.gamma),
    }
    lines = [
        f"W_{cfg.p:g} (dynamic): {res.value:.6g} after {res.iterations} iterations",
        f"static oracle: {oracle:.6g}" + (f" (relative error {rel:.2%})" if rel is not None else ""),
        f"continuity residual: {residual:.2e}",
    ]
    return report, lines


# jko


def run_jko(ctx: RunContext) -> Summary:
    cfg, g = ctx.cfg, ctx.graph
    j = cfg.jko
    grid = NetworkGrid(g, cells_per_edge=j.cells_per_edge)
    initial = build_state(grid, j.initial)
    slope, strength = j.potential_slope, j.interaction_strength
    potential = (lambda e, x: slope * x) if slope else None
    interaction = (lambda d: strength * d**2) if strength else None
    spec = EnergySpec(
        kind=j.energy,
        pipes=PipeParameters(j.pipe_D, j.pipe_lam, j.pipe_omega, j.pipe_d),
        gravity=j.gravity,
        pressure=PressureLaw(j.pressure_c, j.pressure_kappa),
        reference=stationary_reference(grid, potential) if j.energy == "relative-entropy" else None,
        potential=potential,
        interaction=interaction,
        entropy_weight=j.entropy_weight,
    )
    opts = JkoOptions(time_steps=j.inner_steps, inner=_solver_options(j.max_iter, j.tol))
    with tqdm(total=j.steps, desc="jko") as pbar:
        flow = run_flow(initial, j.tau, j.steps, cfg.p, spec, cfg.transport, opts, progress=lambda _: pbar.update(1))
    energies = flow.energies
    monotone = all(b <= a + ENERGY_RTOL * max(1.0, abs(a)) for a, b in zip(energies, energies[1:], strict=False))
    mass_error = max(abs(m - 1.0) for m in flow.masses())
    write_csv(flow.energy_frame(), ctx.stage / "energy.csv")
    write_csv(flow.trajectory_frame(), ctx.stage / "density.csv")
    report: dict[str, Any] = {
        "energy": j.energy,
        "transport": cfg.transport,
        "tau": j.tau,
        "steps": j.steps,
        "energies": energies,
        "energy_monotone": monotone,
        "mass_error": mass_error,
        "final_state_sha256": array_digest(flow.states[-1].rho, flow.states[-1].gamma),
    }
    lines = [
        f"steps: {j.steps}, energy {energies[0]:.6g} -> {energies[-1]:.6g} (monotone: {monotone})",
        f"mass error: {mass_error:.2e}",
    ]
    if j.compare_diffusion:
        gap = diffusion_gap(initial, flow.states[-1], j.tau * j.steps, j.entropy_weight, potential, cfg.p)
        report["diffusion_l1_gap"] = gap
        lines.append(f"L1 gap to explicit diffusion: {gap:.3e}")
    return report, lines


def diffusion_gap(
    initial: NetworkState,
    final: NetworkState,
    horizon: float,
    weight: float,
    potential: Callable[[str, np.ndarray], np.ndarray] | None,
    p: float,
) -> float:
    """L1 distance between ``final`` and the explicit Fokker-Planck solution at ``horizon``.

    Only single-edge networks with p = 2 qualify: there the JKO flow of the weighted entropy
    (plus potential) and the no-flux drift-diffusion equation describe the same evolution.
    """
    grid = initial.grid
    if len(grid.graph.edges) != 1 or p != 2:
        raise DomainError("the diffusion comparison needs a single-edge network and p = 2")
    if horizon <= 0:
        return 0.0
    dt_max = 0.4 * float(grid.cell_dx.min()) ** 2 / weight
    n = max(1, math.ceil(horizon / dt_max))
    scaled = (lambda e, x: potential(e, x) / weight) if potential is not None else None
    f = simulate_drift_diffusion(initial, horizon / n, n, diffusion=weight, potential=scaled)
    return float(np.dot(np.abs(final.rho - f.rho[-1]), grid.cell_dx))


# Commands


def cmd_converge(args: argparse.Namespace) -> int:
    """Converge command: |OT_eps - OT_0| per epsilon and the fitted order.

    Args:
        args: Parsed arguments with config, out, seed

    Returns:
        Exit code (0 on success, 2 on config/domain errors, 3 on solver failures)
    """
    return _run_command(args, "converge", run_converge)


def cmd_figure1(args: argparse.Namespace) -> int:
    """Figure command: SVG of matched grid geodesics with a sidecar CSV and the raster mask."""
    return _run_command(args, "figure1", run_figure1)


def cmd_stability(args: argparse.Namespace) -> int:
    return _run_command(args, "stability", run_stability)


def cmd_monotonicity(args: argparse.Namespace) -> int:
    return _run_command(args, "monotonicity", run_monotonicity)


def cmd_dynamic(args: argparse.Namespace) -> int:
    return _run_command(args, "dynamic", run_dynamic)


def cmd_jko(args: argparse.Namespace) -> int:
    return _run_command(args, "jko", run_jko)


def build_parser() -> argparse.ArgumentParser:
    """Build argument parser with subcommands.

    Returns:
        Configured ArgumentParser
    """
    parser = argparse.ArgumentParser(
        prog="got",
        description="got CLI: optimal transport on metric graphs and epsilon-tubes",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    helps = {
        "converge": "Tube OT vs graph OT as epsilon shrinks",
        "figure1": "Trajectory figure on a branching network",
        "stability": "OT under edge deletion/insertion with bounds",
        "monotonicity": "Cyclical monotonicity of optimal plans",
        "dynamic": "Minimal-action transport on a network grid",
        "jko": "JKO gradient flow of a network energy",
    }
    for name, text in helps.items():
        sub = subparsers.add_parser(name, help=text)
        sub.add_argument("--config", type=Path, required=True, help="Experiment config (YAML or JSON)")
        sub.add_argument(
            "--out",
            type=Path,
            default=None,
            help="Output directory (default: 'output' from the config, else GOT_OUTPUT_DIR/<run id>)",
        )
        sub.add_argument("--seed", type=int, default=None, help="Seed override (recorded in every output header)")
        sub.epilog = f"Example:\n  got {name} --config experiments/{name}.yaml --out ./runs/{name} --seed 7\n"

    return parser


def main() -> None:
    """Main entry point for CLI."""
    parser = build_parser()
    args = parser.parse_args()
    logging.basicConfig(level=config.GOT_LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "converge":
        rc = cmd_converge(args)
    elif args.command == "figure1":
        rc = cmd_figure1(args)
    elif args.command == "stability":
        rc = cmd_stability(args)
    elif args.command == "monotonicity":
        rc = cmd_monotonicity(args)
    elif args.command == "dynamic":
        rc = cmd_dynamic(args)
    elif args.command == "jko":
        rc = cmd_jko(args)
    else:
        parser.print_help()
        rc = 2

    sys.exit(rc)


if __name__ == "__main__":
    main()
