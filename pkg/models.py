from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

GRAPH_FORMAT = "mgraph/1"
MEASURE_FORMAT = "measure/1"
OTRESULT_FORMAT = "otresult/1"


class EdgeRecord(BaseModel):
    id: str = Field(..., min_length=1, description="Edge identifier, unique within the graph")
    tail: str = Field(..., description="Node at coord 0")
    head: str = Field(..., description="Node at coord = length")
    length: float = Field(..., description="Edge length; validate_graph reports non-positive values")
    embed: list[list[float]] | None = Field(
        default=None,
        description="Optional polyline in R^2 or R^3 from tail to head; its length must match `length`",
    )

    @field_validator("embed")
    @classmethod
    def _validate_embed(cls, v: list[list[float]] | None) -> list[list[float]] | None:
        if v is None:
            return v
        if len(v) < 2:
            raise ValueError("embed polyline needs at least two points")
        dims = {len(pt) for pt in v}
        if len(dims) != 1 or dims.pop() not in (2, 3):
            raise ValueError("embed points must all have dimension 2 or all dimension 3")
        return v


class GraphFile(BaseModel):
    format: Literal["mgraph/1"] = Field(default=GRAPH_FORMAT)
    nodes: list[str] = Field(default_factory=list)
    edges: list[EdgeRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _validate_references(self) -> GraphFile:
        ids = [e.id for e in self.edges]
        if len(ids) != len(set(ids)):
            raise ValueError("edge ids must be unique")
        known = set(self.nodes)
        for e in self.edges:
            for node in (e.tail, e.head):
                if node not in known:
                    raise ValueError(f"edge {e.id!r} references unknown node {node!r}")
        return self


class AtomRecord(BaseModel):
    weight: float = Field(..., ge=0)
    edge: str | None = Field(default=None, description="Edge id (graph atoms)")
    coord: float | None = Field(default=None, description="Arc-length coordinate on the edge (graph atoms)")
    coords: list[float] | None = Field(default=None, description="Ambient coordinates (ambient atoms)")


class MeasureFile(BaseModel):
    format: Literal["measure/1"] = Field(default=MEASURE_FORMAT)
    kind: Literal["graph", "ambient"]
    atoms: list[AtomRecord] = Field(..., min_length=1)

    @model_validator(mode="after")
    def _validate_atoms(self) -> MeasureFile:
        for i, atom in enumerate(self.atoms):
            if self.kind == "graph" and (atom.edge is None or atom.coord is None or atom.coords is not None):
                raise ValueError(f"atom {i}: graph atoms need 'edge' and 'coord' only")
            if self.kind == "ambient" and (atom.coords is None or atom.edge is not None):
                raise ValueError(f"atom {i}: ambient atoms need 'coords' only")
            if atom.coords is not None and len(atom.coords) not in (2, 3):
                raise ValueError(f"atom {i}: ambient dimension must be 2 or 3")
        total = sum(a.weight for a in self.atoms)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"atom weights must sum to 1 (got {total:.12g})")
        return self


class CouplingEntryRecord(BaseModel):
    i: int = Field(..., ge=0)
    j: int = Field(..., ge=0)
    mass: float = Field(..., ge=0)


class OTResultFile(BaseModel):
    format: Literal["otresult/1"] = Field(default=OTRESULT_FORMAT)
    cost: str = Field(..., description="Cost handle name, e.g. 'graph^2' or 'tube'")
    value: float
    coupling: list[CouplingEntryRecord]
    phi: list[float]
    psi: list[float]
    gap: float
    monotonicity: dict[str, object] | None = None


# Experiment configuration (one YAML or JSON file per run)

Command = Literal["converge", "figure1", "stability", "monotonicity", "dynamic", "jko"]
COMMANDS: tuple[str, ...] = ("converge", "figure1", "stability", "monotonicity", "dynamic", "jko")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SamplerSpec(_Section):
    n: int = Field(..., ge=1, description="Number of atoms, each of weight 1/n")
    seed: int | None = Field(default=None, description="Overrides the seed drawn from the run generator")
    edges: list[str] | None = Field(default=None, description="Restrict sampling to these edges")


class MeasureSource(_Section):
    file: str | None = Field(default=None, description="measure/1 JSON file, relative to the config file")
    sample: SamplerSpec | None = None

    @model_validator(mode="after")
    def _exactly_one(self) -> MeasureSource:
        if (self.file is None) == (self.sample is None):
            raise ValueError("give exactly one of 'file' and 'sample'")
        return self


class ConvergeSection(_Section):
    sandwich_pairs: int = Field(default=200, ge=0, description="Lifted pairs per epsilon; 0 skips the check")
    check_projected: bool = Field(default=True, description="Report the projected-plan diagnostics")


class FigureSection(_Section):
    epsilon: float = Field(default=0.08, gt=0)
    n_sources: int = Field(default=50, ge=1)
    n_targets: int = Field(default=50, ge=1)
    source_nodes: list[str] = Field(default_factory=lambda: ["s"], min_length=1)
    target_nodes: list[str] = Field(default_factory=lambda: ["t1", "t2"], min_length=1)
    cluster_radius: float = Field(default=0.06, gt=0, description="Gaussian scale of the point clusters")
    metric: Literal["length", "pixel"] = "pixel"


class EditSpec(_Section):
    remove: list[str] = Field(default_factory=list)
    add: list[EdgeRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _non_empty(self) -> EditSpec:
        if not self.remove and not self.add:
            raise ValueError("an edit must remove or add at least one edge")
        return self


class StabilitySection(_Section):
    edits: list[EditSpec] = Field(default_factory=list)
    random_deletions: int = Field(default=0, ge=0, description="Extra connectivity-preserving single-edge deletions")


class MonotonicitySection(_Section):
    instances: int = Field(default=1, ge=1, description="Independently sampled instances to solve and check")
    max_cycle: int = Field(default=8, ge=2)
    trials: int = Field(default=1000, ge=1)
    delta: float = Field(default=1e-8, ge=0)


class BumpSpec(_Section):
    """Gaussian bump on one edge, zero elsewhere."""

    edge: str
    center: float = Field(..., ge=0)
    width: float = Field(default=0.08, gt=0)


class StateSpec(_Section):
    bump: BumpSpec | None = Field(default=None, description="None means the uniform density")
    nodes: dict[str, float] = Field(default_factory=dict, description="Node masses (reservoir variants)")

    @field_validator("nodes")
    @classmethod
    def _nonnegative(cls, v: dict[str, float]) -> dict[str, float]:
        if any(m < 0 for m in v.values()):
            raise ValueError("node masses must be nonnegative")
        return v


class DynamicSection(_Section):
    cells_per_edge: int = Field(default=64, ge=2)
    steps: int = Field(default=32, ge=1)
    initial: StateSpec = Field(default_factory=StateSpec)
    final: StateSpec = Field(default_factory=StateSpec)
    max_iter: int | None = Field(default=None, ge=1, description="Defaults to GOT_PD_MAX_ITER")
    tol: float | None = Field(default=None, gt=0, description="Defaults to GOT_PD_TOL")


class JkoSection(_Section):
    cells_per_edge: int = Field(default=32, ge=2)
    tau: float = Field(default=0.01, gt=0)
    steps: int = Field(default=10, ge=0)
    inner_steps: int = Field(default=16, ge=1)
    energy: Literal["relative-entropy", "iso3", "log-entropy"] = "log-entropy"
    entropy_weight: float = Field(default=1.0, gt=0)
    potential_slope: float = Field(default=0.0, description="V(x) = slope * x on every edge")
    interaction_strength: float = Field(default=0.0, ge=0, description="W(d) = strength * d^2")
    pressure_c: float = Field(default=1.0, gt=0)
    pressure_kappa: float = Field(default=2.0, ge=1)
    pipe_D: float = Field(default=1.0, gt=0)
    pipe_lam: float = Field(default=2.0, gt=0)
    pipe_omega: float = 0.0
    pipe_d: float = 0.0
    gravity: float = 9.81
    initial: StateSpec = Field(default_factory=StateSpec)
    compare_diffusion: bool = Field(default=False, description="Also run the explicit heat flow and report the L1 gap")
    max_iter: int | None = Field(default=None, ge=1)
    tol: float | None = Field(default=None, gt=0)


class ExperimentConfig(_Section):
    command: Command
    graph: str | None = Field(default=None, description="mgraph/1 file, relative to the config file")
    network: str | None = Field(default=None, description="Built-in network name")
    source: MeasureSource | None = None
    target: MeasureSource | None = None
    epsilons: list[float] = Field(default_factory=list)
    grid_ratio: float = Field(default=8.0, ge=2, description="h = epsilon / grid_ratio")
    p: float = Field(default=2.0, ge=1)
    variant: Literal["kirchhoff", "reservoir-net", "reservoir-per-edge"] = "kirchhoff"
    transport: Literal["dynamic", "static"] = "dynamic"
    output: str | None = None
    seed: int | None = None
    converge: ConvergeSection = Field(default_factory=ConvergeSection)
    figure: FigureSection = Field(default_factory=FigureSection)
    stability: StabilitySection = Field(default_factory=StabilitySection)
    monotonicity: MonotonicitySection = Field(default_factory=MonotonicitySection)
    dynamic: DynamicSection = Field(default_factory=DynamicSection)
    jko: JkoSection = Field(default_factory=JkoSection)

    @field_validator("epsilons")
    @classmethod
    def _strictly_decreasing(cls, v: list[float]) -> list[float]:
        if any(e <= 0 for e in v):
            raise ValueError("epsilons must be positive")
        if any(b >= a for a, b in zip(v, v[1:], strict=False)):
            raise ValueError("epsilons must be strictly decreasing")
        return v

    @model_validator(mode="after")
    def _validate_command(self) -> ExperimentConfig:
        if self.graph is not None and self.network is not None:
            raise ValueError("give at most one of 'graph' and 'network'")
        if self.graph is None and self.network is None and self.command != "figure1":
            raise ValueError(f"command {self.command!r} needs a 'graph' file or a built-in 'network'")
        if self.command == "converge" and not self.epsilons:
            raise ValueError("converge needs a non-empty 'epsilons' list")
        if self.command in ("converge", "stability", "monotonicity") and (self.source is None or self.target is None):
            raise ValueError(f"command {self.command!r} needs 'source' and 'target' measures")
        if self.command == "stability" and not self.stability.edits and not self.stability.random_deletions:
            raise ValueError("stability needs 'edits' or 'random_deletions'")
        return self

    def samples(self) -> bool:
        """True when the run draws random numbers, so a seed is mandatory."""
        if self.command == "figure1":
            return True
        if self.command == "converge":
            return True  # thickening jitters every atom
        if self.command == "stability" and self.stability.random_deletions:
            return True
        return any(m is not None and m.sample is not None for m in (self.source, self.target))

    def referenced_files(self) -> list[str]:
        files = [self.graph] if self.graph else []
        files += [m.file for m in (self.source, self.target) if m is not None and m.file is not None]
        return files


__all__ = [
    "GRAPH_FORMAT",
    "MEASURE_FORMAT",
    "OTRESULT_FORMAT",
    "EdgeRecord",
    "GraphFile",
    "AtomRecord",
    "MeasureFile",
    "CouplingEntryRecord",
    "OTResultFile",
    "COMMANDS",
    "SamplerSpec",
    "MeasureSource",
    "ConvergeSection",
    "FigureSection",
    "EditSpec",
    "StabilitySection",
    "MonotonicitySection",
    "BumpSpec",
    "StateSpec",
    "DynamicSection",
    "JkoSection",
    "ExperimentConfig",
    "ValidationError",
]
