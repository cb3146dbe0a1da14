"""Run, training, evaluation and instance files.

Everything is YAML on disk (JSON works too, being a YAML subset) and is
validated by pydantic models that forbid unknown keys.
"""
import typing as T
from pathlib import Path

import numpy as np
import yaml
from pydantic import (
    BaseModel,
    Extra,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    confloat,
    conint,
    root_validator,
    validator,
)

from graphbridge.costs import RunningCostSpec
from graphbridge.exceptions import BridgeParseError, BridgeValidationError, fix_exception
from graphbridge.graph_core import (
    DirectedGraph,
    ProblemInstance,
    RateGenerator,
    marginal_from_pairs,
)

TRAIN_PRESETS: T.Dict[str, T.Dict[str, T.Any]] = {
    "supply_chain": {"K": 100, "rollouts": 5000, "lambda_td": 0.2},
    "msm": {"K": 200, "rollouts": 1024, "iterations": 100, "lambda_td": 0.2},
}


class StrictModel(BaseModel):
    class Config:
        extra = Extra.forbid

    @classmethod
    def parse_from_yaml(cls, f: T.Union[Path, str, T.TextIO], filename: str = None):
        "Parse from a file-like or Path"
        if isinstance(f, (str, Path)):
            filename = str(f)
            data = load_yaml(f)
        else:
            filename = filename or getattr(f, "name", None)
            data = yaml.safe_load(f)
        return cls.parse_data(data or {}, filename)

    @classmethod
    def parse_data(cls, data: T.Any, filename: str = None):
        try:
            return cls.parse_obj(data)
        except ValidationError as e:
            raise validation_error(e, filename) from e


def validation_error(e: ValidationError, filename: str = None) -> BridgeValidationError:
    lines = [
        f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}"
        for error in e.errors()
    ]
    return BridgeValidationError("Invalid configuration:\n" + "\n".join(lines), filename)


def load_yaml(path: T.Union[str, Path]) -> T.Any:
    try:
        with open(path) as f:
            return yaml.safe_load(f)
    except FileNotFoundError as e:
        raise BridgeValidationError(f"File not found: {e.filename}") from e
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise BridgeParseError(
            f"Malformed YAML/JSON: {e}", str(path), mark.line + 1 if mark else None
        ) from e


class CostModel(StrictModel):
    kind: T.Literal["zero", "node_table", "congestion"] = "zero"
    table: T.Optional[T.List[float]] = None
    weight: confloat(ge=0) = 0.0
    exclude: T.List[conint(ge=0)] = []
    b_scale: PositiveFloat = 1.0

    @root_validator(skip_on_failure=True)
    def table_matches_kind(cls, values):
        if values["kind"] == "node_table" and values.get("table") is None:
            raise ValueError("a node_table cost needs 'table'")
        return values

    def to_spec(self, weight_override: float = None) -> RunningCostSpec:
        if self.kind == "node_table":
            spec = RunningCostSpec.from_table(self.table)
        elif self.kind == "congestion":
            spec = RunningCostSpec.congestion(self.weight, self.exclude, self.b_scale)
        else:
            spec = RunningCostSpec.zero()
        return spec if weight_override is None else spec.with_weight(weight_override)


class EdgeModel(StrictModel):
    src: conint(ge=0)
    dst: conint(ge=0)
    rate: confloat(ge=0) = 1.0
    cap: T.Optional[confloat(ge=0)] = None
    cost: T.Optional[float] = None


class InstanceFile(StrictModel):
    nodes: PositiveInt
    edges: T.List[EdgeModel] = []
    mu: T.List[T.Tuple[conint(ge=0), confloat(ge=0)]]
    nu: T.List[T.Tuple[conint(ge=0), confloat(ge=0)]]
    K: PositiveInt
    seed: int = 0
    name: str = "instance"
    cost: CostModel = CostModel()
    labels: T.Optional[T.Dict[int, str]] = None
    rate_table: T.Optional[T.List[T.List[confloat(ge=0)]]] = None
    mass: T.Optional[PositiveFloat] = None

    @validator("rate_table")
    def rate_rows_match_edges(cls, table, values):
        edges = values.get("edges") or []
        if table is not None and any(len(row) != len(edges) for row in table):
            raise ValueError(f"every rate_table row needs {len(edges)} entries")
        return table

    def _edge_values(self, attribute):
        values = [getattr(e, attribute) for e in self.edges]
        if all(v is None for v in values):
            return None
        if any(v is None for v in values):
            raise BridgeValidationError(f"Either every edge or no edge needs a '{attribute}'")
        return values

    def to_instance(self, weight_override: float = None, K: int = None) -> ProblemInstance:
        graph = DirectedGraph(
            self.nodes,
            [(e.src, e.dst) for e in self.edges],
            capacities=self._edge_values("cap"),
            costs=self._edge_values("cost"),
            labels=self.labels,
        )
        rates = self.rate_table if self.rate_table is not None else [e.rate for e in self.edges]
        return ProblemInstance(
            generator=RateGenerator(graph, np.asarray(rates, dtype=float)),
            mu=marginal_from_pairs(self.mu, self.nodes, "mu"),
            nu=marginal_from_pairs(self.nu, self.nodes, "nu"),
            K=K or self.K,
            cost=self.cost.to_spec(weight_override),
            seed=self.seed,
            name=self.name,
            mass=self.mass,
        )


class TrainConfig(StrictModel):
    """Training knobs; a preset fills in every field that is not given."""

    preset: T.Optional[T.Literal["supply_chain", "msm"]] = None
    iterations: PositiveInt = 50
    rollouts: PositiveInt = 1024
    K: T.Optional[PositiveInt] = None  # overrides the instance horizon
    lambda_td: confloat(ge=0) = 0.2
    learning_rate: PositiveFloat = 0.05
    final_lr_fraction: confloat(ge=0, le=1) = 0.1
    weight_decay: confloat(ge=0) = 0.0
    inner_steps: PositiveInt = 10
    seed: int = 0
    checkpoint_every: conint(ge=0) = 0
    clamp_warning_threshold: confloat(ge=0, le=1) = 0.01
    cost_weight: T.Optional[confloat(ge=0)] = None
    resume_from: T.Optional[Path] = None

    @root_validator(pre=True)
    def apply_preset(cls, values):
        preset = values.get("preset")
        if preset in TRAIN_PRESETS:
            return {**TRAIN_PRESETS[preset], **values}
        return values


class EvalConfig(StrictModel):
    rollouts: PositiveInt = 5000
    seed: int = 1
    top_k: PositiveInt = 100
    target_set: T.Optional[T.List[conint(ge=0)]] = None
    mass: T.Optional[PositiveFloat] = None
    path_overhead: bool = False


class DimacsSource(StrictModel):
    path: Path
    K: PositiveInt = 100
    endpoint_mode: T.Literal["uniform", "volume-weighted", "volume"] = "volume-weighted"
    rate_preset: T.Literal["uniform", "capacity", "inverse_cost"] = "capacity"
    rate_scale: PositiveFloat = 1.0
    cost: CostModel = CostModel()


class FixtureSource(StrictModel):
    name: str
    options: T.Dict[str, T.Any] = {}


class RunConfig(StrictModel):
    instance: T.Optional[Path] = None
    dimacs: T.Optional[DimacsSource] = None
    fixture: T.Optional[FixtureSource] = None
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    @root_validator(skip_on_failure=True)
    def one_source(cls, values):
        given = [name for name in ("instance", "dimacs", "fixture") if values.get(name)]
        if len(given) != 1:
            raise ValueError(
                "give exactly one of 'instance', 'dimacs' or 'fixture'"
                + (f" (got {', '.join(given)})" if given else "")
            )
        return values

    def resolved(self, base: Path) -> "RunConfig":
        "Copy with relative paths taken relative to ``base``"
        changes: T.Dict[str, T.Any] = {}
        if self.instance is not None and not self.instance.is_absolute():
            changes["instance"] = base / self.instance
        if self.dimacs is not None and not self.dimacs.path.is_absolute():
            changes["dimacs"] = self.dimacs.copy(update={"path": base / self.dimacs.path})
        train = self.train
        if train.resume_from is not None and not train.resume_from.is_absolute():
            changes["train"] = train.copy(update={"resume_from": base / train.resume_from})
        return self.copy(update=changes)

    def load_instance(self) -> ProblemInstance:
        from graphbridge import fixtures
        from graphbridge.dimacs import load_dimacs_mcf

        weight = self.train.cost_weight
        if self.instance is not None:
            return load_instance_file(self.instance, weight, self.train.K)
        if self.dimacs is not None:
            source = self.dimacs
            return load_dimacs_mcf(source.path).to_instance(
                self.train.K or source.K,
                endpoint_mode=source.endpoint_mode,
                rate_preset=source.rate_preset,
                rate_scale=source.rate_scale,
                cost=source.cost.to_spec(weight),
                seed=self.train.seed,
            )
        instance = fixtures.load_fixture(self.fixture.name, **self.fixture.options)
        if weight is not None:
            instance = instance.with_changes(cost=instance.cost.with_weight(weight))
        if self.train.K:
            instance = instance.with_changes(K=self.train.K)
        return instance


def load_run_config(path: T.Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise BridgeValidationError(f"Config file not found: {path}")
    config = RunConfig.parse_data(load_yaml(path) or {}, str(path))
    return config.resolved(path.parent)


def load_instance_file(
    path: T.Union[str, Path], weight_override: float = None, K: int = None
) -> ProblemInstance:
    path = Path(path)
    if not path.exists():
        raise BridgeValidationError(f"Instance file not found: {path}")
    model = InstanceFile.parse_data(load_yaml(path) or {}, str(path))
    try:
        return model.to_instance(weight_override, K)
    except BridgeValidationError as e:
        raise fix_exception("Invalid instance: {e}", e, str(path)) from e


def load_blocks(path: T.Union[str, Path]) -> T.Tuple[TrainConfig, EvalConfig]:
    "Only the ``train`` and ``eval`` blocks of a config file; its source is ignored"
    path = Path(path)
    if not path.exists():
        raise BridgeValidationError(f"Config file not found: {path}")
    data = load_yaml(path) or {}
    if not isinstance(data, dict):
        raise BridgeValidationError("Config file must hold a mapping", str(path))
    return (
        TrainConfig.parse_data(data.get("train") or {}, str(path)),
        EvalConfig.parse_data(data.get("eval") or {}, str(path)),
    )
