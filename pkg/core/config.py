"""
Experiment configuration: parsing, validation and (de)serialization.

Configs are JSON documents with a schema_version field. Unknown keys at any
level are errors. Validation reports every problem as a ValidationError whose
location is the dotted field name.
"""
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from core.federation import FLConfig
from core.models import ModelSpec
from core.synthdata import CenterSpec, default_prototypes
from core.types import Algorithm, ConfigError, Pretext, SimulatorError, ValidationError, ViewMode
from utils.seeding import derive_seed

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RunVariant:
    """A named pipeline variant: an FL algorithm plus an optional SSL pretext for initialization."""
    name: str
    label: str
    algorithm: Algorithm
    pretext: Optional[Pretext] = None


VARIANTS: Dict[str, RunVariant] = {v.name: v for v in (
    RunVariant("local_only", "LOCAL", Algorithm.LOCAL_ONLY),
    RunVariant("fedavg", "FedAvg", Algorithm.FEDAVG),
    RunVariant("fedprox", "FedProx", Algorithm.FEDPROX),
    RunVariant("fl_bt", "FL-BT", Algorithm.FL_BT),
    RunVariant("ssl_fl_bt", "SSL-FL-BT", Algorithm.FL_BT, Pretext.BOTH),
    RunVariant("ssl_c_fl_bt", "SSL-C-FL-BT", Algorithm.FL_BT, Pretext.CE),
    RunVariant("ssl_r_fl_bt", "SSL-R-FL-BT", Algorithm.FL_BT, Pretext.MSE),
)}


# =============================================================================
# SECTIONS
# =============================================================================

@dataclass(frozen=True)
class CenterSettings:
    center_id: int
    n_per_class: int
    stain_matrix: Tuple[Tuple[float, ...], ...]
    stain_offset: Tuple[float, ...]
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "stain_matrix", tuple(tuple(float(v) for v in row) for row in self.stain_matrix))
        object.__setattr__(self, "stain_offset", tuple(float(v) for v in self.stain_offset))


DEFAULT_CENTERS = (
    CenterSettings(0, 24, ((0.95, 0.05, 0.0), (0.05, 0.85, 0.1), (0.0, 0.1, 0.9)), (0.05, -0.05, 0.1), 0.05),
    CenterSettings(1, 12, ((0.8, 0.2, 0.1), (0.0, 0.95, 0.0), (0.1, 0.0, 0.7)), (0.15, 0.0, -0.05), 0.08),
    CenterSettings(2, 32, ((1.0, 0.0, 0.15), (0.1, 0.7, 0.1), (0.0, 0.2, 0.95)), (-0.05, 0.1, 0.05), 0.06),
)


@dataclass(frozen=True)
class DataSettings:
    image_size: int = 16
    n_classes: int = 4
    centers: Tuple[CenterSettings, ...] = DEFAULT_CENTERS
    pseudo_n: int = 1000


@dataclass(frozen=True)
class SSLSettings:
    epochs: int = 20
    lr: float = 0.001
    batch: int = 4
    grid: int = 4
    k_swaps: int = 4
    holdout: float = 0.2
    pretext: Pretext = Pretext.BOTH


@dataclass(frozen=True)
class EvalSettings:
    k_folds: int = 5


@dataclass(frozen=True)
class PathSettings:
    data: str = "data"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass
class ExperimentConfig:
    """
    Everything needed to rerun an experiment bit-for-bit.

    fl.seed is never stored: it is derived from master_seed like every other seed.
    """
    master_seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSettings = field(default_factory=DataSettings)
    ssl: SSLSettings = field(default_factory=SSLSettings)
    fl: FLConfig = field(default_factory=FLConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    variants: Tuple[str, ...] = tuple(VARIANTS)
    schema_version: int = SCHEMA_VERSION

    # -------------------------------------------------------------------------
    # Derived values
    # -------------------------------------------------------------------------

    def seed(self, *tags) -> int:
        return derive_seed(self.master_seed, *tags)

    def center_specs(self) -> List[CenterSpec]:
        prototypes = tuple(default_prototypes(self.data.n_classes, self.data.image_size, self.seed("prototypes")))
        return [CenterSpec(c.center_id, c.n_per_class, prototypes, c.stain_matrix, c.stain_offset, c.sigma,
                           self.data.image_size)
                for c in self.data.centers]

    def fl_config(self, algorithm: Optional[Algorithm] = None, ssl_init: Optional[str] = None) -> FLConfig:
        changes = {"seed": self.seed("fl")}
        if algorithm is not None:
            changes["algorithm"] = algorithm
        if ssl_init is not None:
            changes["ssl_init"] = ssl_init
        return dataclasses.replace(self.fl, **changes)

    # -------------------------------------------------------------------------
    # Validation
    # -------------------------------------------------------------------------

    def validate(self) -> List[ValidationError]:
        """Return every problem found; an empty list means the config is usable."""
        errors: List[ValidationError] = []

        def need(ok: bool, location: str, message: str, severity: str = "error"):
            if not ok:
                errors.append(ValidationError(severity, message, location))

        need(self.schema_version == SCHEMA_VERSION, "schema_version",
             f"unsupported schema version {self.schema_version} (expected {SCHEMA_VERSION})")

        d = self.data
        need(d.image_size >= 1, "data.image_size", "must be >= 1")
        need(d.n_classes >= 1, "data.n_classes", "must be >= 1")
        need(d.pseudo_n >= 1, "data.pseudo_n", "must be >= 1")
        need(len(d.centers) >= 1, "data.centers", "at least one center is required")
        ids = [c.center_id for c in d.centers]
        need(len(set(ids)) == len(ids), "data.centers", f"duplicate center ids {ids}")
        stains = [(c.stain_matrix, c.stain_offset) for c in d.centers]
        need(len(set(stains)) == len(stains), "data.centers", "centers must have distinct stain transforms")
        for i, c in enumerate(d.centers):
            where = f"data.centers[{i}]"
            need(c.center_id >= 0, f"{where}.center_id", "must be >= 0")
            need(c.n_per_class >= self.eval.k_folds, f"{where}.n_per_class",
                 f"must be >= eval.k_folds ({self.eval.k_folds}) for stratified folds")
            need(len(c.stain_matrix) == 3 and all(len(r) == 3 for r in c.stain_matrix),
                 f"{where}.stain_matrix", "must be 3x3")
            need(len(c.stain_offset) == 3, f"{where}.stain_offset", "must have 3 entries")
            need(c.sigma >= 0, f"{where}.sigma", "must be >= 0")

        m = self.model
        need(m.input_dims == (3, d.image_size, d.image_size), "model.input_dims",
             f"must be [3, {d.image_size}, {d.image_size}] to match data.image_size")
        need(m.n_classes == d.n_classes, "model.n_classes", "must equal data.n_classes")
        need(m.n_centers == len(d.centers), "model.n_centers", "must equal the number of centers")

        s = self.ssl
        need(s.epochs >= 0, "ssl.epochs", "must be >= 0")
        need(s.lr > 0, "ssl.lr", "must be > 0")
        need(s.batch >= 1, "ssl.batch", "must be >= 1")
        need(s.grid >= 1 and d.image_size % s.grid == 0, "ssl.grid", "must divide data.image_size")
        need(0 <= 2 * s.k_swaps <= s.grid * s.grid, "ssl.k_swaps", "needs 0 <= 2 * k_swaps <= grid^2")
        need(0.0 <= s.holdout < 1.0, "ssl.holdout", "must lie in [0, 1)")

        errors.extend(self.fl.validate("fl"))
        need(self.eval.k_folds >= 2, "eval.k_folds", "must be >= 2")

        need(len(self.variants) >= 1, "variants", "at least one variant is required")
        for name in self.variants:
            need(name in VARIANTS, "variants", f"unknown variant '{name}' (known: {', '.join(VARIANTS)})")
        if any(VARIANTS[n].pretext is not None for n in self.variants if n in VARIANTS):
            need(len(d.centers) >= 2, "variants", "SSL variants need at least 2 centers")
        return errors

    def require_valid(self) -> None:
        errors = [e for e in self.validate() if e.severity == "error"]
        if errors:
            raise ConfigError("invalid config: " + "; ".join(str(e) for e in errors))

    # -------------------------------------------------------------------------
    # JSON
    # -------------------------------------------------------------------------

    def to_json(self) -> Dict[str, Any]:
        fl = self.fl.to_json()
        del fl["seed"]
        data = dataclasses.asdict(self.data)
        data["centers"] = [dataclasses.asdict(c) for c in self.data.centers]
        ssl = dataclasses.asdict(self.ssl)
        ssl["pretext"] = self.ssl.pretext.value
        return {
            "schema_version": self.schema_version,
            "master_seed": self.master_seed,
            "model": self.model.to_json(),
            "data": _plain(data),
            "ssl": ssl,
            "fl": fl,
            "eval": dataclasses.asdict(self.eval),
            "paths": dataclasses.asdict(self.paths),
            "variants": list(self.variants),
        }

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "ExperimentConfig":
        """
        Build a config from a parsed JSON document; missing keys take defaults.

        Raises:
            ConfigError: Unknown keys or values of the wrong type, naming the field
        """
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        _check_keys(doc, {f.name for f in dataclasses.fields(cls)}, "")
        kwargs: Dict[str, Any] = {}
        for key in ("schema_version", "master_seed"):
            if key in doc:
                kwargs[key] = _integer(doc[key], key)
        if "model" in doc:
            kwargs["model"] = _section(ModelSpec, doc["model"], "model")
        if "data" in doc:
            data = dict(_mapping(doc["data"], "data"))
            _check_keys(data, {f.name for f in dataclasses.fields(DataSettings)}, "data")
            if "centers" in data:
                centers = data["centers"]
                if not isinstance(centers, list):
                    raise ConfigError("data.centers: must be a list")
                data["centers"] = tuple(_section(CenterSettings, c, f"data.centers[{i}]", partial=False)
                                        for i, c in enumerate(centers))
            kwargs["data"] = _section(DataSettings, data, "data")
        if "ssl" in doc:
            ssl = dict(_mapping(doc["ssl"], "ssl"))
            if "pretext" in ssl:
                ssl["pretext"] = _enum(Pretext, ssl["pretext"], "ssl.pretext")
            kwargs["ssl"] = _section(SSLSettings, ssl, "ssl")
        if "fl" in doc:
            fl = dict(_mapping(doc["fl"], "fl"))
            _check_keys(fl, {f.name for f in dataclasses.fields(FLConfig)} - {"seed"}, "fl")
            if "algorithm" in fl:
                fl["algorithm"] = _enum(Algorithm, fl["algorithm"], "fl.algorithm")
            if "bt_views" in fl:
                fl["bt_views"] = _enum(ViewMode, fl["bt_views"], "fl.bt_views")
            _check_types(FLConfig, fl, "fl")
            kwargs["fl"] = FLConfig(**fl)
        if "eval" in doc:
            kwargs["eval"] = _section(EvalSettings, doc["eval"], "eval")
        if "paths" in doc:
            kwargs["paths"] = _section(PathSettings, doc["paths"], "paths")
        if "variants" in doc:
            if not isinstance(doc["variants"], list):
                raise ConfigError("variants: must be a list of variant names")
            kwargs["variants"] = tuple(str(v) for v in doc["variants"])
        return cls(**kwargs)

    def save_json(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load_json(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json(doc)


# =============================================================================
# PARSING HELPERS
# =============================================================================

def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _mapping(value, location: str) -> Dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{location}: must be an object")
    return value


def _check_keys(doc: Dict, allowed, location: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        prefix = f"{location}." if location else ""
        raise ConfigError(", ".join(f"{prefix}{k}: unknown key" for k in unknown))


def _integer(value, location: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{location}: must be an integer")
    return value


def _enum(enum_cls, value, location: str):
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"{location}: '{value}' is not one of {choices}") from None


def _section(cls, value, location: str, partial: bool = True):
    value = _mapping(value, location)
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(value, names, location)
    if not partial:
        missing = sorted(names - set(value))
        if missing:
            raise ConfigError(", ".join(f"{location}.{k}: missing" for k in missing))
    _check_types(cls, value, location)
    try:
        return cls(**value)
    except (TypeError, ValueError, SimulatorError) as exc:
        raise ConfigError(f"{location}: {exc}") from exc


def _check_types(cls, value: Dict, location: str) -> None:
    """Reject JSON values whose type does not match the dataclass field annotation."""
    hints = get_type_hints(cls)
    for name, item in value.items():
        _check_value(hints[name], item, f"{location}.{name}")


def _check_value(hint, value, location: str) -> None:
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return
        _check_value(next(a for a in args if a is not type(None)), value, location)
        return
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{location}: expected a list, got {type(value).__name__}")
        items = args[:1] * len(value) if len(args) == 2 and args[1] is Ellipsis else args
        if len(items) != len(value):
            raise ConfigError(f"{location}: expected {len(items)} entries, got {len(value)}")
        for i, (h, v) in enumerate(zip(items, value)):
            _check_value(h, v, f"{location}[{i}]")
        return
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif hint is str:
        ok = isinstance(value, str)
    else:
        # enums and nested sections are converted before this check
        return
    if not ok:
        raise ConfigError(f"{location}: expected {hint.__name__}, got {type(value).__name__}")
