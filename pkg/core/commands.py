"""
Command pattern for the pipeline stages.

Each CLI subcommand is one Command working inside a RunContext (config plus
output directory). PipelineCommand groups stages into a single unit, and
StageLog records what ran and which artifacts it produced.
"""
import hashlib
import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from core.config import VARIANTS, ExperimentConfig, RunVariant
from core.evaluation import cross_validate, evaluate_model
from core.federation import make_client, run_federation
from core.ssl_pretrain import pretrain
from core.synthdata import CenterDataset, generate_center_dataset, generate_pseudo_images
from core.tensor import ParamSet
from core.types import Algorithm, ConfigError, DataError, Pretext
from render.tables import render_report, write_pr_points
from utils.archive import (dataset_from_archive, dataset_to_bytes, pseudo_from_archive, pseudo_to_bytes,
                           read_archive, write_archive)
from utils.records import read_json, write_json, write_records

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    """Config plus the directory every artifact path is relative to."""
    config: ExperimentConfig
    out_dir: Path

    @property
    def data_dir(self) -> Path:
        return self.out_dir / self.config.paths.data

    @property
    def checkpoint_dir(self) -> Path:
        return self.out_dir / self.config.paths.checkpoints

    @property
    def report_dir(self) -> Path:
        return self.out_dir / self.config.paths.reports

    def relative(self, path: Path) -> str:
        return Path(path).relative_to(self.out_dir).as_posix()

    def center_archive(self, center_id: int) -> Path:
        return self.data_dir / f"center_{center_id}.ds"

    def pseudo_archive(self, center_id: int) -> Path:
        return self.data_dir / f"pseudo_{center_id}.ds"

    def ssl_checkpoint(self, pretext: Pretext) -> Path:
        return self.checkpoint_dir / f"ssl_{pretext.value}.ps"

    def load_centers(self) -> List[CenterDataset]:
        datasets = [dataset_from_archive(read_archive(self.center_archive(c.center_id)))
                    for c in self.config.data.centers]
        for settings, ds in zip(self.config.data.centers, datasets):
            if ds.center_id != settings.center_id:
                raise DataError(f"{self.center_archive(settings.center_id)} holds center {ds.center_id}")
        return datasets


class Command(ABC):
    """One pipeline stage."""

    @abstractmethod
    def execute(self, context: RunContext) -> List[Path]:
        """Run the stage and return the artifacts it wrote."""

    @abstractmethod
    def get_description(self) -> str:
        """Human-readable description of the stage."""


# =============================================================================
# STAGES
# =============================================================================

class GenDataCommand(Command):
    """Generate every center's labelled archive and its pseudo archive."""

    def execute(self, context: RunContext) -> List[Path]:
        cfg = context.config
        datasets, pseudo_sets = [], []
        for spec in cfg.center_specs():
            dataset = generate_center_dataset(spec, cfg.seed("data", spec.center_id))
            datasets.append(dataset)
            pseudo_sets.append(generate_pseudo_images(dataset, cfg.data.pseudo_n, cfg.seed("pseudo", spec.center_id)))

        real = {image.tobytes() for ds in datasets for image in ds.images}
        leaks = sum(1 for pseudo in pseudo_sets for s in pseudo if s.image.array.tobytes() in real)
        if leaks:
            raise DataError(f"{leaks} pseudo images are bit-identical to real images")

        written = []
        for dataset, pseudo in zip(datasets, pseudo_sets):
            for path, blob in ((context.center_archive(dataset.center_id), dataset_to_bytes(dataset)),
                               (context.pseudo_archive(dataset.center_id), pseudo_to_bytes(pseudo, cfg.data.n_classes))):
                write_archive(path, blob)
                written.append(path)
            logger.info("center %d: %d samples, %d pseudo images", dataset.center_id, len(dataset), len(pseudo))

        manifest = context.data_dir / "manifest.json"
        write_json(manifest, {context.relative(p): hashlib.sha256(p.read_bytes()).hexdigest() for p in written})
        return written + [manifest]

    def get_description(self) -> str:
        return "Generate center and pseudo archives"


class PretrainCommand(Command):
    """Pretrain the shared encoder on all pseudo archives."""

    def __init__(self, pretext: Optional[Pretext] = None):
        self.pretext = pretext

    def execute(self, context: RunContext) -> List[Path]:
        cfg = context.config
        pretext = self.pretext or cfg.ssl.pretext
        pseudo_sets = [pseudo_from_archive(read_archive(context.pseudo_archive(c.center_id)))
                       for c in cfg.data.centers]
        weights, report = pretrain(pseudo_sets, cfg.model, cfg.ssl.epochs, cfg.ssl.lr, cfg.ssl.batch,
                                   cfg.seed("ssl"), grid=cfg.ssl.grid, k_swaps=cfg.ssl.k_swaps,
                                   pretext=pretext, holdout=cfg.ssl.holdout)
        checkpoint = context.ssl_checkpoint(pretext)
        weights.save(checkpoint)
        records = context.report_dir / f"ssl_{pretext.value}.jsonl"
        write_records(records, report.to_records())
        return [checkpoint, records]

    def get_description(self) -> str:
        return f"Pretrain encoder (pretext={self.pretext.value if self.pretext else 'config'})"


def _variant_for(name: Optional[str], algorithm: Optional[Algorithm], pretext: Optional[Pretext]) -> RunVariant:
    if name is not None:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant '{name}' (known: {', '.join(VARIANTS)})")
        return VARIANTS[name]
    if algorithm is None:
        raise ConfigError("a run needs a variant name or an algorithm")
    run_name = algorithm.value if pretext is None else f"ssl_{pretext.value}_{algorithm.value}"
    return RunVariant(run_name, run_name, algorithm, pretext)


class _RunCommand(Command):
    def __init__(self, variant: Optional[str] = None, algorithm: Optional[Algorithm] = None,
                 pretext: Optional[Pretext] = None, ssl_init: Optional[Path] = None):
        self.variant = _variant_for(variant, algorithm, pretext)
        self.ssl_init = ssl_init

    def ssl_source(self, context: RunContext) -> Optional[Path]:
        if self.ssl_init is not None:
            return Path(self.ssl_init)
        if self.variant.pretext is not None:
            return context.ssl_checkpoint(self.variant.pretext)
        if context.config.fl.ssl_init:
            return context.out_dir / context.config.fl.ssl_init
        return None

    def load_ssl(self, path: Optional[Path]) -> Optional[ParamSet]:
        if path is None:
            return None
        if not path.is_file():
            raise DataError(f"SSL checkpoint not found: {path} (run 'pretrain' first)")
        return ParamSet.load(path)


class TrainCommand(_RunCommand):
    """Federated training of one variant on every center's full data."""

    def execute(self, context: RunContext) -> List[Path]:
        cfg = context.config
        datasets = context.load_centers()
        source = self.ssl_source(context)
        ssl_weights = self.load_ssl(source)
        fl = cfg.fl_config(self.variant.algorithm)
        clients = [make_client(ds, eval_set=ds) for ds in datasets]

        def score(center_id: int, weights: ParamSet) -> Dict:
            dataset = next(ds for ds in datasets if ds.center_id == center_id)
            return evaluate_model(weights, dataset, cfg.model)[0].to_json()

        result = run_federation(cfg.model, clients, fl, ssl_weights, evaluator=score)
        ckpt_dir = context.checkpoint_dir / self.variant.name
        report_dir = context.report_dir / self.variant.name
        written = [ckpt_dir / "global.ps"]
        result.global_weights.save(written[0])
        for cid, weights in sorted(result.client_weights.items()):
            path = ckpt_dir / f"center_{cid}.ps"
            weights.save(path)
            written.append(path)
        history = report_dir / "history.jsonl"
        write_records(history, result.history.to_records())
        run_info = report_dir / "run.json"
        write_json(run_info, {
            "variant": self.variant.name,
            "label": self.variant.label,
            "algorithm": self.variant.algorithm.value,
            "pretext": self.variant.pretext.value if self.variant.pretext else None,
            "ssl_init": _portable(context, source),
            "final_checksum": result.global_weights.checksum(),
        })
        return written + [history, run_info]

    def get_description(self) -> str:
        return f"Train {self.variant.name}"


class EvaluateCommand(_RunCommand):
    """k-fold cross-validation of one variant; writes fold records, summary and PR points."""

    def execute(self, context: RunContext) -> List[Path]:
        cfg = context.config
        datasets = context.load_centers()
        report = cross_validate(datasets, cfg.model, cfg.fl_config(self.variant.algorithm), k=cfg.eval.k_folds,
                                seed=cfg.seed("cv"), ssl_weights=self.load_ssl(self.ssl_source(context)))
        report_dir = context.report_dir / self.variant.name
        folds = report_dir / "folds.jsonl"
        write_records(folds, report.to_records())
        summary = report_dir / "summary.json"
        write_json(summary, {"variant": self.variant.name, "label": self.variant.label,
                             "summary": {scope: {m: list(v) for m, v in stats.items()}
                                         for scope, stats in report.summary.items()}})
        written = [folds, summary]
        for fold in report.folds:
            for cid, pr in sorted(fold.pr.items()):
                written.extend(write_pr_points(report_dir / "pr", f"fold{fold.fold}_center{cid}", pr))
        return written

    def get_description(self) -> str:
        return f"Cross-validate {self.variant.name}"


class ReportCommand(Command):
    """Per-center and GTA comparison tables over evaluated runs."""

    def __init__(self, runs: Sequence[str]):
        self.runs = list(runs)

    def execute(self, context: RunContext) -> List[Path]:
        rows = []
        for run in self.runs:
            doc = read_json(context.report_dir / run / "summary.json")
            summary = {scope: {m: tuple(v) for m, v in stats.items()} for scope, stats in doc["summary"].items()}
            rows.append((doc.get("label", run), summary))
        table = context.report_dir / "comparison.txt"
        table.parent.mkdir(parents=True, exist_ok=True)
        table.write_text(render_report(rows), encoding="utf-8")
        return [table]

    def get_description(self) -> str:
        return f"Report {', '.join(self.runs)}"


def _portable(context: RunContext, path: Optional[Path]) -> Optional[str]:
    if path is None:
        return None
    try:
        return context.relative(path)
    except ValueError:
        return str(path)


# =============================================================================
# GROUPING AND BOOKKEEPING
# =============================================================================

class PipelineCommand(Command):
    """Runs gen-data, pretrain, train, evaluate and report for a list of variants as one unit."""

    def __init__(self, variants: Sequence[str]):
        unknown = [v for v in variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variants {unknown}")
        self.variants = list(variants)
        pretexts = []
        for name in self.variants:
            pretext = VARIANTS[name].pretext
            if pretext is not None and pretext not in pretexts:
                pretexts.append(pretext)
        self.commands: List[Command] = [GenDataCommand()]
        self.commands += [PretrainCommand(p) for p in pretexts]
        self.commands += [TrainCommand(v) for v in self.variants]
        self.commands += [EvaluateCommand(v) for v in self.variants]
        self.commands.append(ReportCommand(self.variants))
        self.log = StageLog()

    def execute(self, context: RunContext) -> List[Path]:
        written = []
        for command in self.commands:
            written.extend(self.log.execute_command(command, context))
        manifest = context.report_dir / "manifest.json"
        write_json(manifest, self.log.manifest(context))
        return written + [manifest]

    def get_description(self) -> str:
        return f"Pipeline for {', '.join(self.variants)}"


class StageLog:
    """Records executed stages and their artifacts."""

    def __init__(self):
        self.entries: List[Dict] = []

    def execute_command(self, command: Command, context: RunContext) -> List[Path]:
        """Validate the config, run the command and record it."""
        context.config.require_valid()
        started = time.perf_counter()
        logger.info("stage: %s", command.get_description())
        artifacts = command.execute(context)
        self.entries.append({"stage": command.get_description(), "artifacts": artifacts})
        logger.info("stage done: %s (%d artifacts, %.2fs)", command.get_description(), len(artifacts),
                    time.perf_counter() - started)
        return artifacts

    def manifest(self, context: RunContext) -> Dict:
        return {
            "master_seed": context.config.master_seed,
            "stages": [{"stage": e["stage"],
                        "artifacts": [context.relative(p) for p in e["artifacts"]]} for e in self.entries],
        }
