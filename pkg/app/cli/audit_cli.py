import argparse
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from app.helpers.relevance_ops import Window, default_windows, window_aggregate, windows_from_ms
from app.models.eeg import TrialSet
from app.models.errors import AuditError, ConfigError
from app.services.attribution_service import AttributionService
from app.services.config_service import PRESETS, ConfigService
from app.services.dataset_service import DatasetService
from app.services.network_service import NetworkService
from app.services.pattern_service import PatternService
from app.services.preprocess_service import PreprocessService
from app.services.relevance_service import RelevanceService
from app.services.report_service import ReportService
from app.services.roar_service import RoarService
from app.services.stats_service import StatsService
from app.services.synth_service import SynthService
from app.services.training_service import TrainingService

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roar-eeg-audit",
        description="Train EEG trial CNNs, attribute their decisions and audit the attributions with ROAR.",
    )
    parser.add_argument("--config", type=Path, help="JSON file of dotted config keys")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--out", type=Path, help="run directory (default: runs/<command>)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--verbose", action="store_true", help="log debug detail")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", help="write a synthetic trial set")
    train = commands.add_parser("train", help="LOTO training and metrics")
    train.add_argument("--data", type=Path, required=True)
    attribute = commands.add_parser("attribute", help="relevance maps from trained fold models")
    attribute.add_argument("--data", type=Path, required=True)
    attribute.add_argument("--models", type=Path, required=True)
    roar = commands.add_parser("roar", help="remove-and-retrain sweep")
    roar.add_argument("--data", type=Path, required=True)
    roar.add_argument("--base", type=Path, help="train run directory to reuse as the base model")
    report = commands.add_parser("report", help="recompute ROAR tables from roar_folds.csv")
    report.add_argument("--run", type=Path, required=True)
    return parser


def _safe_name(text: str) -> str:
    return text.replace(":", "-").replace("/", "-").replace(" ", "_")


class AuditCli:
    """One command invocation: resolved config, run directory, log file and the services."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = ConfigService(args.preset)
        if args.config:
            self.config.load_file(args.config)
        if args.seed is not None:
            self.config.set("seed", args.seed)
        if args.jobs is not None:
            self.config.set("jobs", args.jobs)
        self.config.apply_overrides(args.overrides)
        self.run_dir = Path(args.out) if args.out else Path("runs") / args.command

        jobs = self.config.jobs
        preprocessing = self.config.preprocessing()
        self.preprocess_enabled = preprocessing.pop("enabled")
        self.attribution_settings = self.config.attribution()

        # Initialize services
        self.dataset_service = DatasetService()
        self.synth_service = SynthService(self.config.synth())
        self.preprocess_service = PreprocessService(**preprocessing)
        self.network_service = NetworkService()
        self.training_service = TrainingService(self.network_service, self.config.training(), jobs)
        self.attribution_service = AttributionService(self.network_service, self.attribution_settings)
        self.pattern_service = PatternService(self.attribution_service, self.attribution_settings.pattern_regime)
        self.relevance_service = RelevanceService(self.attribution_service, self.pattern_service, jobs)
        self.roar_service = RoarService(self.training_service, self.config.roar())
        self.stats_service = StatsService(self.config.get("roar.alpha"))
        self.report_service = ReportService(self.dataset_service, self.stats_service)

    # ---------- Setup ----------

    def setup_logging(self) -> logging.Handler:
        level = logging.DEBUG if self.args.verbose else logging.INFO
        logging.basicConfig(level=level, format=LOG_FORMAT)
        logging.getLogger().setLevel(level)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(self.run_dir / "run.log", mode="w")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)
        return handler

    def run(self) -> int:
        handler = self.setup_logging()
        try:
            self.config.write_resolved(self.run_dir)
            getattr(self, f"cmd_{self.args.command}")()
            logger.info(f"{self.args.command} finished; outputs in {self.run_dir}")
            return EXIT_OK
        except ConfigError as e:
            logger.error(f"Configuration error: {e}")
            return EXIT_CONFIG
        except AuditError as e:
            logger.error(f"{self.args.command} failed: {e}")
            return EXIT_FAILURE
        except Exception as e:
            logger.exception(f"{self.args.command} failed unexpectedly: {e}")
            return EXIT_FAILURE
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()

    # ---------- Data ----------

    def _load_data(self, path: Path) -> TrialSet:
        trialset = self.dataset_service.load_trialset(path)
        if self.preprocess_enabled:
            trialset = self.preprocess_service.preprocess_trialset(trialset)
        return trialset

    def _windows(self, trialset: TrialSet) -> List[Window]:
        explicit = self.config.get("attribute.windows")
        if explicit:
            return [tuple(int(v) for v in w) for w in explicit]
        in_ms = self.config.get("attribute.windows_ms")
        if in_ms:
            return windows_from_ms([tuple(w) for w in in_ms], trialset.sample_rate)
        return default_windows(trialset.extents[1])

    # ---------- Commands ----------

    def cmd_synth(self):
        trialset = self.synth_service.generate_synthetic(np.random.default_rng(self.config.seed))
        self.dataset_service.save_trialset(trialset, self.run_dir)

    def cmd_train(self):
        report = self.report_service
        trialset = self._load_data(self.args.data)
        keep = self.config.get("train.save_models")
        results = self.training_service.run_subjects(
            trialset, self.config.architecture(trialset.class_count), keep_models=keep)
        report.write_frame(report.metrics_frame(results), self.run_dir / "metrics.csv")
        report.write_frame(report.folds_frame(results, trialset.class_count), self.run_dir / "folds.csv")
        report.write_frame(report.confusion_frame(results, trialset.class_names), self.run_dir / "confusion.csv")
        if keep:
            self.training_service.save_fold_models(results, self.run_dir / "models")

    def cmd_attribute(self):
        report = self.report_service
        relevance_service = self.relevance_service
        trialset = self._load_data(self.args.data)
        models = self.training_service.load_fold_models(self.args.models)
        per_subject = relevance_service.all_subject_maps(trialset, models)
        windows = self._windows(trialset)
        labels = [f"{a}-{b}" for a, b in windows]

        window_means = {}
        for group, maps in relevance_service.group_maps(per_subject, trialset).items():
            for method, trial_maps in maps.items():
                for target, averaged in relevance_service.class_averages(trial_maps).items():
                    stem = self.run_dir / f"{method}_{_safe_name(group)}_{_safe_name(trialset.class_names[target])}"
                    report.export_relevance(averaged, stem)
                averaged = relevance_service.class_averaged_map(trial_maps)
                report.export_relevance(averaged, self.run_dir / f"{method}_{_safe_name(group)}_avg")
                matrix = window_aggregate(averaged, windows)
                window_means[(method, group)] = matrix
                report.write_frame(report.window_frame(matrix, windows),
                                   self.run_dir / f"windows_{method}_{_safe_name(group)}.csv")

        stats = report.attribution_stats(window_means, labels, self.config.get("attribute.alpha"))
        report.write_frame(stats, self.run_dir / "attribute_stats.csv")

    def cmd_roar(self):
        report = self.report_service
        trialset = self._load_data(self.args.data)
        arch = self.config.architecture(trialset.class_count)
        if self.args.base:
            base_dir = Path(self.args.base)
            base = report.loto_from_frame(report.read_frame(base_dir / "folds.csv"), trialset.class_count)
            models = self.training_service.load_fold_models(base_dir / "models")
            for subject, loto in base.items():
                loto.models = models.get(subject, {})
            logger.info(f"Reusing base models from {base_dir}")
        else:
            base = self.training_service.run_subjects(trialset, arch, keep_models=True)
            report.write_frame(report.folds_frame(base, trialset.class_count), self.run_dir / "folds.csv")

        methods = self.attribution_settings.methods
        per_subject = self.relevance_service.all_subject_maps(trialset, {s: r.models for s, r in base.items()})
        relevance = {subject: {method: self.relevance_service.class_averaged_map(maps[method]) for method in methods}
                     for subject, maps in per_subject.items()}

        result = self.roar_service.run_roar(trialset, arch, relevance, base, methods)

        for (source, r, subject), mask in result.masks.items():
            report.export_mask(mask, self.run_dir / "masks" / f"{_safe_name(source)}_r{r:g}_{subject}")
        groups = {t.subject_id: t.group for t in trialset.trials}
        folds = report.roar_records_frame(result, groups)
        report.write_frame(folds, self.run_dir / "roar_folds.csv")
        self._write_roar_tables(folds, methods, self.run_dir)

    def cmd_report(self):
        folds = self.report_service.read_frame(Path(self.args.run) / "roar_folds.csv")
        methods = [m for m in self.attribution_settings.methods if m in set(folds["source"])]
        self._write_roar_tables(folds, methods, self.run_dir)

    def _write_roar_tables(self, folds, methods: Sequence[str], directory: Path):
        report = self.report_service
        baselines = sorted(s for s in folds["source"].unique() if s not in methods)
        report.write_frame(report.curve_frame(folds), directory / "roar_curves.csv")
        report.write_frame(report.summary_frame(folds), directory / "roar_summary.csv")
        report.write_frame(report.roar_comparison(folds, methods, baselines), directory / "roar_report.csv")


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cli = AuditCli(args)
    except ConfigError as e:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    return cli.run()
