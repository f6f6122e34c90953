import json
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd

from app.models.eeg import DEFAULT_CLASS_NAMES, EegTrial, TrialSet
from app.models.errors import DatasetError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
METADATA_NAME = "dataset.json"
MASK_NAME = "ground_truth_mask.csv"
MANIFEST_COLUMNS = ["trial_id", "subject_id", "label", "path"]
VALUE_FORMAT = "%.17g"


class DatasetService:
    """Trial sets on disk: a CSV manifest, one matrix CSV per trial and optional metadata."""

    def write_matrix_csv(self, path: Path, matrix: np.ndarray):
        """One row per channel, comma separated, no header, 17 significant digits."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, np.atleast_2d(matrix), fmt=VALUE_FORMAT, delimiter=",")

    def read_matrix_csv(self, path: Path) -> np.ndarray:
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"trial file not found: {path}")
        try:
            frame = pd.read_csv(path, header=None, float_precision="round_trip")
        except pd.errors.EmptyDataError:
            raise DatasetError(f"{path}: file is empty")
        except pd.errors.ParserError as e:
            raise DatasetError(f"{path}: ragged rows ({e})")

        if any(not pd.api.types.is_numeric_dtype(dtype) for dtype in frame.dtypes):
            raise DatasetError(f"{path}: non-numeric value")
        missing = frame.isna().any(axis=1).to_numpy()
        if missing.any():
            line = int(np.argmax(missing)) + 1
            raise DatasetError(f"{path}:{line}: ragged row (expected {frame.shape[1]} values)")
        return frame.to_numpy(dtype=float)

    def _read_metadata(self, directory: Path) -> Dict:
        metadata_path = directory / METADATA_NAME
        if not metadata_path.exists():
            return {}
        with open(metadata_path, "r") as f:
            return json.load(f)

    @staticmethod
    def _parse_label(raw: str, class_names, class_count: int, where: str) -> int:
        raw = raw.strip()
        if raw in class_names:
            return class_names.index(raw)
        if raw.isdigit() and int(raw) < class_count:
            return int(raw)
        raise DatasetError(f"{where}: unknown label '{raw}'")

    def load_trialset(self, manifest_path: Path) -> TrialSet:
        """Load a trial set from its manifest (columns trial_id, subject_id, label, path[, group]).

        Trial paths are resolved relative to the manifest directory. Class names,
        sample rate and the optional ground-truth mask come from the sibling
        ``dataset.json`` / ``ground_truth_mask.csv`` when present.
        """
        manifest_path = Path(manifest_path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / MANIFEST_NAME
        if not manifest_path.exists():
            raise DatasetError(f"manifest not found: {manifest_path}")

        directory = manifest_path.parent
        metadata = self._read_metadata(directory)
        class_names = list(metadata.get("class_names", DEFAULT_CLASS_NAMES))
        class_count = int(metadata.get("class_count", len(class_names)))
        sample_rate = float(metadata.get("sample_rate", 500.0))

        try:
            manifest = pd.read_csv(manifest_path, dtype=str, keep_default_na=False)
        except pd.errors.EmptyDataError:
            manifest = pd.DataFrame(columns=MANIFEST_COLUMNS)

        missing_columns = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
        if missing_columns:
            raise DatasetError(f"{manifest_path}: missing columns {', '.join(missing_columns)}")

        trials = []
        for row_index, row in enumerate(manifest.itertuples(index=False)):
            where = f"{manifest_path}:{row_index + 2}"
            trial_path = Path(row.path)
            if not trial_path.is_absolute():
                trial_path = directory / trial_path
            if not trial_path.exists():
                raise DatasetError(f"{where}: trial file not found: {trial_path}")

            label = self._parse_label(row.label, class_names, class_count, where)
            trials.append(EegTrial(
                data=self.read_matrix_csv(trial_path),
                label=label,
                subject_id=row.subject_id,
                trial_id=row.trial_id,
                sample_rate=sample_rate,
                group=getattr(row, "group", "") or "all",
            ))

        mask: Optional[np.ndarray] = None
        if (directory / MASK_NAME).exists():
            mask = self.read_matrix_csv(directory / MASK_NAME)

        try:
            trialset = TrialSet(tuple(trials), class_count, tuple(class_names), mask, sample_rate)
        except ValueError as e:
            raise DatasetError(f"{manifest_path}: {e}")
        logger.info(f"Loaded {len(trialset)} trials from {manifest_path}")
        return trialset

    def save_trialset(self, trialset: TrialSet, directory: Path) -> Path:
        """Write manifest, metadata, one CSV per trial and the ground-truth mask.

        Returns:
            Path to the written manifest
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)

        rows = []
        for trial in trialset.trials:
            relative = Path("trials") / f"{trial.trial_id}.csv"
            self.write_matrix_csv(directory / relative, trial.data)
            rows.append({
                "trial_id": trial.trial_id,
                "subject_id": trial.subject_id,
                "label": trialset.class_names[trial.label],
                "path": relative.as_posix(),
                "group": trial.group,
            })
        manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS + ["group"])
        manifest_path = directory / MANIFEST_NAME
        manifest.to_csv(manifest_path, index=False, lineterminator="\n")

        metadata = {
            "class_names": list(trialset.class_names),
            "class_count": trialset.class_count,
            "sample_rate": trialset.sample_rate,
            "extents": list(trialset.extents) if trialset.extents else None,
        }
        with open(directory / METADATA_NAME, "w") as f:
            json.dump(metadata, f, indent=2, sort_keys=True)

        if trialset.ground_truth_mask is not None:
            self.write_matrix_csv(directory / MASK_NAME, trialset.ground_truth_mask)

        logger.info(f"Saved {len(trialset)} trials to {directory}")
        return manifest_path
