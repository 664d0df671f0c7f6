"""
Per-experiment results store.

Layout of <output_dir>/<experiment_id>/:
    manifest.json      config, digest, seed, status
    cycles.jsonl       one checksummed record per completed cycle (the commit log)
    history.jsonl      training history per cycle
    timings.jsonl      wall-clock seconds per cycle
    selections.jsonl   selected batch per cycle
    checkpoints/       model weights per cycle
    scores/            score table per cycle
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

from .image_utils import canonical_json, sha256_text
from .seg_model import checkpoint_name

logger = logging.getLogger(__name__)

STORE_VERSION = 1
STATUSES = ("running", "complete", "exhausted")


class IntegrityError(RuntimeError):
    """Persisted state is corrupted or belongs to a different configuration."""


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _append_line(path: Path, line: str) -> None:
    with open(path, "a") as f:
        f.write(line + "\n")
        f.flush()
        os.fsync(f.fileno())


def _complete_lines(text: str) -> list[str]:
    # A line is written only once its newline is; a torn tail was never committed
    if text and not text.endswith("\n"):
        text = text[: text.rfind("\n") + 1]
    return text.splitlines()


def _drop_torn_tail(path: Path) -> None:
    if not path.exists():
        return
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        logger.warning(f"Dropping incomplete last line of {path.name}")
        _write_atomic(path, data[: data.rfind(b"\n") + 1].decode())


def _read_jsonl(path: Path) -> list[dict]:
    """Rows of a JSON-lines file; an incomplete last line is ignored."""
    if not path.exists():
        return []
    rows = []
    for number, line in enumerate(_complete_lines(path.read_text()), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise IntegrityError(f"{path}: line {number} is not valid JSON ({e})") from None
    return rows


@dataclass
class ExperimentStore:
    """Files of one (strategy, seed) experiment."""
    path: Path
    experiment_id: str = field(init=False)

    def __post_init__(self):
        self.path = Path(self.path)
        self.experiment_id = self.path.name

    @classmethod
    def for_experiment(cls, output_dir: Union[str, Path], experiment_id: str) -> "ExperimentStore":
        return cls(Path(output_dir) / experiment_id)

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    @property
    def cycles_path(self) -> Path:
        return self.path / "cycles.jsonl"

    @property
    def history_path(self) -> Path:
        return self.path / "history.jsonl"

    @property
    def timings_path(self) -> Path:
        return self.path / "timings.jsonl"

    @property
    def selections_path(self) -> Path:
        return self.path / "selections.jsonl"

    def checkpoint_path(self, cycle: int, seed: int) -> Path:
        return self.path / "checkpoints" / checkpoint_name(cycle, seed)

    def scores_path(self, cycle: int) -> Path:
        return self.path / "scores" / f"scores_c{cycle:02d}.tsv"

    def exists(self) -> bool:
        return self.manifest_path.exists()

    # -- manifest ------------------------------------------------------------

    def create(self, config: dict, config_digest: str, seed: int) -> dict:
        """
        Start a new experiment directory.

        Args:
            config: Plain config dict
            config_digest: Digest of the config
            seed: Master seed of the run
        """
        if self.exists():
            raise IntegrityError(f"Experiment {self.experiment_id} already exists at {self.path}")
        self.path.mkdir(parents=True, exist_ok=True)
        manifest = {
            "schema_version": STORE_VERSION,
            "experiment_id": self.experiment_id,
            "config": config,
            "config_digest": config_digest,
            "seed": seed,
            "status": "running",
        }
        self._write_manifest(manifest)
        logger.info(f"Created experiment {self.experiment_id} at {self.path}")
        return manifest

    def _write_manifest(self, manifest: dict) -> None:
        _write_atomic(self.manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def read_manifest(self) -> dict:
        if not self.exists():
            raise FileNotFoundError(f"No experiment manifest at {self.manifest_path}")
        try:
            manifest = json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError as e:
            raise IntegrityError(f"{self.manifest_path} is not valid JSON ({e})") from None
        for key in ("config", "config_digest", "seed", "status"):
            if key not in manifest:
                raise IntegrityError(f"{self.manifest_path} is missing '{key}'")
        if manifest["status"] not in STATUSES:
            raise IntegrityError(f"{self.manifest_path} has unknown status {manifest['status']!r}")
        return manifest

    def set_status(self, status: str) -> None:
        if status not in STATUSES:
            raise ValueError(f"Unknown status '{status}'")
        manifest = self.read_manifest()
        manifest["status"] = status
        self._write_manifest(manifest)

    # -- cycle log -----------------------------------------------------------

    def append_cycle(self, record: dict) -> None:
        """Commit a completed cycle."""
        line = canonical_json({"record": record, "sha256": sha256_text(canonical_json(record))})
        _append_line(self.cycles_path, line)

    def read_cycles(self) -> list[dict]:
        """Committed cycle records, checksums verified."""
        records = []
        for number, row in enumerate(_read_jsonl(self.cycles_path), start=1):
            if not isinstance(row, dict) or "record" not in row or "sha256" not in row:
                raise IntegrityError(f"{self.cycles_path}: line {number} is not a cycle record")
            if sha256_text(canonical_json(row["record"])) != row["sha256"]:
                raise IntegrityError(f"{self.cycles_path}: checksum mismatch on line {number}")
            if row["record"].get("cycle") != number - 1:
                raise IntegrityError(f"{self.cycles_path}: line {number} holds cycle {row['record'].get('cycle')}")
            records.append(row["record"])
        return records

    # -- auxiliary logs ------------------------------------------------------

    def append_history(self, cycle: int, history: dict) -> None:
        _append_line(self.history_path, json.dumps({"cycle": cycle, **history}, sort_keys=True))

    def append_timing(self, cycle: int, timings: dict) -> None:
        _append_line(self.timings_path, json.dumps({"cycle": cycle, **timings}, sort_keys=True))

    def append_selection(self, cycle: int, selection: dict) -> None:
        _append_line(self.selections_path, json.dumps({"cycle": cycle, **selection}, sort_keys=True))

    def read_timings(self) -> list[dict]:
        return _read_jsonl(self.timings_path)

    def read_history(self) -> list[dict]:
        return _read_jsonl(self.history_path)

    def read_selections(self) -> list[dict]:
        return _read_jsonl(self.selections_path)

    def prune_uncommitted(self, committed_cycles: int) -> None:
        """Drop auxiliary rows and files written for cycles that never committed."""
        _drop_torn_tail(self.cycles_path)
        for path in (self.history_path, self.timings_path, self.selections_path):
            if not path.exists():
                continue
            rows = [r for r in _read_jsonl(path) if r.get("cycle", 0) < committed_cycles]
            _write_atomic(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))

        for directory, pattern in ((self.path / "checkpoints", "model_c*.pt"), (self.path / "scores", "scores_c*.tsv")):
            if not directory.is_dir():
                continue
            for file in directory.glob(pattern):
                cycle = int(file.stem.split("_")[1].lstrip("c"))
                if cycle >= committed_cycles:
                    logger.info(f"Removing uncommitted {file.name}")
                    file.unlink()


def iter_experiments(output_dir: Union[str, Path]) -> Iterator[ExperimentStore]:
    """Experiment stores under an output directory, in name order."""
    output_dir = Path(output_dir)
    if not output_dir.is_dir():
        return
    for child in sorted(output_dir.iterdir()):
        store = ExperimentStore(child)
        if child.is_dir() and store.exists():
            yield store
