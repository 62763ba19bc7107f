"""Run manifests and append-only round logs.

Every run directory holds exactly one manifest.json recording the config
snapshot, master seed, dataset fingerprint, package version, and output
paths. Reruns with an equal manifest produce byte-equal logs. Round
records stream to rounds.jsonl, one JSON object per line, so an
interrupted run keeps everything it already completed (the manifest stays
marked incomplete).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .planes import RoundRecord

__all__ = ["RunManifest", "write_round_log", "read_round_log", "config_fingerprint"]


def config_fingerprint(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunManifest:
    config: dict
    master_seed: int
    dataset_fingerprint: str
    code_version: str = __version__
    status: str = "incomplete"  # incomplete | complete | failed
    outputs: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return config_fingerprint({"config": self.config, "seed": self.master_seed})

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        with open(Path(run_dir) / "manifest.json", "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


def write_round_log(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True))
            fh.write("\n")


def append_round_log(fh, record) -> None:
    fh.write(json.dumps(record.to_dict(), sort_keys=True))
    fh.write("\n")
    fh.flush()


def read_round_log(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(RoundRecord.from_dict(json.loads(line)))
    return records
