import hashlib
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from circuitforge import __version__
from circuitforge.save import save_json
from circuitforge.settings import SCHEMA_VERSION

logger = logging.getLogger(__name__)


def file_digest(path):
    """SHA-256 of a file's contents."""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    """Record of one command: flags, seeds, digests of every input and output file, and timestamps."""

    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    tool_version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started_at: str = field(default_factory=_now)
    finished_at: str = None

    def add_input(self, path):
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, path):
        self.outputs[str(path)] = file_digest(path)

    def write(self, file_name):
        self.finished_at = _now()
        path = save_json({"schema_version": SCHEMA_VERSION, **asdict(self)}, file_name)
        logger.info("Wrote manifest %s (%d outputs)", path, len(self.outputs))
        return Path(path)
