"""
Deterministic report writers: JSON, CSV, manifests and path dumps.

Nothing written here carries a timestamp, so a rerun with the same
configuration and seed reproduces every file byte for byte.
"""

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from config import VERSION
from errors import ConfigError
from models import OccupationHistogram, TracerPath
from services.config_loader import canonical

logger = logging.getLogger(__name__)

PILOT_FILE = "pilot_histogram.json"


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def dumps(payload) -> str:
    return json.dumps(canonical(payload), sort_keys=True, indent=2) + "\n"


def render_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Aligned plain-text table for terminals"""
    cells = [[str(h) for h in header]]
    for row in rows:
        cells.append([f"{v:.6g}" if isinstance(v, float) else format_value(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


class ReportWriter:
    """Writes the files of one command run and tracks them for the manifest"""

    def __init__(
        self,
        out_dir,
        config_hash: str,
        seed: int,
        command: str,
        formats: Sequence[str] = ("json", "csv"),
    ):
        self.out_dir = Path(out_dir)
        self.config_hash = config_hash
        self.seed = int(seed)
        self.command = command
        self.formats = set(formats)
        self.files: list[Path] = []
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {self.out_dir}: {e}") from e

    @property
    def provenance(self) -> dict:
        return {
            "version": VERSION,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "command": self.command,
        }

    def _track(self, path: Path) -> Path:
        if path not in self.files:
            self.files.append(path)
        logger.debug(f"wrote {path}")
        return path

    def write_json(self, name: str, payload: dict) -> Optional[Path]:
        if "json" not in self.formats:
            return None
        path = self.out_dir / f"{name}.json"
        body = {"provenance": self.provenance, **payload}
        path.write_text(dumps(body), encoding="utf-8")
        return self._track(path)

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Optional[Path]:
        """Comma separated, '.' decimal, provenance as leading '#' lines, then the header row"""
        if "csv" not in self.formats:
            return None
        path = self.out_dir / f"{name}.csv"
        with path.open("w", newline="", encoding="utf-8") as f:
            for key, value in self.provenance.items():
                f.write(f"# {key}={value}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_value(v) for v in row])
        return self._track(path)

    def write_path(self, index: int, path: TracerPath) -> Optional[Path]:
        """Columns t, F_*, Ftorus_*, X_*, I_* of one tracer path"""
        driving = path.driving
        d_bar = driving.states.shape[1]
        d = path.integral.shape[1]
        torus = driving.torus_states
        header = ["t"] + [f"F_{j + 1}" for j in range(d_bar)]
        if torus is not None:
            header += [f"Ftorus_{j + 1}" for j in range(d_bar)]
        header += [f"X_{i + 1}" for i in range(d)] + [f"I_{i + 1}" for i in range(d)]
        blocks = [driving.times[:, None], driving.states]
        if torus is not None:
            blocks.append(torus)
        blocks += [path.values, path.integral]
        table = np.hstack(blocks)
        return self.write_csv(f"path_{index:04d}", header, table.tolist())

    def write_manifest(self, n_paths: int = 0, extra: Optional[dict] = None) -> Path:
        entries = []
        for path in sorted(self.files):
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            entries.append({"file": path.name, "sha256": digest})
        body = {**self.provenance, "n_paths": int(n_paths), "files": entries, **(extra or {})}
        path = self.out_dir / f"manifest_{self.command}.json"
        path.write_text(dumps(body), encoding="utf-8")
        return path


# ----------------------------------------------------------------------
# pilot histograms
# ----------------------------------------------------------------------
def model_hash(raw_model: dict) -> str:
    payload = json.dumps(canonical(raw_model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_pilot(writer: ReportWriter, histogram: OccupationHistogram, raw_model: dict) -> Path:
    path = writer.out_dir / PILOT_FILE
    body = {"model_hash": model_hash(raw_model), "histogram": histogram.to_dict(), **writer.provenance}
    path.write_text(dumps(body), encoding="utf-8")
    return writer._track(path)


def load_pilot(out_dir, raw_model: dict) -> Optional[OccupationHistogram]:
    """Stored pilot histogram for this model, or None when there is none"""
    path = Path(out_dir) / PILOT_FILE
    if not path.exists():
        return None
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        stored = data["model_hash"]
        histogram = OccupationHistogram.from_dict(data["histogram"])
    except (ValueError, KeyError) as e:
        raise ConfigError(f"corrupt pilot histogram {path}: {e}") from e
    if stored != model_hash(raw_model):
        raise ConfigError(
            f"pilot histogram {path} was produced for a different model; rerun simulate --pilot"
        )
    return histogram
