"""Run manifests: every command leaves a self-describing record of its outputs."""

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path


class ManifestError(IOError):
    pass


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    """Hash of the canonical (sorted-key, compact) JSON encoding."""
    return sha256_bytes(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: str
    config_path: str = ""
    config_hash: str = ""
    dataset_hash: str = ""
    seeds: dict = field(default_factory=dict)
    out_dir: str = ""
    artifacts: list = field(default_factory=list)  # {"path": rel, "sha256": hex}
    started: str = ""
    finished: str = ""

    def add_artifact(self, path, rel_to=None) -> None:
        path = Path(path)
        base = Path(rel_to) if rel_to is not None else Path(self.out_dir)
        try:
            rel = str(path.relative_to(base))
        except ValueError:
            rel = str(path)
        self.artifacts.append({"path": rel, "sha256": sha256_file(path)})

    def to_json(self) -> dict:
        return {"command": self.command, "config_path": self.config_path,
                "config_hash": self.config_hash, "dataset_hash": self.dataset_hash,
                "seeds": self.seeds, "out_dir": self.out_dir,
                "artifacts": self.artifacts, "started": self.started,
                "finished": self.finished}

    @classmethod
    def from_json(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def write(self, path=None) -> Path:
        p = Path(path) if path else Path(self.out_dir) / "manifest.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        return p

    def verify(self, base_dir=None) -> None:
        """Every listed artifact must exist and still hash to its recorded value."""
        base = Path(base_dir) if base_dir is not None else Path(self.out_dir)
        for entry in self.artifacts:
            p = base / entry["path"]
            if not p.exists():
                raise ManifestError(f"artifact missing: {p}")
            actual = sha256_file(p)
            if actual != entry["sha256"]:
                raise ManifestError(
                    f"artifact changed since the run: {p} "
                    f"(recorded {entry['sha256'][:12]}, found {actual[:12]})")


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    return RunManifest.from_json(json.loads(path.read_text(encoding="utf-8")))


def find_manifests(root) -> list:
    """All manifest.json files under a directory, sorted for stable reports."""
    return sorted(Path(root).rglob("manifest.json"))