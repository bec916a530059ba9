"""
Run manifests: the record that makes every output directory reproducible.

A manifest stores the command line, the fully resolved run configuration and
its digest, and the toolkit version. It never stores wall-clock times, so a
rerun rewrites it byte for byte.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from arch_adapt.config import settings
from arch_adapt.src.errors import DataError, MalformedRecord

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "arch-adapt-manifest"


def config_digest(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    command: str
    argv: tuple[str, ...]
    config: dict
    config_digest: str
    seed: int
    toolkit_version: str = settings.TOOLKIT_VERSION
    inputs: dict = field(default_factory=dict)
    outputs: tuple[str, ...] = ()

    @classmethod
    def create(cls, command: str, argv, config: dict, seed: int, inputs=None, outputs=()) -> "RunManifest":
        return cls(
            command=command,
            argv=tuple(argv),
            config=config,
            config_digest=config_digest(config),
            seed=seed,
            inputs={k: str(v) for k, v in (inputs or {}).items() if v is not None},
            outputs=tuple(outputs),
        )

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        payload = {"format": MANIFEST_FORMAT, **asdict(self)}
        payload["argv"] = list(self.argv)
        payload["outputs"] = list(self.outputs)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.debug(f"Wrote manifest {path}")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise MalformedRecord(e.lineno, f"invalid JSON: {e.msg}", path)
        except OSError as e:
            raise DataError(f"{path}: {e.strerror}")
        if payload.pop("format", None) != MANIFEST_FORMAT:
            raise MalformedRecord(1, "not a run manifest", path)
        try:
            manifest = cls(
                command=payload["command"],
                argv=tuple(payload["argv"]),
                config=payload["config"],
                config_digest=payload["config_digest"],
                seed=payload["seed"],
                toolkit_version=payload.get("toolkit_version", ""),
                inputs=payload.get("inputs", {}),
                outputs=tuple(payload.get("outputs", ())),
            )
        except KeyError as e:
            raise MalformedRecord(1, f"missing field {e.args[0]!r}", path)
        if config_digest(manifest.config) != manifest.config_digest:
            raise DataError(f"{path}: configuration does not match its recorded digest")
        if manifest.toolkit_version != settings.TOOLKIT_VERSION:
            logger.warning(
                f"{path} was written by toolkit {manifest.toolkit_version}, running {settings.TOOLKIT_VERSION}"
            )
        return manifest
