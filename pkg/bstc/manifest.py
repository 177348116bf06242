import hashlib
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field

from bstc.constant import __version__


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    seed: int = 0
    version: str = __version__
    started: float = field(default_factory=time.time)
    duration: float = 0.0
    status: int = 0

    def add_input(self, name: str, path: str):
        self.inputs[name] = {"path": os.path.abspath(path), "sha256": file_digest(path)}

    def finish(self, status: int) -> "RunManifest":
        self.duration = time.time() - self.started
        self.status = status
        return self

    def write(self, out_dir: str) -> str:
        """Write `manifest.json` atomically (temp file + rename)."""
        os.makedirs(out_dir, exist_ok=True)
        target = os.path.join(out_dir, "manifest.json")
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=out_dir)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(asdict(self), f, indent=2, sort_keys=True, default=str)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        return target
