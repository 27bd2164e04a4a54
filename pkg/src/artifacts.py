import csv
import io
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import aiofiles

from .utils import sha256_bytes


def encode_json(data: Any) -> bytes:
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""
    return (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8")


def encode_csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> bytes:
    buffer = io.StringIO(newline="")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue().encode("utf-8")


class ArtifactStore:
    """Owns one run's output directory and the SHA-256 of every file written to it."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.digests: Dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.root / name

    def _target(self, name: str, data: bytes) -> Path:
        target = self.path(name)
        os.makedirs(target.parent, exist_ok=True)
        self.digests[Path(name).as_posix()] = sha256_bytes(data)
        return target

    def write_bytes(self, name: str, data: bytes) -> Path:
        """Write bytes (sync version)."""
        target = self._target(name, data)
        target.write_bytes(data)
        return target

    async def write_bytes_async(self, name: str, data: bytes) -> Path:
        """Write bytes with aiofiles."""
        target = self._target(name, data)
        async with aiofiles.open(target, "wb") as f:
            await f.write(data)
        return target

    def write_json(self, name: str, data: Any) -> Path:
        return self.write_bytes(name, encode_json(data))

    async def write_json_async(self, name: str, data: Any) -> Path:
        return await self.write_bytes_async(name, encode_json(data))

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
        return self.write_bytes(name, encode_csv(header, rows))

    async def write_csv_async(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
        return await self.write_bytes_async(name, encode_csv(header, rows))

    def adopt(self, name: str) -> None:
        """Record the digest of a file some other writer put under the root."""
        self.digests[Path(name).as_posix()] = sha256_bytes(self.path(name).read_bytes())

    def read_json(self, name: str) -> Optional[Any]:
        """Load JSON written by an earlier stage; None when absent."""
        target = self.path(name)
        if not target.is_file():
            return None
        with open(target, "r", encoding="utf-8") as f:
            return json.load(f)

    async def read_json_async(self, name: str) -> Optional[Any]:
        target = self.path(name)
        if not target.is_file():
            return None
        async with aiofiles.open(target, "r", encoding="utf-8") as f:
            return json.loads(await f.read())

    def sorted_digests(self) -> Dict[str, str]:
        return dict(sorted(self.digests.items()))
