import hashlib
import math
from typing import Sequence

import numpy as np


def derive_seed_sequence(master_seed: int, index: int) -> np.random.SeedSequence:
    """Child seed sequence for task `index` of a run seeded with `master_seed`."""
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))


def derive_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent, reproducible generator for task `index`."""
    return np.random.default_rng(derive_seed_sequence(master_seed, index))


def derive_int_seed(master_seed: int, index: int) -> int:
    """64-bit integer seed for task `index`, for configs that store plain ints."""
    return int(derive_seed_sequence(master_seed, index).generate_state(1, np.uint64)[0])


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def parse_int_list(value: str) -> list[int]:
    """Parse '32,16' (or '' for an empty list) from key-value config files."""
    return [int(part) for part in value.replace(" ", "").split(",") if part]


def parse_float_list(value: str) -> list[float]:
    return [float(part) for part in value.replace(" ", "").split(",") if part]


def parse_str_list(value: str) -> list[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


def rejected_count(q: float, n: int) -> int:
    """ceil(q * n), immune to float noise such as 0.1 * 30 = 3.0000000000000004."""
    return min(n, math.ceil(q * n - 1e-9))


def format_float_row(values: Sequence[float]) -> list[str]:
    """repr-formatted floats, so CSV files round-trip bit for bit."""
    return [repr(float(v)) for v in values]


def format_error(msg: str) -> str:
    return f"[bold red]Error:[/bold red] {msg}"


def format_success(msg: str) -> str:
    return f"[bold green]Success:[/bold green] {msg}"
