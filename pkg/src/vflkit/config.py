"""Run configuration: flat key=value files, flag overrides, derived seeds.

Defaults reproduce the reference experiment: 20000 rows, 30 epochs, batch
128, owner/scientist learning rates 0.01/0.1, 392->64 owner segments and a
128->500->10 scientist segment.

Every random choice in a run (ID assignment, scrambling, model init, epoch
shuffling, PSI scalars, session id) derives from the single master ``seed``
via SHA-256 tagging, so identical seeds give bit-identical runs regardless
of transport.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .nn import Activation, SegmentSpec
from .training import TrainingConfig

__all__ = ["RunConfig", "parse_config_file", "derive_seed", "derive_session_id"]


def derive_seed(master: int, tag: str) -> int:
    """Stable 64-bit sub-seed for one purpose, derived from the master seed."""
    digest = hashlib.sha256(f"{master}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def derive_session_id(master: int) -> bytes:
    return hashlib.sha256(f"{master}:session".encode()).digest()[:8]


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat key=value file; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _parse_int_list(value: str) -> list[int]:
    return [int(v) for v in value.split(",") if v.strip()]


def _parse_str_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


@dataclass
class RunConfig:
    """Everything the CLI commands need; file values < flag overrides."""

    seed: int = 7
    rows: int = 20000
    keep_fraction: float = 0.9
    cut_col: int = 14

    epochs: int = 30
    batch_size: int = 128
    owner_lr: float = 0.01
    scientist_lr: float = 0.1
    shuffle: bool = True

    owner_dims: list[int] = field(default_factory=lambda: [392, 64])
    owner_acts: list[str] = field(default_factory=lambda: ["relu"])
    scientist_dims: list[int] = field(default_factory=lambda: [128, 500, 10])
    scientist_acts: list[str] = field(default_factory=lambda: ["relu", "identity"])
    num_owners: int = 2

    psi_fpr: float = 1e-6
    psi_group: str = "modp2048"
    psi_scalar_bits: int = 256

    data_dir: str = "data"
    mnist_dir: str = "data/mnist"
    partitions: list[str] = field(default_factory=lambda: ["left.pyvt", "right.pyvt"])
    labels: str = "labels.pyvl"
    eval_partitions: list[str] = field(
        default_factory=lambda: ["left_test.pyvt", "right_test.pyvt"]
    )
    eval_labels: str = "labels_test.pyvl"
    metrics_out: str = "metrics.csv"

    owner_addrs: list[str] = field(default_factory=lambda: ["127.0.0.1:9001", "127.0.0.1:9002"])
    listen_host: str = "127.0.0.1"
    listen_port: int = 9001
    owner_index: int = 0
    partition: str = ""  # single-owner process: its own partition file
    eval_partition: str = ""
    connect_timeout: float = 30.0
    recv_timeout: float = 300.0

    _PARSERS = {
        "seed": int,
        "rows": int,
        "keep_fraction": float,
        "cut_col": int,
        "epochs": int,
        "batch_size": int,
        "owner_lr": float,
        "scientist_lr": float,
        "shuffle": _parse_bool,
        "owner_dims": _parse_int_list,
        "owner_acts": _parse_str_list,
        "scientist_dims": _parse_int_list,
        "scientist_acts": _parse_str_list,
        "num_owners": int,
        "psi_fpr": float,
        "psi_group": str,
        "psi_scalar_bits": int,
        "data_dir": str,
        "mnist_dir": str,
        "partitions": _parse_str_list,
        "labels": str,
        "eval_partitions": _parse_str_list,
        "eval_labels": str,
        "metrics_out": str,
        "owner_addrs": _parse_str_list,
        "listen_host": str,
        "listen_port": int,
        "owner_index": int,
        "partition": str,
        "eval_partition": str,
        "connect_timeout": float,
        "recv_timeout": float,
    }

    def apply(self, values: dict[str, str]) -> "RunConfig":
        for key, raw in values.items():
            parser = self._PARSERS.get(key)
            if parser is None:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                setattr(self, key, parser(raw))
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
        return self

    @classmethod
    def load(cls, config_path: str | Path | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        if config_path:
            cfg.apply(parse_config_file(config_path))
        if overrides:
            cfg.apply(overrides)
        return cfg

    # -- derived pieces ----------------------------------------------------

    def _spec(self, dims: list[int], acts: list[str]) -> SegmentSpec:
        if len(acts) != len(dims) - 1:
            raise ConfigError(
                f"{len(dims)} widths need {len(dims) - 1} activations, got {len(acts)}"
            )
        return SegmentSpec.from_dims(dims, [Activation.parse(a) for a in acts])

    def owner_spec(self) -> SegmentSpec:
        return self._spec(self.owner_dims, self.owner_acts)

    def scientist_spec(self) -> SegmentSpec:
        return self._spec(self.scientist_dims, self.scientist_acts)

    def training_config(self) -> TrainingConfig:
        try:
            return TrainingConfig(
                epochs=self.epochs,
                batch_size=self.batch_size,
                owner_lr=self.owner_lr,
                scientist_lr=self.scientist_lr,
                shuffle_seed=derive_seed(self.seed, "shuffle"),
                owner_specs=[self.owner_spec() for _ in range(self.num_owners)],
                scientist_spec=self.scientist_spec(),
                shuffle_each_epoch=self.shuffle,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def data_path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else Path(self.data_dir) / p

    def scientist_model_seed(self) -> int:
        return derive_seed(self.seed, "model:scientist")

    def owner_model_seed(self, owner_index: int) -> int:
        return derive_seed(self.seed, f"model:owner:{owner_index}")

    def psi_client_seed(self, round_tag: str) -> int:
        return derive_seed(self.seed, f"psi:client:{round_tag}")

    def psi_server_seed(self, round_tag: str, owner_index: int) -> int:
        return derive_seed(self.seed, f"psi:server:{round_tag}:{owner_index}")

    def session_id(self) -> bytes:
        return derive_session_id(self.seed)

    def summary(self) -> str:
        pairs = []
        for f in fields(self):
            pairs.append(f"{f.name}={getattr(self, f.name)}")
        return " ".join(pairs)
