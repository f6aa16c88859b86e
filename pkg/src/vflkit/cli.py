"""Command-line entry points.

Commands:
    split-data   build owner partitions + label file from MNIST IDX files
    simulate     run scientist + owners over loopback in one process
    owner        run a single data-owner process (listens for the scientist)
    scientist    run the orchestrating scientist process (dials the owners)
    psi-test     standalone two-set intersection over id files

Exit codes: 0 ok, 2 missing/invalid input, 3 connect/timeout,
4 linkage failure (e.g. empty intersection), 5 protocol violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from random import Random

from . import psi
from .config import RunConfig, derive_seed
from .data import (
    LabeledSet,
    assign_ids,
    load_mnist_idx,
    read_labels,
    read_partition,
    scramble,
    vertical_split,
    write_labels,
    write_partition,
)
from .errors import (
    ConfigError,
    FormatError,
    LinkageError,
    ProtocolError,
    PsiError,
    TransportError,
    VflkitError,
)
from .linkage import owner_link, scientist_link
from .nn import init_segment
from .simulate import simulate_run
from .training import OwnerState, metrics_to_csv, run_owner, run_scientist
from .transport import accept_channel, connect_tcp, listen_tcp

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "VFLKIT_CONFIG"

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONNECT = 3
EXIT_LINKAGE = 4
EXIT_PROTOCOL = 5

IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find_idx(directory: Path, basename: str) -> Path | None:
    for candidate in (directory / basename, directory / (basename + ".gz")):
        if candidate.is_file():
            return candidate
    return None


def _load_config(args: argparse.Namespace) -> RunConfig:
    config_path = args.config or os.environ.get(CONFIG_ENV_VAR) or None
    overrides: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key, flag in getattr(args, "_flag_keys", {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return RunConfig.load(config_path, overrides)


def _add_common(parser: argparse.ArgumentParser, keys: list[str]) -> None:
    parser.add_argument("--config", help=f"config file (or ${CONFIG_ENV_VAR})")
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override any config key"
    )
    flag_keys = {}
    for key in keys:
        flag = key.replace("_", "-")
        dest = f"opt_{key}"
        parser.add_argument(f"--{flag}", dest=dest, metavar="V", help=f"override {key}")
        flag_keys[key] = dest
    parser.set_defaults(_flag_keys=flag_keys)


# ---------------------------------------------------------------------------
# split-data
# ---------------------------------------------------------------------------


def cmd_split_data(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    mnist_dir = Path(cfg.mnist_dir)
    out_dir = Path(cfg.data_dir)

    images_path = _find_idx(mnist_dir, IDX_NAMES["train_images"])
    labels_path = _find_idx(mnist_dir, IDX_NAMES["train_labels"])
    if images_path is None or labels_path is None:
        print(f"error: MNIST IDX files not found under {mnist_dir}", file=sys.stderr)
        return EXIT_INPUT

    images, labels = load_mnist_idx(images_path, labels_path)
    rows = min(cfg.rows, len(images))
    if rows < cfg.rows:
        logger.warning("dataset has only %d rows; requested %d", rows, cfg.rows)
    ids = assign_ids(rows, derive_seed(cfg.seed, "ids"))
    left, right = vertical_split(images[:rows], ids, cfg.cut_col)
    left = scramble(left, cfg.keep_fraction, derive_seed(cfg.seed, "scramble:left"))
    right = scramble(right, cfg.keep_fraction, derive_seed(cfg.seed, "scramble:right"))

    out_dir.mkdir(parents=True, exist_ok=True)
    write_partition(left, out_dir / "left.pyvt")
    write_partition(right, out_dir / "right.pyvt")
    write_labels(LabeledSet(ids=ids, labels=labels[:rows]), out_dir / "labels.pyvl")
    print(
        f"wrote {out_dir}/left.pyvt ({len(left)} rows), "
        f"{out_dir}/right.pyvt ({len(right)} rows), "
        f"{out_dir}/labels.pyvl ({rows} rows)"
    )

    test_images_path = _find_idx(mnist_dir, IDX_NAMES["test_images"])
    test_labels_path = _find_idx(mnist_dir, IDX_NAMES["test_labels"])
    if test_images_path is not None and test_labels_path is not None:
        test_images, test_labels = load_mnist_idx(test_images_path, test_labels_path)
        test_ids = assign_ids(len(test_images), derive_seed(cfg.seed, "ids:test"))
        tleft, tright = vertical_split(test_images, test_ids, cfg.cut_col)
        write_partition(tleft, out_dir / "left_test.pyvt")
        write_partition(tright, out_dir / "right_test.pyvt")
        write_labels(LabeledSet(ids=test_ids, labels=test_labels), out_dir / "labels_test.pyvl")
        print(f"wrote evaluation partitions ({len(test_images)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _read_datasets(cfg: RunConfig):
    partitions = []
    for name in cfg.partitions[: cfg.num_owners]:
        path = cfg.data_path(name)
        if not path.is_file():
            raise FileNotFoundError(f"partition file {path} not found")
        partitions.append(read_partition(path))
    if len(partitions) != cfg.num_owners:
        raise ConfigError(f"{cfg.num_owners} owners need {cfg.num_owners} partition files")
    labels_path = cfg.data_path(cfg.labels)
    if not labels_path.is_file():
        raise FileNotFoundError(f"label file {labels_path} not found")
    labeled = read_labels(labels_path)

    eval_paths = [cfg.data_path(p) for p in cfg.eval_partitions[: cfg.num_owners]]
    eval_labels_path = cfg.data_path(cfg.eval_labels)
    if all(p.is_file() for p in eval_paths) and eval_labels_path.is_file():
        eval_partitions = [read_partition(p) for p in eval_paths]
        eval_labeled = read_labels(eval_labels_path)
    else:
        eval_partitions, eval_labeled = None, None
    return partitions, labeled, eval_partitions, eval_labeled


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    partitions, labeled, eval_partitions, eval_labeled = _read_datasets(cfg)
    result = simulate_run(cfg, partitions, labeled, eval_partitions, eval_labeled)
    Path(cfg.metrics_out).write_text(metrics_to_csv(result.metrics))
    print(f"linked {result.global_size} rows; wrote {cfg.metrics_out}")
    for m in result.metrics:
        logger.info(
            "epoch %d loss %.4f train_acc %.4f val_acc %.4f",
            m.epoch, m.train_loss, m.train_accuracy, m.validation_accuracy,
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# owner / scientist processes
# ---------------------------------------------------------------------------


def cmd_owner(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    idx = cfg.owner_index
    partition_path = cfg.data_path(cfg.partition or cfg.partitions[idx])
    if not partition_path.is_file():
        raise FileNotFoundError(f"partition file {partition_path} not found")
    partition = read_partition(partition_path)
    eval_partition = None
    eval_path = cfg.data_path(cfg.eval_partition or cfg.eval_partitions[idx])
    if eval_path.is_file():
        eval_partition = read_partition(eval_path)

    params = psi.group_by_name(cfg.psi_group)
    listener, port = listen_tcp(cfg.listen_host, cfg.listen_port)
    print(f"listening on {cfg.listen_host}:{port}", flush=True)
    channel = accept_channel(
        listener, timeout=cfg.connect_timeout,
        local_name=f"owner{idx}", peer_name="scientist",
        default_timeout=cfg.recv_timeout,
    )
    listener.close()
    try:
        aligned = owner_link(
            channel, partition, params, cfg.psi_fpr,
            cfg.psi_server_seed("train", idx), idx + 1, cfg.psi_scalar_bits,
        )
        logger.info("linked %d training rows", len(aligned))
        aligned_eval = None
        if eval_partition is not None:
            aligned_eval = owner_link(
                channel, eval_partition, params, cfg.psi_fpr,
                cfg.psi_server_seed("eval", idx), idx + 1, cfg.psi_scalar_bits,
            )
        segment = init_segment(cfg.owner_spec(), cfg.owner_model_seed(idx))
        state = OwnerState(segment, aligned, aligned_eval)
        run_owner(channel, state, cfg.owner_lr, idx)
        logger.info("training finished")
    finally:
        channel.close()
    return EXIT_OK


def cmd_scientist(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    labels_path = cfg.data_path(cfg.labels)
    if not labels_path.is_file():
        raise FileNotFoundError(f"label file {labels_path} not found")
    labeled = read_labels(labels_path)
    eval_labels_path = cfg.data_path(cfg.eval_labels)
    eval_labeled = read_labels(eval_labels_path) if eval_labels_path.is_file() else None

    params = psi.group_by_name(cfg.psi_group)
    session = cfg.session_id()
    addrs = cfg.owner_addrs[: cfg.num_owners]
    if len(addrs) != cfg.num_owners:
        raise ConfigError(f"{cfg.num_owners} owners need {cfg.num_owners} addresses")
    channels = []
    try:
        for i, addr in enumerate(addrs):
            host, _, port = addr.rpartition(":")
            channels.append(
                connect_tcp(
                    host, int(port), cfg.connect_timeout,
                    local_name="scientist", peer_name=f"owner{i}",
                    default_timeout=cfg.recv_timeout,
                )
            )
        global_train = scientist_link(
            labeled.ids, channels, params, cfg.psi_fpr,
            cfg.psi_client_seed("train"), session, cfg.psi_scalar_bits,
        )
        logger.info("global intersection: %d ids", len(global_train))
        aligned_labels = labeled.aligned_to(list(global_train.ids))
        aligned_eval_labels = None
        if eval_labeled is not None:
            global_eval = scientist_link(
                eval_labeled.ids, channels, params, cfg.psi_fpr,
                cfg.psi_client_seed("eval"), session, cfg.psi_scalar_bits,
            )
            aligned_eval_labels = eval_labeled.aligned_to(list(global_eval.ids))
        segment = init_segment(cfg.scientist_spec(), cfg.scientist_model_seed())
        metrics = run_scientist(
            segment, cfg.training_config(), channels, aligned_labels,
            aligned_eval_labels, session,
        )
        Path(cfg.metrics_out).write_text(metrics_to_csv(metrics))
        print(f"linked {len(global_train)} rows; wrote {cfg.metrics_out}")
    finally:
        for ch in channels:
            ch.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# psi-test
# ---------------------------------------------------------------------------


def cmd_psi_test(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    client_path, server_path = Path(args.client_ids), Path(args.server_ids)
    for p in (client_path, server_path):
        if not p.is_file():
            print(f"error: id file {p} not found", file=sys.stderr)
            return EXIT_INPUT
    client_ids = [ln for ln in client_path.read_text().splitlines() if ln.strip()]
    server_ids = [ln for ln in server_path.read_text().splitlines() if ln.strip()]
    if not server_ids:
        print("error: server id file is empty", file=sys.stderr)
        return EXIT_INPUT

    params = psi.group_by_name(cfg.psi_group)
    rng = Random(cfg.seed)
    k_c = psi.SecretScalar.generate(params, rng, cfg.psi_scalar_bits)
    k_s = psi.SecretScalar.generate(params, rng, cfg.psi_scalar_bits)
    client_bytes = [s.encode("utf-8") for s in client_ids]
    server_bytes = [s.encode("utf-8") for s in server_ids]

    blinded = psi.blind(client_bytes, k_c, params)
    doubly = psi.evaluate(blinded, k_s, params)
    digest = psi.build_server_digest(server_bytes, k_s, cfg.psi_fpr, params)
    matches = psi.unblind_match(doubly, k_c, digest, params)
    for i in matches:
        print(client_ids[i])
    logger.info("%d of %d client ids matched", len(matches), len(client_ids))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vflkit",
        description="Vertical federated learning: PSI linkage + split-network training.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split-data", help="build partition/label files from MNIST")
    _add_common(p, ["mnist_dir", "data_dir", "seed", "rows", "keep_fraction", "cut_col"])
    p.set_defaults(func=cmd_split_data)

    p = sub.add_parser("simulate", help="run all parties in-process over loopback")
    _add_common(p, ["data_dir", "seed", "epochs", "batch_size", "metrics_out", "psi_group", "num_owners"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("owner", help="run one data-owner process")
    _add_common(
        p,
        ["data_dir", "seed", "owner_index", "listen_host", "listen_port",
         "partition", "eval_partition", "psi_group", "connect_timeout"],
    )
    p.set_defaults(func=cmd_owner)

    p = sub.add_parser("scientist", help="run the data-scientist process")
    _add_common(
        p,
        ["data_dir", "seed", "epochs", "batch_size", "metrics_out",
         "owner_addrs", "psi_group", "num_owners", "connect_timeout"],
    )
    p.set_defaults(func=cmd_scientist)

    p = sub.add_parser("psi-test", help="intersect two newline-separated id files")
    p.add_argument("client_ids", help="client-side id file")
    p.add_argument("server_ids", help="server-side id file")
    _add_common(p, ["psi_group", "psi_fpr", "seed"])
    p.set_defaults(func=cmd_psi_test)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TransportError as exc:
        print(f"connection error: {exc}", file=sys.stderr)
        return EXIT_CONNECT
    except LinkageError as exc:
        print(f"linkage error: {exc}", file=sys.stderr)
        return EXIT_LINKAGE
    except (ProtocolError, PsiError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except VflkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
