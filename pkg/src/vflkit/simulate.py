"""All-in-one run: scientist and owners as threads over loopback channels.

Semantics match the multi-process TCP deployment exactly; with the same seed
both produce bit-identical metrics (the per-op math is schedule-independent).
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

from .config import RunConfig
from .data import FeaturePartition, LabeledSet
from .errors import ChannelClosed, VflkitError
from .linkage import owner_link, scientist_link
from .nn import ModelSegment, init_segment
from .psi import group_by_name
from .training import EpochMetrics, OwnerState, run_owner, run_scientist
from .transport import MessageLog, loopback_pair, owner_party_code

logger = logging.getLogger(__name__)

__all__ = ["SimulationResult", "simulate_run"]


@dataclass
class SimulationResult:
    metrics: list[EpochMetrics]
    scientist_segment: ModelSegment
    owner_segments: list[ModelSegment]
    owner_states: list[OwnerState]
    global_size: int


def simulate_run(
    cfg: RunConfig,
    partitions: list[FeaturePartition],
    labeled: LabeledSet,
    eval_partitions: list[FeaturePartition] | None = None,
    eval_labeled: LabeledSet | None = None,
    log: MessageLog | None = None,
) -> SimulationResult:
    """Linkage then training across in-process parties; raises on any failure."""
    n_owners = len(partitions)
    if eval_partitions is not None and len(eval_partitions) != n_owners:
        raise ValueError("need one evaluation partition per owner")
    params = group_by_name(cfg.psi_group)
    session = cfg.session_id()
    tcfg = cfg.training_config()
    if len(tcfg.owner_specs) != n_owners:
        raise ValueError(f"config expects {len(tcfg.owner_specs)} owners, got {n_owners}")

    sci_channels = []
    own_channels = []
    for i in range(n_owners):
        sci_end, own_end = loopback_pair(
            "scientist", f"owner{i}", log=log, default_timeout=cfg.recv_timeout
        )
        sci_channels.append(sci_end)
        own_channels.append(own_end)

    results: dict = {}
    errors: list[Exception] = []

    def guarded(name, fn):
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - collected and re-raised below
            errors.append(exc)
            logger.debug("%s failed: %s", name, exc)
            for ch in sci_channels + own_channels:
                ch.close()

    def owner_task(i: int) -> None:
        aligned = owner_link(
            own_channels[i], partitions[i], params, cfg.psi_fpr,
            cfg.psi_server_seed("train", i), owner_party_code(i), cfg.psi_scalar_bits,
        )
        aligned_eval = None
        if eval_partitions is not None:
            aligned_eval = owner_link(
                own_channels[i], eval_partitions[i], params, cfg.psi_fpr,
                cfg.psi_server_seed("eval", i), owner_party_code(i), cfg.psi_scalar_bits,
            )
        segment = init_segment(tcfg.owner_specs[i], cfg.owner_model_seed(i))
        state = OwnerState(segment, aligned, aligned_eval)
        results[f"owner{i}"] = (run_owner(own_channels[i], state, cfg.owner_lr, i), state)

    def scientist_task() -> None:
        global_train = scientist_link(
            labeled.ids, sci_channels, params, cfg.psi_fpr,
            cfg.psi_client_seed("train"), session, cfg.psi_scalar_bits,
        )
        aligned_labels = labeled.aligned_to(list(global_train.ids))
        aligned_eval_labels = None
        if eval_labeled is not None:
            global_eval = scientist_link(
                eval_labeled.ids, sci_channels, params, cfg.psi_fpr,
                cfg.psi_client_seed("eval"), session, cfg.psi_scalar_bits,
            )
            aligned_eval_labels = eval_labeled.aligned_to(list(global_eval.ids))
        segment = init_segment(tcfg.scientist_spec, cfg.scientist_model_seed())
        results["global_size"] = len(global_train)
        results["metrics"] = run_scientist(
            segment, tcfg, sci_channels, aligned_labels, aligned_eval_labels, session
        )
        results["scientist"] = segment

    threads = [
        threading.Thread(target=guarded, args=(f"owner{i}", lambda i=i: owner_task(i)), daemon=True)
        for i in range(n_owners)
    ]
    threads.append(threading.Thread(target=guarded, args=("scientist", scientist_task), daemon=True))
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if errors:
        # A party that died closes every channel, so the others fail with
        # ChannelClosed; report the root cause, not the fallout.
        root = next((e for e in errors if not isinstance(e, ChannelClosed)), errors[0])
        raise root

    owner_pairs = [results[f"owner{i}"] for i in range(n_owners)]
    return SimulationResult(
        metrics=results["metrics"],
        scientist_segment=results["scientist"],
        owner_segments=[seg for seg, _ in owner_pairs],
        owner_states=[state for _, state in owner_pairs],
        global_size=results["global_size"],
    )
