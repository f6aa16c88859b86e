"""Thread harnesses for protocol tests: linkage and training over loopback."""

from __future__ import annotations

import threading

import numpy as np

from vflkit.data import FeaturePartition, LabeledSet, assign_ids
from vflkit.linkage import owner_link, scientist_link
from vflkit.nn import Activation, ModelSegment, SegmentSpec, init_segment
from vflkit.psi import toy_64
from vflkit.training import OwnerState, TrainingConfig, run_owner, run_scientist
from vflkit.transport import MessageLog, loopback_pair

SESSION = b"T" * 8


def make_setup(
    n=64,
    owner_in=(6, 6),
    owner_out=(4, 4),
    sci_dims=(8, 12, 10),
    epochs=3,
    batch_size=16,
    seed=0,
    shuffle=True,
    owner_lr=0.05,
    scientist_lr=0.1,
):
    """Synthetic learnable split-training setup with aligned partitions.

    Returns (tcfg, scientist_segment, owner_segments, parts, labels, x, y)
    where x is the full feature matrix (owner blocks left to right) and the
    labels come from a fixed random linear scorer, so the task is learnable.
    """
    rng = np.random.default_rng(seed)
    ids = assign_ids(n, seed)
    x = rng.random((n, sum(owner_in)))
    projection = rng.normal(size=(sum(owner_in), 10))
    y = (x @ projection).argmax(axis=1)

    parts = []
    offset = 0
    for i, d in enumerate(owner_in):
        parts.append(
            FeaturePartition(ids=ids, features=x[:, offset : offset + d], owner_label=f"o{i}")
        )
        offset += d
    labels = LabeledSet(ids=ids, labels=y)

    owner_specs = [
        SegmentSpec.from_dims([din, dout], [Activation.RELU])
        for din, dout in zip(owner_in, owner_out)
    ]
    sci_acts = [Activation.RELU] * (len(sci_dims) - 2) + [Activation.IDENTITY]
    tcfg = TrainingConfig(
        epochs=epochs,
        batch_size=batch_size,
        owner_lr=owner_lr,
        scientist_lr=scientist_lr,
        shuffle_seed=seed + 1000,
        owner_specs=owner_specs,
        scientist_spec=SegmentSpec.from_dims(list(sci_dims), sci_acts),
        shuffle_each_epoch=shuffle,
    )
    owner_segments = [init_segment(s, seed=seed + 10 + i) for i, s in enumerate(owner_specs)]
    sci_segment = init_segment(tcfg.scientist_spec, seed=seed + 99)
    return tcfg, sci_segment, owner_segments, parts, labels, x, y


def run_linkage_protocol(label_ids, partitions, fpr=1e-6, seed=0, log=None, params=None, timeout=60.0):
    """Scientist + N owners linking over loopback; returns (out dict, errors)."""
    params = params or toy_64()
    sci_channels, own_channels = [], []
    for i in range(len(partitions)):
        a, b = loopback_pair("scientist", f"owner{i}", log=log, default_timeout=timeout)
        sci_channels.append(a)
        own_channels.append(b)
    out: dict = {}
    errors: list[Exception] = []

    def close_all():
        for c in sci_channels + own_channels:
            c.close()

    def owner_task(i):
        try:
            out[i] = owner_link(own_channels[i], partitions[i], params, fpr, 1000 + i, i + 1)
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)
            close_all()

    def scientist_task():
        try:
            out["global"] = scientist_link(label_ids, sci_channels, params, fpr, seed, SESSION)
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)
            close_all()

    threads = [threading.Thread(target=owner_task, args=(i,)) for i in range(len(partitions))]
    threads.append(threading.Thread(target=scientist_task))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return out, errors


def run_split_protocol(
    tcfg: TrainingConfig,
    scientist_segment: ModelSegment,
    owner_segments: list[ModelSegment],
    owner_parts: list[FeaturePartition],
    labels: LabeledSet,
    eval_parts: list[FeaturePartition] | None = None,
    eval_labels: LabeledSet | None = None,
    log: MessageLog | None = None,
    timeout: float = 30.0,
):
    """Run scientist + owners in threads; segments are mutated in place.

    Returns the scientist's metrics list. Any party exception is re-raised.
    """
    n_owners = len(owner_segments)
    sci_channels, own_channels = [], []
    for i in range(n_owners):
        a, b = loopback_pair("scientist", f"owner{i}", log=log, default_timeout=timeout)
        sci_channels.append(a)
        own_channels.append(b)

    out: dict = {}
    errors: list[Exception] = []

    def close_all():
        for c in sci_channels + own_channels:
            c.close()

    def owner_task(i: int):
        try:
            state = OwnerState(
                owner_segments[i],
                owner_parts[i],
                eval_parts[i] if eval_parts is not None else None,
            )
            run_owner(own_channels[i], state, tcfg.owner_lr, i)
            out[f"owner{i}"] = state
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)
            close_all()

    def scientist_task():
        try:
            out["metrics"] = run_scientist(
                scientist_segment, tcfg, sci_channels, labels, eval_labels, SESSION
            )
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)
            close_all()

    threads = [threading.Thread(target=owner_task, args=(i,)) for i in range(n_owners)]
    threads.append(threading.Thread(target=scientist_task))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        from vflkit.errors import ChannelClosed

        raise next((e for e in errors if not isinstance(e, ChannelClosed)), errors[0])
    return out["metrics"]
