"""Stochastic weight averaging of checkpoint snapshots."""
from .errors import EmptyDataError
from .model import PARAM_NAMES, Checkpoint, check_compatible
from .numerics import order_free_mean


def average_checkpoints(snapshots):
    """Element-wise mean of every parameter over ``snapshots``.

    The result carries the largest iteration among the inputs (and that
    snapshot's digests); it does not depend on the order of ``snapshots``.
    """
    snapshots = list(snapshots)
    if not snapshots:
        raise EmptyDataError("no checkpoints to average")
    ref = snapshots[0].params
    for s in snapshots[1:]:
        check_compatible(ref, s.params)
    averaged = {n: order_free_mean([getattr(s.params, n) for s in snapshots]) for n in PARAM_NAMES}
    latest = max(snapshots, key=lambda s: (s.iteration, s.rng_state_digest, s.config_digest))
    return Checkpoint(ref.replace(**averaged), latest.iteration,
                      latest.rng_state_digest, latest.config_digest,
                      {"swa_count": len(snapshots)})
