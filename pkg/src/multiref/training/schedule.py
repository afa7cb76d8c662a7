"""Learning-rate schedule as a pure function of the (0-based) epoch index."""

from __future__ import annotations

import bisect

from ..config import TrainConfig


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate used throughout 0-based ``epoch``.

    ``step``: multiply by ``decay_factor`` once for every decay epoch already
    reached, so with decays at 60 and 90 epochs 0-59 use ``lr``, 60-89 use
    ``lr * f`` and 90 onwards ``lr * f**2``.

    ``linear``: piecewise-linear interpolation through ``(0, lr)`` and
    ``(d_i, lr * f**i)``, constant after the last decay epoch.  It agrees
    with ``step`` at every decay epoch.
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    decays = cfg.decay_epochs
    if cfg.decay_kind == "step":
        return cfg.lr * cfg.decay_factor ** bisect.bisect_right(decays, epoch)
    knots = [0] + list(decays)
    values = [cfg.lr * cfg.decay_factor**i for i in range(len(knots))]
    if epoch >= knots[-1]:
        return values[-1]
    i = bisect.bisect_right(knots, epoch) - 1
    t = (epoch - knots[i]) / (knots[i + 1] - knots[i])
    return values[i] + t * (values[i + 1] - values[i])
