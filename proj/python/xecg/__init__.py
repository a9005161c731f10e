"""Python access to the xecg C++ core."""

import json as _json

from . import _core
from ._core import (
    auroc,
    bench_score,
    coding_rate,
    concordance_index,
    cox_loss,
    momentum_schedule,
    params_hash,
    rpeak_f1,
    smape,
    synth_ecg,
    welch_t,
)


class Encoder(_core.Encoder):
    """Encoder from a checkpoint path or from a config dict and seed."""

    @classmethod
    def from_config(cls, config=None, seed=0):
        return cls(_json.dumps(config or {}), seed)

    @classmethod
    def load(cls, path):
        return cls(str(path))

    @property
    def config(self):
        return _json.loads(self.config_json())


__all__ = [
    "Encoder",
    "auroc",
    "bench_score",
    "coding_rate",
    "concordance_index",
    "cox_loss",
    "momentum_schedule",
    "params_hash",
    "rpeak_f1",
    "smape",
    "synth_ecg",
    "welch_t",
]
