from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import ToyDiT, ToyDiTConfig

CHECKPOINT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    pass


def save_checkpoint(model: ToyDiT, path) -> Path:
    """Write ``{version, config, named parameters}`` as an ``.npz`` container."""
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__config__"] = np.array(json.dumps(model.config.to_dict(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> ToyDiT:
    with np.load(Path(path), allow_pickle=False) as z:
        version = int(z["__version__"]) if "__version__" in z else None
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
        config = ToyDiTConfig.from_dict(json.loads(str(z["__config__"])))
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = ToyDiT(config)
    model.load_state_dict(state)
    return model


def write_loss_csv(losses, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]
