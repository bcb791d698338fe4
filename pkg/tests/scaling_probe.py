"""Anchor-mode training on a synthetic corpus, run in a fresh process.

Prints one JSON line: per-epoch wall time, peak resident memory, and
whether any N x N tensor was requested.

    python scaling_probe.py N ANCHORS EPOCHS
"""

import json
import resource
import sys
import time

import numpy as np

from gslmpp import tensor as T
from gslmpp.config import RunConfig
from gslmpp.data import from_smiles, random_split, synthetic_smiles
from gslmpp.training import fit


def peak_rss_mb() -> float:
    """High-water resident set of this process image.

    ``ru_maxrss`` survives ``execve`` on Linux, so a child of a large parent
    would report the parent's peak; ``VmHWM`` starts fresh at exec.
    """
    try:
        with open("/proc/self/status") as fh:
            for line in fh:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) / 1024.0
    except OSError:
        pass
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def main(n: int, anchors: int, epochs: int):
    smiles = synthetic_smiles(n, seed=0)
    labels = np.array([s.count("C") + 0.5 * s.count("N") - s.count("O") for s in smiles], dtype=np.float64)
    ds = from_smiles(smiles, labels, "regression", "synthetic")
    split = random_split(len(ds), seed=0)
    cfg = RunConfig(anchors=anchors, max_epoch=epochs, encoder_chunk=1000)
    stamps = []
    violated = False
    try:
        with T.forbid_shapes(lambda shp: len(shp) == 2 and shp[0] >= n and shp[1] >= n):
            start = time.perf_counter()
            fit(ds, cfg, split, seed=0, callback=lambda row: stamps.append(time.perf_counter()))
    except T.ForbiddenShapeError:
        violated = True
    # the first interval also covers parsing, fingerprints and the sparse A0
    setup_and_first = stamps[0] - start if stamps else None
    epoch_times = np.diff(stamps).tolist()
    print(json.dumps({"n": len(ds), "anchors": anchors, "epoch_seconds": epoch_times,
                      "setup_and_first_epoch_seconds": setup_and_first,
                      "peak_rss_mb": peak_rss_mb(), "dense_tensor_requested": violated}))


if __name__ == "__main__":
    main(int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3]))
