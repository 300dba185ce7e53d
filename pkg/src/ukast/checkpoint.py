"""Named-array persistence.

A checkpoint is a directory with one raw little-endian float32 file per
array plus ``manifest.txt`` holding one line per array: ``name dim dim ...``.
Round-trips are bit-exact.
"""

import os

import numpy as np

MANIFEST = "manifest.txt"


def _filename(name):
    return name + ".bin"


def save_arrays(directory, arrays):
    """arrays: mapping name -> ndarray (written as little-endian float32)."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name, arr in arrays.items():
        if " " in name:
            raise ValueError(f"array name may not contain spaces: {name!r}")
        data = np.ascontiguousarray(arr, dtype="<f4")
        with open(os.path.join(directory, _filename(name)), "wb") as fh:
            fh.write(data.tobytes())
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {dims}".rstrip())
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_arrays(directory):
    """Read a checkpoint directory back into {name: float32 ndarray}."""
    manifest = os.path.join(directory, MANIFEST)
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    out = {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(" ")
            name, dims = parts[0], tuple(int(d) for d in parts[1:])
            path = os.path.join(directory, _filename(name))
            raw = np.fromfile(path, dtype="<f4")
            expect = int(np.prod(dims)) if dims else 1
            if raw.size != expect:
                raise ValueError(
                    f"checkpoint manifest mismatch for {name!r}: "
                    f"file holds {raw.size} floats, manifest says {expect}"
                )
            out[name] = raw.reshape(dims)
    return out
