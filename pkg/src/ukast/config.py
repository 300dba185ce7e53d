"""Flat ``key = value`` config files with dotted keys.

Precedence when assembling an effective configuration: command-line flags
override config-file values override built-in defaults.
"""


def parse_config_text(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())


def write_config(path, values):
    with open(path, "w") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {values[key]}\n")


def overlay(*layers):
    """Merge dicts left to right; later layers win."""
    out = {}
    for layer in layers:
        if layer:
            out.update(layer)
    return out
