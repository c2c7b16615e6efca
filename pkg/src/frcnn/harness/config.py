"""``key = value`` config files and flag > file > default merging.

Keys may use dashes or underscores (``base-lr`` and ``base_lr`` are the same
key). Blank lines and text after ``#`` are ignored.
"""


class ConfigError(ValueError):
    pass


def normalize_key(key):
    return key.strip().replace("-", "_")


def parse_config_text(text, source="<config>"):
    """Parse config text into an ordered ``{key: raw string}`` dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read(), path)


def parse_bool(raw):
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_int_list(raw):
    """Comma-separated ints (``"256,32"``); an empty string gives ``()``."""
    if isinstance(raw, (list, tuple)):
        return tuple(int(v) for v in raw)
    return tuple(int(v) for v in str(raw).split(",") if v.strip())


def coerce(raw, default):
    """Convert a config-file string to the type of ``default``."""
    if isinstance(default, bool):
        return parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return parse_int_list(raw)
    return raw


def merge(defaults, file_values, flag_values):
    """Resolve each key as flag, else config file, else default.

    ``file_values`` holds raw strings and is coerced against ``defaults``;
    keys in it that ``defaults`` does not know are returned separately so
    the caller can decide whether they are errors. ``flag_values`` holds only
    flags the user actually gave.
    """
    out = dict(defaults)
    unknown = []
    for key, raw in file_values.items():
        if key not in defaults:
            unknown.append(key)
            continue
        try:
            out[key] = coerce(raw, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
    out.update(flag_values)
    return out, unknown
