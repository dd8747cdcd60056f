import hashlib
import json
import math

import numpy as np

from errors import ConfigError


def deriveSeed(*keys):
    """
    Derives a 32-bit seed from a master seed and any number of labels.

    The result depends only on the keys, never on scheduling, so every
    (split, fold, task) unit draws the same stream whichever worker runs it.

    Parameters
    ----------
    *keys : int or string
        Master seed followed by labels, e.g. ``deriveSeed(7, "split", 2)``.

    Returns
    -------
    seed : int
        Seed in [0, 2**32).

    Examples
    --------
    >>> deriveSeed(7, "split", 0) == deriveSeed(7, "split", 0)
    True
    """
    text = "/".join(str(int(k)) if isinstance(k, (int, np.integer)) else str(k) for k in keys)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def parseNameList(text, allowed=None, what="name"):
    """
    Parses a comma separated list of names and validates it.

    Parameters
    ----------
    text : string or list
        Comma separated names ("ldml,ipw") or an already split list.
    allowed : list, default=None
        Accepted names. Every name is accepted when None.
    what : string, default="name"
        Label used in error messages.

    Returns
    -------
    names : list of strings

    Examples
    --------
    >>> parseNameList("ldml, ipw", ["ldml", "ipw", "dml_d"])
    ['ldml', 'ipw']
    """
    if text is None:
        return []
    items = text if isinstance(text, (list, tuple)) else str(text).split(",")
    names = [str(item).strip() for item in items if str(item).strip()]
    if allowed is not None:
        for name in names:
            if name not in allowed:
                raise ConfigError(f"unknown {what} '{name}' (expected one of {', '.join(allowed)})")
    return names


def parseIntList(text, what="value"):
    """Parses "1600,6400" (or a list) into a list of ints."""
    try:
        return [int(v) for v in parseNameList(text, what=what)]
    except ValueError as exc:
        raise ConfigError(f"invalid {what} list: {text!r}") from exc


def toJsonable(obj):
    """
    Converts numpy containers and scalars into plain JSON types.

    Non-finite floats become None so the output stays strict JSON.
    """
    if isinstance(obj, dict):
        return {str(k): toJsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [toJsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return toJsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumpJson(obj):
    """Serializes a report deterministically (fixed key order and float repr)."""
    return json.dumps(toJsonable(obj), indent=2, sort_keys=False) + "\n"
