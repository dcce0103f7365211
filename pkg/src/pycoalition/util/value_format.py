#!/usr/bin/env python3


def value_format(val: float | int | bool | str | None) -> float | int | bool | str | None:
    """
    Given a value as text (e.g., a command-line override), try to guess whether
    it's a string, boolean, integer, float or null... then cast accordingly
    """
    if val is None:
        return None
    if not isinstance(val, str):
        return val

    val = val.strip()
    try:
        # Attempt conversion to float
        _ = float(val)

        # If we're here without an error thrown already, we have a number.
        # A decimal point or exponent in the original text means float
        if "." in val or "e" in val.lower() or val.lower() in ("inf", "-inf", "nan"):
            return float(val)
        else:
            return int(val)
    except ValueError:
        # Can't be converted to a number, so it's probably
        # a boolean, null or string. We do a simple check here:
        if val.lower() in ["true", "yes", "on"]:
            return True
        elif val.lower() in ["false", "no", "off"]:
            return False
        elif val.lower() in ["none", "null", "~"]:
            return None
        else:
            return val
