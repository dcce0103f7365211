#!/usr/bin/env python3
import os
import tempfile


def atomic_write(path: str, data: bytes | str) -> str:
    """
    Write a file so that readers only ever see the complete content: write to a
    temporary name in the same directory, then rename over the target
    """
    path = os.path.realpath(str(path))
    directory = os.path.dirname(path)
    os.makedirs(directory, exist_ok=True)

    payload = data.encode() if isinstance(data, str) else bytes(data)
    handle, temp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(handle, "wb") as f:
            f.write(payload)
        os.replace(temp_path, path)
    except BaseException:
        # Don't leave half-written temp files behind
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise

    return path
