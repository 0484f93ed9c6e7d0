"""Crash-safe output: write to a sibling temp file, rename on success."""

import os
import tempfile


def atomic_write(path, writer, mode="wb"):
    """Call ``writer(fileobj)`` on a temp file and move it onto ``path``.

    Nothing is left at ``path`` if ``writer`` raises.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_bytes(path, data: bytes):
    atomic_write(path, lambda fh: fh.write(data))


def atomic_write_text(path, text: str):
    atomic_write(path, lambda fh: fh.write(text), mode="w")
