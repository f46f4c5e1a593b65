"""File helpers shared by the writers."""
from __future__ import annotations

import contextlib
import io
import os
import tempfile
from pathlib import Path
from typing import IO, Iterator, Union

PathLike = Union[str, "os.PathLike[str]"]


@contextlib.contextmanager
def atomic_write(path: PathLike, mode: str = "w") -> Iterator[IO]:
    """Open a temp file next to ``path`` and rename it into place on success.

    A failure inside the block removes the temp file, so a partially written
    output never shows up under the target name.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": ""}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def open_text(source) -> IO[str]:
    """Accept a path, a text stream or a byte stream and return a text stream."""
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"))
    if isinstance(source, io.TextIOBase):
        return source
    # binary file-like
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def fmt_float(x: float) -> str:
    """Shortest round-trip repr, dot decimal, ``nan`` for undefined."""
    return repr(float(x))
