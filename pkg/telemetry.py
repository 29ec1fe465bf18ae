"""
NDJSON telemetry sink.

Request workers and the maintenance thread hand records to a bounded queue; a single
writer thread drains it to disk, one JSON object per line.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
from typing import Any, Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

_STOP = object()


def _to_native(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, default=_to_native, ensure_ascii=False)


class TelemetrySink:
    """
    Single-consumer NDJSON writer.

    With ``path=None`` records are kept in ``records`` instead of being written, which is
    what tests and the in-memory service mode use.
    """

    def __init__(self, path: Optional[str] = None, queue_size: int = 8192):
        self.path = path
        self.records: List[Dict[str, Any]] = []
        self.written = 0
        self._queue: "queue.Queue[Any]" = queue.Queue(maxsize=queue_size)
        self._closed = False
        self._file = None
        if path is not None:
            directory = os.path.dirname(os.path.abspath(path))
            os.makedirs(directory, exist_ok=True)
            self._file = open(path, "w", encoding="utf-8")
        self._writer = threading.Thread(target=self._drain, name="telemetry-writer", daemon=True)
        self._writer.start()

    def emit(self, record: Dict[str, Any]) -> None:
        """Queue one record; blocks while the queue is full"""
        if self._closed:
            raise RuntimeError("telemetry sink is closed")
        self._queue.put(record)

    def _drain(self) -> None:
        while True:
            record = self._queue.get()
            if record is _STOP:
                break
            try:
                if self._file is not None:
                    self._file.write(dumps(record) + "\n")
                else:
                    self.records.append(record)
                self.written += 1
            except Exception:
                logger.exception("Failed to write telemetry record")
        if self._file is not None:
            self._file.flush()

    def close(self) -> None:
        """Flush every queued record and stop the writer"""
        if self._closed:
            return
        self._closed = True
        self._queue.put(_STOP)
        self._writer.join()
        if self._file is not None:
            self._file.close()
            logger.info(f"Wrote {self.written} telemetry records to {self.path}")

    def __enter__(self) -> "TelemetrySink":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()
