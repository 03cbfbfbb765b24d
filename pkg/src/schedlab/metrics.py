"""Line-oriented metrics persistence.

One record per line: space-separated ``key=value`` pairs with keys sorted,
floats printed with 17 significant digits so a re-parse reproduces every
float64 bit-exactly. The file starts with a single header line. Writers
buffer and flush at period boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

HEADER = "# schedlab metrics v1"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)):
        return str(value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def parse_value(raw: str):
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


@dataclass
class MetricsEvent:
    step: int
    kind: str
    fields: dict

    def line(self) -> str:
        record = {"step": self.step, "kind": self.kind, **self.fields}
        return " ".join(f"{key}={format_value(record[key])}"
                        for key in sorted(record))


class MetricsWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "w")
        self._handle.write(HEADER + "\n")
        self._last_step = -1

    def emit(self, step: int, kind: str, **fields) -> None:
        if step < self._last_step:
            raise ValueError(
                f"step {step} is behind the last emitted step {self._last_step}")
        self._last_step = step
        self._handle.write(MetricsEvent(step, kind, fields).line() + "\n")

    def flush(self) -> None:
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.flush()
            self._handle.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def parse_metrics(path: str | Path) -> list[MetricsEvent]:
    events: list[MetricsEvent] = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        fields = {}
        for token in line.split(" "):
            key, _, raw = token.partition("=")
            fields[key] = parse_value(raw)
        step = fields.pop("step")
        kind = fields.pop("kind")
        events.append(MetricsEvent(step=int(step), kind=str(kind),
                                   fields=fields))
    return events
