"""Line protocol between spy agent and collector.

One record per line::

    V1 <seq> <timestamp_s> <device_id> <region_id> <decay_time_ms> <flip_count>\\n

Integers are canonical ASCII decimals (no sign, no leading zeros).  The
timestamp may carry up to three fractional digits, without trailing zeros,
so every valid line has exactly one spelling and round-trips byte for byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Iterator

from ..errors import ProtocolError, ProtocolVersionError

VERSION = "V1"
MAX_LINE = 512
MAX_ID = 64

_INT = re.compile(r"0|[1-9][0-9]*")
_TS = re.compile(r"(0|[1-9][0-9]*)(\.[0-9]{0,2}[1-9])?")
_ID = re.compile(r"[A-Za-z0-9_.:\-]{1,64}")


@dataclass(frozen=True)
class SpyMessage:
    seq: int
    timestamp_s: float
    device_id: str
    region_id: str
    decay_time_ms: int
    flip_count: int

    def __post_init__(self):
        for name in ("seq", "decay_time_ms", "flip_count"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ValueError(f"{name} must be a non-negative int, got {v!r}")
        if self.decay_time_ms <= 0:
            raise ValueError("decay_time_ms must be > 0")
        if not self.timestamp_s >= 0:
            raise ValueError("timestamp_s must be >= 0")
        for name in ("device_id", "region_id"):
            if not _ID.fullmatch(getattr(self, name)):
                raise ValueError(f"{name} must match {_ID.pattern}")
        # store timestamps at millisecond resolution so encode/decode is exact
        object.__setattr__(self, "timestamp_s", round(float(self.timestamp_s) * 1000) / 1000)

    @property
    def decay_time_s(self) -> float:
        return self.decay_time_ms / 1000.0


def _format_ts(ts: float) -> str:
    ms = round(ts * 1000)
    whole, frac = divmod(ms, 1000)
    if frac == 0:
        return str(whole)
    return f"{whole}." + f"{frac:03d}".rstrip("0")


def encode_message(msg: SpyMessage) -> str:
    return (
        f"{VERSION} {msg.seq} {_format_ts(msg.timestamp_s)} {msg.device_id} "
        f"{msg.region_id} {msg.decay_time_ms} {msg.flip_count}\n"
    )


def decode_message(line, base_offset: int = 0) -> SpyMessage:
    """Parse one record.  ``base_offset`` is added to reported byte offsets."""
    if isinstance(line, str):
        try:
            raw = line.encode("ascii")
        except UnicodeEncodeError as e:
            raise ProtocolError("non-ASCII byte", base_offset + len(line[: e.start].encode())) from None
    else:
        raw = bytes(line)
    if len(raw) > MAX_LINE:
        raise ProtocolError(f"line longer than {MAX_LINE} bytes", base_offset + MAX_LINE)
    if not raw.endswith(b"\n"):
        raise ProtocolError("missing newline terminator", base_offset + len(raw))
    body = raw[:-1]
    try:
        text = body.decode("ascii")
    except UnicodeDecodeError as e:
        raise ProtocolError("non-ASCII byte", base_offset + e.start) from None

    fields, offsets, pos = [], [], 0
    for part in text.split(" "):
        fields.append(part)
        offsets.append(base_offset + pos)
        pos += len(part) + 1
    if fields[0] != VERSION:
        if re.fullmatch(r"V[0-9]+", fields[0]):
            raise ProtocolVersionError(f"unsupported protocol version {fields[0]!r}", offsets[0])
        raise ProtocolError(f"bad version token {fields[0]!r}", offsets[0])
    if len(fields) != 7:
        at = offsets[7] if len(fields) > 7 else base_offset + len(body)
        raise ProtocolError(f"expected 7 fields, got {len(fields)}", at)

    def integer(i, name):
        if not _INT.fullmatch(fields[i]):
            raise ProtocolError(f"{name} is not a canonical decimal: {fields[i]!r}", offsets[i])
        return int(fields[i])

    seq = integer(1, "seq")
    if not _TS.fullmatch(fields[2]):
        raise ProtocolError(f"bad timestamp {fields[2]!r}", offsets[2])
    for i, name in ((3, "device_id"), (4, "region_id")):
        if not _ID.fullmatch(fields[i]):
            raise ProtocolError(f"bad {name} {fields[i]!r}", offsets[i])
    decay_ms = integer(5, "decay_time_ms")
    if decay_ms == 0:
        raise ProtocolError("decay_time_ms must be > 0", offsets[5])
    flips = integer(6, "flip_count")
    return SpyMessage(seq, float(fields[2]), fields[3], fields[4], decay_ms, flips)


def iter_messages(chunks: Iterable[bytes]) -> Iterator[SpyMessage]:
    """Reassemble newline-delimited records from arbitrary byte chunks."""
    buf = b""
    consumed = 0
    for chunk in chunks:
        buf += chunk
        while True:
            nl = buf.find(b"\n")
            if nl < 0:
                if len(buf) > MAX_LINE:
                    raise ProtocolError(f"line longer than {MAX_LINE} bytes", consumed + MAX_LINE)
                break
            line, buf = buf[: nl + 1], buf[nl + 1 :]
            yield decode_message(line, consumed)
            consumed += len(line)
    if buf:
        raise ProtocolError("stream ended inside a record", consumed + len(buf))
