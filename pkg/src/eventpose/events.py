"""Event stream model, windowed time surfaces, and event file I/O.

An event is a single asynchronous brightness-change sample (x, y, t, p) with
integer-microsecond timestamps and polarity +1/-1. Streams are numpy
structured arrays with EVENT_DTYPE, sorted by t (non-decreasing).

Time surfaces here are windowed per-pixel event *counts* per polarity, plus a
density map (mass-preserving Gaussian blur of the combined counts).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])

# On-disk binary record: u16 x, u16 y, i8 p, 3 pad bytes, u64 t (little endian).
_RECORD_DTYPE = np.dtype({
    "names": ["x", "y", "p", "t"],
    "formats": ["<u2", "<u2", "<i1", "<u8"],
    "offsets": [0, 2, 4, 8],
    "itemsize": 16,
})
_HEADER_DTYPE = np.dtype([("magic", "S4"), ("width", "<u2"), ("height", "<u2"), ("count", "<u8")])
EVENT_FILE_MAGIC = b"EVT1"


def make_events(t, x, y, p) -> np.ndarray:
    """Pack parallel columns into an EVENT_DTYPE array (validated)."""
    ev = np.zeros(len(np.atleast_1d(np.asarray(t))), dtype=EVENT_DTYPE)
    ev["t"] = t
    ev["x"] = x
    ev["y"] = y
    ev["p"] = p
    check_events(ev)
    return ev


def check_events(events: np.ndarray, width: int | None = None, height: int | None = None) -> None:
    """Validate polarity, ordering, and (optionally) sensor bounds."""
    if events.dtype != EVENT_DTYPE:
        raise ValueError(f"expected EVENT_DTYPE array, got dtype {events.dtype}")
    if events.size == 0:
        return
    bad = np.flatnonzero(np.abs(events["p"].astype(np.int16)) != 1)
    if bad.size:
        raise ValueError(f"invalid polarity {events['p'][bad[0]]} at record {bad[0]}")
    if np.any(np.diff(events["t"].astype(np.int64)) < 0):
        raise ValueError("unordered stream")
    if width is not None and np.any(events["x"] >= width):
        raise ValueError("event x outside sensor bounds")
    if height is not None and np.any(events["y"] >= height):
        raise ValueError("event y outside sensor bounds")


@dataclass(frozen=True)
class ContrastModel:
    """Log-intensity contrast threshold of an idealized event pixel."""

    threshold: float = 0.25

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("contrast threshold must be positive")


@dataclass(frozen=True)
class TimeSurfacePair:
    """Per-polarity count rasters and blurred density for one time window.

    ``origin`` is the (x0, y0) pixel offset of the rasters in full sensor
    coordinates (may be negative for zero-padded local slices).
    """

    t_pos: np.ndarray
    t_neg: np.ndarray
    density: np.ndarray
    window: tuple[int, int]
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if not (self.t_pos.shape == self.t_neg.shape == self.density.shape):
            raise ValueError("rasters must share one shape")
        if self.window[1] <= self.window[0]:
            raise ValueError("window end must exceed window start")
        for arr in (self.t_pos, self.t_neg, self.density):
            arr.flags.writeable = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.t_pos.shape

    def total(self) -> np.ndarray:
        return self.t_pos + self.t_neg

    def slice_local(self, center_xy: tuple[int, int], radius: int) -> "TimeSurfacePair":
        """Zero-padded (2*radius+1)^2 view around a pixel, origin adjusted."""
        if radius < 1:
            raise ValueError("radius must be >= 1")
        cx, cy = int(round(center_xy[0])), int(round(center_xy[1]))
        h, w = self.shape
        size = 2 * radius + 1

        def cut(arr):
            out = np.zeros((size, size), dtype=arr.dtype)
            x0, x1 = cx - radius, cx + radius + 1
            y0, y1 = cy - radius, cy + radius + 1
            sx0, sy0 = max(x0, 0), max(y0, 0)
            sx1, sy1 = min(x1, w), min(y1, h)
            if sx0 < sx1 and sy0 < sy1:
                out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = arr[sy0:sy1, sx0:sx1]
            return out

        return TimeSurfacePair(
            t_pos=cut(self.t_pos),
            t_neg=cut(self.t_neg),
            density=cut(self.density),
            window=self.window,
            origin=(self.origin[0] + cx - radius, self.origin[1] + cy - radius),
        )


def blur_mass_preserving(image: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur (3-sigma truncation) that conserves total mass exactly.

    Plain zero-padded filtering loses the kernel mass that leaks past the
    borders; dividing each input pixel by its in-bounds kernel weight first
    redistributes that mass back inside (renormalized edge kernels).
    """
    if sigma < 0:
        raise ValueError("blur sigma must be non-negative")
    out = np.asarray(image, dtype=float)
    if sigma == 0 or int(3.0 * sigma + 0.5) == 0:
        return out.copy()
    for axis in (0, 1):
        weights = gaussian_filter1d(
            np.ones(out.shape[axis]), sigma, mode="constant", truncate=3.0
        )
        shape = [1, 1]
        shape[axis] = out.shape[axis]
        out = gaussian_filter1d(
            out / weights.reshape(shape), sigma, axis=axis, mode="constant", truncate=3.0
        )
    return out


def build_time_surfaces(
    events: np.ndarray,
    window: tuple[int, int],
    region: tuple[int, int, int, int],
    blur_sigma: float = 2.0,
) -> TimeSurfacePair:
    """Count in-window events per pixel and polarity over a region.

    ``window`` is half-open [t_start, t_end) microseconds; ``region`` is
    (x0, y0, width, height) in sensor pixels. Events must be sorted by t.
    """
    t_start, t_end = int(window[0]), int(window[1])
    x0, y0, rw, rh = (int(v) for v in region)
    if rw < 1 or rh < 1:
        raise ValueError("degenerate region")
    if t_end <= t_start:
        raise ValueError("window end must exceed window start")
    check_events(events)

    ts = events["t"]
    lo = np.searchsorted(ts, t_start, side="left")
    hi = np.searchsorted(ts, t_end, side="left")
    sel = events[lo:hi]
    x = sel["x"].astype(np.int64) - x0
    y = sel["y"].astype(np.int64) - y0
    keep = (x >= 0) & (x < rw) & (y >= 0) & (y < rh)
    x, y, p = x[keep], y[keep], sel["p"][keep]

    t_pos = np.zeros((rh, rw), dtype=np.int64)
    t_neg = np.zeros((rh, rw), dtype=np.int64)
    flat = y * rw + x
    pos_counts = np.bincount(flat[p == 1], minlength=rh * rw)
    neg_counts = np.bincount(flat[p == -1], minlength=rh * rw)
    t_pos += pos_counts.reshape(rh, rw)
    t_neg += neg_counts.reshape(rh, rw)

    density = blur_mass_preserving(t_pos + t_neg, blur_sigma)
    return TimeSurfacePair(
        t_pos=t_pos, t_neg=t_neg, density=density,
        window=(t_start, t_end), origin=(x0, y0),
    )


def write_events(path, events: np.ndarray, width: int, height: int) -> None:
    """Write the binary event file format (16-byte header + 16-byte records)."""
    check_events(events, width, height)
    header = np.zeros(1, dtype=_HEADER_DTYPE)
    header["magic"] = EVENT_FILE_MAGIC
    header["width"] = width
    header["height"] = height
    header["count"] = events.size
    records = np.zeros(events.size, dtype=_RECORD_DTYPE)
    for name in ("x", "y", "p", "t"):
        records[name] = events[name]
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(records.tobytes())


def read_events(path) -> tuple[np.ndarray, tuple[int, int] | None]:
    """Read an event file; returns (events, (width, height) or None for CSV).

    Binary files are recognized by their magic; anything else is parsed as
    the ``t,x,y,p`` CSV variant (which carries no sensor size).
    """
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == EVENT_FILE_MAGIC:
        return _read_events_binary(path)
    return read_events_csv(path), None


def _read_events_binary(path) -> tuple[np.ndarray, tuple[int, int]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER_DTYPE.itemsize:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    header = np.frombuffer(raw[:_HEADER_DTYPE.itemsize], dtype=_HEADER_DTYPE)[0]
    if header["magic"] != EVENT_FILE_MAGIC:
        raise ValueError(f"{path}: bad magic {header['magic']!r}")
    body = raw[_HEADER_DTYPE.itemsize:]
    if len(body) % _RECORD_DTYPE.itemsize:
        offset = _HEADER_DTYPE.itemsize + len(body) - len(body) % _RECORD_DTYPE.itemsize
        raise ValueError(f"{path}: truncated record at byte offset {offset}")
    records = np.frombuffer(body, dtype=_RECORD_DTYPE)
    if records.size != int(header["count"]):
        raise ValueError(
            f"{path}: header promises {int(header['count'])} records, file has {records.size}"
        )
    events = np.zeros(records.size, dtype=EVENT_DTYPE)
    for name in ("x", "y", "p", "t"):
        events[name] = records[name]
    _check_parsed(events, path, header_bytes=_HEADER_DTYPE.itemsize)
    width, height = int(header["width"]), int(header["height"])
    check_events(events, width, height)
    return events, (width, height)


def _check_parsed(events: np.ndarray, path, header_bytes: int) -> None:
    bad = np.flatnonzero(np.abs(events["p"].astype(np.int16)) != 1)
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"{path}: invalid polarity {events['p'][i]} at record {i} "
            f"(byte offset {header_bytes + 16 * i})"
        )
    dt = np.diff(events["t"].astype(np.int64))
    reg = np.flatnonzero(dt < 0)
    if reg.size:
        raise ValueError(f"{path}: unordered stream at record {int(reg[0]) + 1}")


def write_events_csv(path, events: np.ndarray) -> None:
    check_events(events)
    buf = io.StringIO()
    buf.write("t,x,y,p\n")
    for e in events:
        buf.write(f"{int(e['t'])},{int(e['x'])},{int(e['y'])},{int(e['p'])}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_events_csv(path) -> np.ndarray:
    ts, xs, ys, ps = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#") or line.replace(" ", "").startswith("t,"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                t, x, y, p = (int(float(v)) for v in parts)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed record") from None
            if p not in (1, -1):
                raise ValueError(f"{path}: line {lineno}: invalid polarity {p}")
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(p)
    if not ts:
        return np.zeros(0, dtype=EVENT_DTYPE)
    if np.any(np.diff(np.asarray(ts, dtype=np.int64)) < 0):
        raise ValueError(f"{path}: unordered stream")
    return make_events(ts, xs, ys, ps)
