"""Nearest-timestamp pairing of the fast pose stream with the slow depth stream."""

from __future__ import annotations

import bisect
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .depth import DepthImage
from .errors import UnsortedStream
from .geometry import Pose

DEFAULT_MAX_OFFSET_US = 10_000


@dataclass(frozen=True, eq=False)
class FrameSet:
    depth: DepthImage
    pose: Pose
    time_offset: int  # pose.timestamp - depth.timestamp, microseconds

    @property
    def timestamp(self) -> int:
        return self.depth.timestamp


@dataclass
class StreamStats:
    paired: int = 0
    dropped: int = 0
    max_abs_offset: int = 0
    mean_abs_offset: float = 0.0

    @classmethod
    def from_offsets(cls, offsets: Sequence[int], dropped: int) -> StreamStats:
        a = np.abs(np.asarray(offsets, dtype=np.int64))
        return cls(len(a), dropped, int(a.max()) if len(a) else 0, float(a.mean()) if len(a) else 0.0)


def _check_sorted(stamps: Sequence[int], name: str) -> None:
    for i in range(1, len(stamps)):
        if stamps[i] < stamps[i - 1]:
            raise UnsortedStream(f"{name} stream not sorted at index {i}: {stamps[i - 1]} > {stamps[i]}")


def _nearest(pose_ts: Sequence[int], t: int) -> int | None:
    """Index of the pose closest to ``t``; ties go to the earlier pose."""
    if not pose_ts:
        return None
    j = bisect.bisect_left(pose_ts, t)
    if j == 0:
        return 0
    if j == len(pose_ts):
        return j - 1
    return j - 1 if t - pose_ts[j - 1] <= pose_ts[j] - t else j


def pair_streams(poses: Sequence[Pose], depths: Sequence[DepthImage],
                 max_offset: int = DEFAULT_MAX_OFFSET_US) -> tuple[list[FrameSet], StreamStats]:
    pose_ts = [p.timestamp for p in poses]
    _check_sorted(pose_ts, "pose")
    _check_sorted([d.timestamp for d in depths], "depth")
    out: list[FrameSet] = []
    dropped = 0
    for d in depths:
        j = _nearest(pose_ts, d.timestamp)
        if j is None or abs(pose_ts[j] - d.timestamp) > max_offset:
            dropped += 1
            continue
        out.append(FrameSet(d, poses[j], pose_ts[j] - d.timestamp))
    return out, StreamStats.from_offsets([f.time_offset for f in out], dropped)


@dataclass
class OnlinePairer:
    """Incremental pairing fed by a pose producer and a depth producer.

    Each depth frame is resolved as soon as the first pose at or after its
    timestamp arrives, or when :meth:`close` is called.  Calls are serialised
    on an internal lock, so producers may live on separate threads; the
    emitted sequence matches :func:`pair_streams` on the same data whatever
    the interleaving.
    """

    max_offset: int = DEFAULT_MAX_OFFSET_US
    _pose_ts: list = field(default_factory=list, repr=False)
    _poses: list = field(default_factory=list, repr=False)
    _pending: list = field(default_factory=list, repr=False)
    _out: list = field(default_factory=list, repr=False)
    _dropped: int = 0
    _last_depth_ts: int = -1
    _closed: bool = False
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def push_pose(self, pose: Pose) -> list[FrameSet]:
        with self._lock:
            if self._pose_ts and pose.timestamp < self._pose_ts[-1]:
                raise UnsortedStream(f"pose {pose.timestamp} arrived after {self._pose_ts[-1]}")
            self._pose_ts.append(pose.timestamp)
            self._poses.append(pose)
            return self._drain(final=False)

    def push_depth(self, depth: DepthImage) -> list[FrameSet]:
        with self._lock:
            if depth.timestamp < self._last_depth_ts:
                raise UnsortedStream(f"depth {depth.timestamp} arrived after {self._last_depth_ts}")
            self._last_depth_ts = depth.timestamp
            self._pending.append(depth)
            return self._drain(final=False)

    def close(self) -> list[FrameSet]:
        with self._lock:
            self._closed = True
            return self._drain(final=True)

    @property
    def framesets(self) -> list[FrameSet]:
        return list(self._out)

    @property
    def stats(self) -> StreamStats:
        return StreamStats.from_offsets([f.time_offset for f in self._out], self._dropped)

    def _drain(self, final: bool) -> list[FrameSet]:
        emitted = []
        while self._pending:
            d = self._pending[0]
            if not final and (not self._pose_ts or self._pose_ts[-1] < d.timestamp):
                break
            self._pending.pop(0)
            j = _nearest(self._pose_ts, d.timestamp)
            if j is None or abs(self._pose_ts[j] - d.timestamp) > self.max_offset:
                self._dropped += 1
                continue
            fs = FrameSet(d, self._poses[j], self._pose_ts[j] - d.timestamp)
            self._out.append(fs)
            emitted.append(fs)
        self._prune()
        return emitted

    def _prune(self) -> None:
        # Depth timestamps are monotone, so nothing older than the pose just
        # before the oldest still-relevant depth time can win a future match.
        horizon = self._pending[0].timestamp if self._pending else self._last_depth_ts
        if horizon < 0:
            return
        keep_from = max(0, bisect.bisect_left(self._pose_ts, horizon) - 1)
        if keep_from:
            del self._pose_ts[:keep_from]
            del self._poses[:keep_from]


def pair_streams_online(events: Iterable[tuple[str, object]],
                        max_offset: int = DEFAULT_MAX_OFFSET_US) -> list[FrameSet]:
    """Feed ``("pose", Pose)`` / ``("depth", DepthImage)`` events through an :class:`OnlinePairer`."""
    pairer = OnlinePairer(max_offset=max_offset)
    for kind, item in events:
        if kind == "pose":
            pairer.push_pose(item)
        elif kind == "depth":
            pairer.push_depth(item)
        else:
            raise ValueError(f"unknown event kind {kind!r}")
    pairer.close()
    return pairer.framesets


def select_keyframes(framesets: Sequence[FrameSet], interval: float) -> list[FrameSet]:
    """Greedy selection: first frame, then the earliest frame ``interval`` seconds after the last kept."""
    if interval < 0:
        raise ValueError("interval must be non-negative")
    step = int(round(interval * 1e6))
    kept: list[FrameSet] = []
    for fs in framesets:
        if not kept or fs.timestamp - kept[-1].timestamp >= step:
            kept.append(fs)
    return kept
