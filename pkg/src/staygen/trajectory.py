"""Stay trajectories, home/work inference, and tokenized training sequences.

A stay trajectory covers the study window with one token per hour: the
area where the device spent the most attributed minutes, or the null
area when no dwell time fell in the hour. Trajectories are labeled by
inferred home (most-occupied 20:00-09:00 area) and work (most-occupied
remaining-hours area), then prefixed with those labels and mapped to
dense integer tokens for model training.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import NoHomeInferableError, NoWorkInferableError, VocabError
from .geo import NULL_AREA, AreaMap, area_of_point
from .ingest import Panel

log = logging.getLogger(__name__)

NIGHT_START_HOUR = 20
NIGHT_END_HOUR = 9

NULL_TOKEN = 0


@dataclass(frozen=True)
class StayTrajectory:
    device_id: str
    tokens: tuple  # area ids (or NULL_AREA), one per window hour


@dataclass(frozen=True)
class LabeledTrajectory:
    """A stay trajectory together with its home/work label pair."""

    device_id: str
    home: str
    work: str
    tokens: tuple


class TokenVocab:
    """Bijection between area ids and dense integer tokens.

    Token 0 is reserved for the null area; real areas get tokens
    1..V-1 in sorted area-id order.
    """

    def __init__(self, area_ids: Iterable[str]):
        ids = sorted(set(area_ids))
        if NULL_AREA in ids:
            ids.remove(NULL_AREA)
        self._areas = [NULL_AREA] + ids
        self._index = {a: i for i, a in enumerate(self._areas)}

    @property
    def size(self) -> int:
        return len(self._areas)

    @property
    def null_token(self) -> int:
        return NULL_TOKEN

    def encode(self, area: str) -> int:
        try:
            return self._index[area]
        except KeyError:
            raise VocabError(f"area {area!r} not in vocabulary") from None

    def decode(self, token: int) -> str:
        if not 0 <= token < len(self._areas):
            raise VocabError(f"token {token} out of range")
        return self._areas[token]

    def area_ids(self) -> list[str]:
        """Non-null area ids in token order."""
        return self._areas[1:]

    def to_json(self) -> str:
        return json.dumps({"null_area": NULL_AREA, "areas": self._areas[1:]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TokenVocab":
        return cls(json.loads(text)["areas"])


def build_stay_trajectories(panel: Panel, amap: AreaMap) -> list[StayTrajectory]:
    """Build one fixed-length trajectory per panel device.

    Each record's [timestamp, timestamp + dwell] span is intersected
    with every hour it overlaps; the hour's token is the area with the
    most attributed minutes (ties to the smaller area id), or the null
    area when nothing was attributed.
    """
    n_hours = panel.n_hours
    start = panel.window_start
    out = []
    for device, records in panel.devices.items():
        minutes: list[dict[str, float]] = [dict() for _ in range(n_hours)]
        for rec in records:
            area = area_of_point(rec.lat, rec.lon, amap)
            t0 = (rec.timestamp - start).total_seconds() / 60.0
            t1 = t0 + rec.dwell_minutes
            h = max(int(t0 // 60), 0)
            while h < n_hours and h * 60 < t1:
                overlap = min(t1, (h + 1) * 60) - max(t0, h * 60)
                if overlap > 0:
                    acc = minutes[h]
                    acc[area] = acc.get(area, 0.0) + overlap
                h += 1
        tokens = []
        for acc in minutes:
            if not acc:
                tokens.append(NULL_AREA)
            else:
                # max minutes, ties to the smaller area id
                tokens.append(min(acc, key=lambda a: (-acc[a], a)))
        out.append(StayTrajectory(device, tuple(tokens)))
    return out


def _hour_of_day(index: int, panel_start_hour: int = 0) -> int:
    return (panel_start_hour + index) % 24


def _argmax_area(counts: dict[str, int]) -> str:
    return min(counts, key=lambda a: (-counts[a], a))


def infer_home(traj: StayTrajectory, window_start_hour: int = 0) -> str:
    """Area most occupied during nighttime hours (>= 20:00 or < 09:00)."""
    counts: dict[str, int] = {}
    for i, area in enumerate(traj.tokens):
        h = _hour_of_day(i, window_start_hour)
        if area != NULL_AREA and (h >= NIGHT_START_HOUR or h < NIGHT_END_HOUR):
            counts[area] = counts.get(area, 0) + 1
    if not counts:
        raise NoHomeInferableError(f"{traj.device_id}: no nighttime data")
    return _argmax_area(counts)


def infer_work(traj: StayTrajectory, window_start_hour: int = 0) -> str:
    """Area most occupied during the remaining (09:00-20:00) hours."""
    counts: dict[str, int] = {}
    for i, area in enumerate(traj.tokens):
        h = _hour_of_day(i, window_start_hour)
        if area != NULL_AREA and NIGHT_END_HOUR <= h < NIGHT_START_HOUR:
            counts[area] = counts.get(area, 0) + 1
    if not counts:
        raise NoWorkInferableError(f"{traj.device_id}: no daytime data")
    return _argmax_area(counts)


def label_trajectories(trajs: Iterable[StayTrajectory]) -> tuple[list[LabeledTrajectory], int]:
    """Attach inferred home/work labels, dropping (and counting) devices
    where either inference fails."""
    labeled = []
    dropped = 0
    for traj in trajs:
        try:
            home = infer_home(traj)
            work = infer_work(traj)
        except (NoHomeInferableError, NoWorkInferableError):
            dropped += 1
            continue
        labeled.append(LabeledTrajectory(traj.device_id, home, work, traj.tokens))
    if dropped:
        log.info("label_trajectories: dropped %d devices without inferable labels", dropped)
    return labeled, dropped


def make_training_sequences(
    trajs: Iterable[StayTrajectory], vocab: TokenVocab
) -> tuple[np.ndarray, int]:
    """Tokenized prefixed sequences [home, work, t1..tT] as an (N, T+2) array.

    Devices without inferable home or work are dropped; the count of
    dropped devices is returned alongside the array.
    """
    labeled, dropped = label_trajectories(trajs)
    return encode_labeled(labeled, vocab), dropped


def encode_labeled(sample: Sequence[LabeledTrajectory], vocab: TokenVocab) -> np.ndarray:
    if not sample:
        return np.zeros((0, 2), dtype=np.int32)
    t_len = len(sample[0].tokens)
    out = np.empty((len(sample), t_len + 2), dtype=np.int32)
    for i, lt in enumerate(sample):
        out[i, 0] = vocab.encode(lt.home)
        out[i, 1] = vocab.encode(lt.work)
        for j, area in enumerate(lt.tokens):
            out[i, 2 + j] = vocab.encode(area)
    return out


def decode_labeled(
    rows: Iterable[tuple[str, int, int, np.ndarray]], vocab: TokenVocab
) -> list[LabeledTrajectory]:
    """Inverse of encode_labeled given (device_id, home, work, body) rows."""
    out = []
    for device_id, home, work, body in rows:
        out.append(
            LabeledTrajectory(
                device_id,
                vocab.decode(int(home)),
                vocab.decode(int(work)),
                tuple(vocab.decode(int(t)) for t in body),
            )
        )
    return out


def save_labeled_csv(
    sample: Sequence[LabeledTrajectory], vocab: TokenVocab, dest: Union[str, Path]
) -> None:
    """Write "device_id,home,work,t1..tT" rows with integer tokens."""
    t_len = len(sample[0].tokens) if sample else 0
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_id", "home", "work"] + [f"t{i + 1}" for i in range(t_len)])
        for lt in sample:
            writer.writerow(
                [lt.device_id, vocab.encode(lt.home), vocab.encode(lt.work)]
                + [vocab.encode(a) for a in lt.tokens]
            )


def load_labeled_csv(path: Union[str, Path], vocab: TokenVocab) -> list[LabeledTrajectory]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        for row in reader:
            out.append(
                LabeledTrajectory(
                    row[0],
                    vocab.decode(int(row[1])),
                    vocab.decode(int(row[2])),
                    tuple(vocab.decode(int(t)) for t in row[3:]),
                )
            )
    return out
