"""Per-track rasterized history masks: decayed update, ego-motion warp, pruning."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .geometry import RasterMask, Se2Pose, Window, grid_shape, warp_grid


@dataclass
class MemoryEntry:
    mask: np.ndarray  # [H, W] in [0, 1]
    cls: int
    last_update_frame: int


def _grid(mask) -> np.ndarray:
    return np.asarray(mask.grid if isinstance(mask, RasterMask) else mask, dtype=np.float64)


class HistoryMapMemory:
    def __init__(self, window: Window, resolution: float):
        self.window = Window(*window)
        self.resolution = resolution
        self.shape = grid_shape(self.window, resolution)
        self.entries: dict[int, MemoryEntry] = {}

    def __contains__(self, track_id: int) -> bool:
        return track_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> set[int]:
        return set(self.entries)

    def _check(self, grid: np.ndarray, score: float) -> None:
        if grid.shape != self.shape:
            raise ContractError(f"mask shape {grid.shape} != memory grid {self.shape}")
        if not 0.0 <= score <= 1.0:
            raise ContractError(f"score {score} outside [0, 1]")

    def init_entry(self, track_id: int, pred_mask, score: float, cls: int = 0, frame: int = 0) -> None:
        """New entry holding ``pred_mask * score``."""
        if track_id in self.entries:
            raise ContractError(f"track {track_id} already has a memory entry")
        grid = _grid(pred_mask)
        self._check(grid, score)
        self.entries[track_id] = MemoryEntry(grid * score, cls, frame)

    def update_entry(self, track_id: int, pred_mask, score: float, beta: float,
                     frame: int | None = None, cls: int | None = None) -> None:
        """``M <- (1 - beta) * M + beta * pred_mask * score``."""
        if track_id not in self.entries:
            raise ContractError(f"track {track_id} has no memory entry")
        if not 0.0 <= beta <= 1.0:
            raise ContractError(f"beta {beta} outside [0, 1]")
        grid = _grid(pred_mask)
        self._check(grid, score)
        e = self.entries[track_id]
        e.mask = (1.0 - beta) * e.mask + beta * (grid * score)
        np.clip(e.mask, 0.0, 1.0, out=e.mask)
        if frame is not None:
            e.last_update_frame = frame
        if cls is not None:
            e.cls = cls

    def warp_memory(self, ego_motion: Se2Pose) -> None:
        """Re-express every mask in the next ego frame.

        ``ego_motion`` is the pose of the next frame in the current one, so a
        destination cell center ``c`` reads the old grid at ``ego_motion(c)``.
        """
        if not self.entries or ego_motion == Se2Pose.identity():
            return
        ids = sorted(self.entries)
        stack = np.stack([self.entries[i].mask for i in ids])
        warped = warp_grid(stack, self.window, self.resolution, ego_motion)
        np.clip(warped, 0.0, 1.0, out=warped)
        for i, g in zip(ids, warped):
            self.entries[i].mask = g

    def prune(self, live_track_ids) -> int:
        live = set(live_track_ids)
        dead = [i for i in self.entries if i not in live]
        for i in dead:
            del self.entries[i]
        return len(dead)

    def dump(self, out_dir: str | Path) -> Path:
        """Write one 8-bit PGM per entry plus ``index.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        h, w = self.shape
        index = {"format": "vecmap-memory-dump", "version": 1, "window": list(self.window),
                 "resolution": self.resolution, "entries": []}
        for tid in sorted(self.entries):
            e = self.entries[tid]
            name = f"track_{tid:05d}.pgm"
            # flip rows so +y is up in image viewers
            pix = np.round(np.clip(e.mask[::-1], 0, 1) * 255).astype(np.uint8)
            (out / name).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
            index["entries"].append({"track_id": tid, "class": e.cls, "last_update_frame": e.last_update_frame,
                                     "file": name})
        path = out / "index.json"
        path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path
