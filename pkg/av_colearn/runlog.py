import json
import threading
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

from .colearn import LossBreakdown
from .exceptions import ContractViolation
from .logger import get_logger
from .utils import read_jsonl

logger = get_logger(__name__)

SCHEMA_VERSION = 1


class RunLog:
    """Append-only JSON-lines training log with a monotone step counter.

    Reopening an existing log continues its counter, so a resumed stage logs
    without gaps. A stage retrained from scratch calls :meth:`discard_from` first.
    """

    def __init__(self, path, seed: int = 0, config_hash: str = ""):
        self.path = Path(path)
        self.seed = seed
        self.config_hash = config_hash
        self._lock = threading.Lock()
        self._started = time.monotonic()
        self._step = 0
        if self.path.is_file():
            steps = [r["step"] for r in read_jsonl(self.path) if r.get("kind") == "step"]
            self._step = max(steps, default=0)
            logger.debug(f"Continuing run log {self.path} after step {self._step}")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    @property
    def step(self) -> int:
        return self._step

    def _append(self, record: Dict[str, Any]) -> None:
        record = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "wall": round(time.monotonic() - self._started, 3),
            **record,
        }
        with self.path.open("a", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(record, sort_keys=True))
            f.write("\n")

    def log_step(self, losses: LossBreakdown, stage: int, epoch: int, lr: float, step: Optional[int] = None) -> int:
        with self._lock:
            step = self._step + 1 if step is None else step
            if step <= self._step:
                raise ContractViolation(f"run log step {step} does not follow {self._step}")
            self._step = step
            self._append({
                "kind": "step",
                "step": step,
                "stage": stage,
                "epoch": epoch,
                "lr": lr,
                "objective": losses.objective,
                "losses": losses.as_dict(),
            })
            return step

    def log_epoch(self, stage: int, epoch: int, losses: Dict[str, Optional[float]], metrics: Dict[str, Any]) -> None:
        with self._lock:
            self._append({
                "kind": "epoch",
                "step": self._step,
                "stage": stage,
                "epoch": epoch,
                "losses": losses,
                "metrics": metrics,
            })

    def log_event(self, kind: str, **fields) -> None:
        with self._lock:
            self._append({"kind": kind, "step": self._step, **fields})

    def discard_from(self, stage: int) -> int:
        """Drop every record of ``stage`` and later stages and rewind the counter.

        A stage that is retrained from scratch logs the same steps again.
        """
        with self._lock:
            if not self.path.is_file():
                return self._step
            kept = [r for r in read_jsonl(self.path) if r.get("stage", 0) < stage]
            dropped = self._step
            self._step = max((r["step"] for r in kept if r.get("kind") == "step"), default=0)
            scratch = self.path.with_suffix(".jsonl.tmp")
            with scratch.open("w", encoding="utf-8", newline="\n") as f:
                for record in kept:
                    f.write(json.dumps(record, sort_keys=True))
                    f.write("\n")
            scratch.replace(self.path)
            if dropped != self._step:
                logger.info(f"Rewound run log {self.path} from step {dropped} to {self._step}")
            return self._step

    def records(self, kind: Optional[str] = None) -> List[Dict[str, Any]]:
        if not self.path.is_file():
            return []
        return [r for r in read_jsonl(self.path) if kind is None or r.get("kind") == kind]


def mean_losses(breakdowns: List[Dict[str, Optional[float]]]) -> Dict[str, Optional[float]]:
    """Per-term mean over step records; terms absent from every step stay ``None``."""
    result = {}
    for name in LossBreakdown.TERMS:
        values = [b[name] for b in breakdowns if b.get(name) is not None]
        result[name] = sum(values) / len(values) if values else None
    return result
