"""
Run Logging Module
Per-run loss log (CSV) and event log (JSON lines) with console status lines.
"""

import csv
import json
import os
from typing import Any, Dict, Optional

from ..config.settings import ENABLE_FILE_LOGS, status
from ..core.losses import LossBreakdown, TERMS

LOSS_COLUMNS = ("step",) + TERMS + ("total",)
LOSS_LOG_NAME = "train_log.csv"
EVENT_LOG_NAME = "events.jsonl"


class RunLogger:
    """Run logger writing train_log.csv and events.jsonl under one run directory"""

    def __init__(self, log_dir: Optional[str] = None, run_name: str = "run"):
        self.run_name = run_name
        # Console-only when no directory is given or file logs are disabled
        self.log_dir = log_dir if ENABLE_FILE_LOGS else None
        if self.log_dir:
            try:
                os.makedirs(self.log_dir, exist_ok=True)
            except OSError as e:
                print(f"⚠️ Could not create log directory {self.log_dir}: {e}; logging to console only")
                self.log_dir = None

    @property
    def loss_log_path(self) -> Optional[str]:
        return os.path.join(self.log_dir, LOSS_LOG_NAME) if self.log_dir else None

    @property
    def event_log_path(self) -> Optional[str]:
        return os.path.join(self.log_dir, EVENT_LOG_NAME) if self.log_dir else None

    def log_losses(self, step: int, epoch: int, stage: str, breakdown: LossBreakdown) -> bool:
        """
        Append one row to train_log.csv

        Args:
            step: Global optimisation step
            epoch: Epoch the step belongs to (kept in the event log only)
            stage: Training stage name (kept in the event log only)
            breakdown: Loss values for the step

        Returns:
            bool: True if the row was written
        """
        path = self.loss_log_path
        if path is None:
            return False
        try:
            is_new = not os.path.exists(path)
            with open(path, 'a', newline='', encoding='utf-8') as f:
                writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS)
                if is_new:
                    writer.writeheader()
                writer.writerow({k: (v if k == "step" else f"{v:.6f}") for k, v in breakdown.row(step).items()})
            return True
        except OSError as e:
            print(f"❌ Loss logging failed ({self.run_name}, {stage} epoch {epoch}): {e}")
            return False

    def log_event(self, kind: str, payload: Dict[str, Any]) -> bool:
        """Append a JSON line to events.jsonl; console output follows COORDGROUND_VERBOSE"""
        path = self.event_log_path
        if path is None:
            return False
        try:
            with open(path, 'a', encoding='utf-8') as f:
                f.write(json.dumps({"run": self.run_name, "kind": kind, **payload},
                                   sort_keys=True, ensure_ascii=False) + "\n")
            return True
        except (OSError, TypeError) as e:
            print(f"❌ Event logging failed ({kind}): {e}")
            return False

    def epoch_summary(self, stage: str, epoch: int, means: Dict[str, float]) -> None:
        status(f"🧠 [{self.run_name}] {stage} epoch {epoch}: "
               + ", ".join(f"{k}={v:.4f}" for k, v in means.items()))
        self.log_event("epoch", {"stage": stage, "epoch": epoch, "losses": means})

    def eval_result(self, name: str, report_path: str, acc_at_05: float, n_samples: int, checkpoint_id: str) -> None:
        self.log_event("eval", {"view": name, "report": report_path, "acc_at_05": round(acc_at_05, 4),
                                "n_samples": n_samples, "checkpoint_id": checkpoint_id})
