"""Logging estruturado JSONL para rastreabilidade dos passos de otimização."""

import json
import os
from datetime import datetime, timezone
from typing import Optional


class AuditLogger:
    """Logger JSONL append-only, uma linha por passo do otimizador."""

    def __init__(self, output_path: str = "outputs/audit_log.jsonl"):
        directory = os.path.dirname(output_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self._path = output_path
        self._file = open(output_path, "a", encoding="utf-8")

    @property
    def path(self) -> str:
        return self._path

    def log(
        self,
        step: int,
        epoch: int,
        loss: float,
        loss_sq: float,
        loss_log: float,
        grad_norm: float,
        clipped: bool,
        latency_ms: float,
        extra: Optional[dict] = None,
    ) -> None:
        record = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "step": step,
            "epoch": epoch,
            "loss": loss,
            "loss_sq": loss_sq,
            "loss_log": loss_log,
            "grad_norm": grad_norm,
            "clipped": clipped,
            "latency_ms": round(latency_ms, 2),
        }
        if extra:
            record.update(extra)
        self._file.write(json.dumps(record, ensure_ascii=False) + "\n")
        self._file.flush()

    def close(self) -> None:
        if self._file and not self._file.closed:
            self._file.flush()
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
        return False
