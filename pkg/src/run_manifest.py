"""Metadados de execução: comando, config resolvida, seeds, artefatos e decisões fixas."""

import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from src import __version__
from src.errors import ManifestMissing
from src.utils import atomic_write_text

logger = logging.getLogger(__name__)

# Escolhas de ordem e constantes que afetam os resultados numéricos.
DECISION_LEDGER = {
    "weight_decay": "acoplado (g <- g + lambda*theta)",
    "update_order": "weight decay -> clipping global -> Adam",
    "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-7},
    "dropout_at_inference": True,
    "force_mask": "Tukey 2D alpha=0.1 na ingestão",
    "target_transform": "ln(max(1, x)) em entrada e força",
    "interval": "log-normal com momentos casados",
    "mae_units": "força (não log)",
}


@dataclass
class RunManifest:
    """`config` é a config carregada inteira (usada pelo rerun); `resolved` guarda os valores efetivos do passo."""

    command: str
    argv: list[str]
    config: dict
    resolved: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_at: Optional[str] = None
    wall_clock_s: Optional[float] = None
    tool_version: str = __version__
    python: str = field(default_factory=lambda: sys.version.split()[0])
    platform: str = field(default_factory=platform.platform)
    decisions: dict = field(default_factory=lambda: dict(DECISION_LEDGER))

    def finish(self, wall_clock_s: float) -> None:
        self.finished_at = datetime.now(timezone.utc).isoformat()
        self.wall_clock_s = round(wall_clock_s, 3)

    def default_path(self, runs_dir: str | Path) -> Path:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        return Path(runs_dir) / f"{self.command}-{stamp}.json"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        atomic_write_text(path, json.dumps(asdict(self), indent=2, ensure_ascii=False, default=str))
        logger.info(f"Manifest da execução salvo em {path}")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestMissing(f"Manifest de execução não encontrado: {path}")
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in raw.items() if k in known})
