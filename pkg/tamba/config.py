from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Union


class Profile(str, Enum):
    DEBUG = "debug"
    BENCHMARK = "benchmark"


class Config:
    """
    Output location and numeric profile of one harness run
    """

    class Paths:
        checkpoint = "checkpoint.ckpt"
        training_log = "training_log.csv"
        report = "report.json"
        predictions = "predictions"
        ablation = "ablation.csv"
        benchmark = "benchmark.csv"
        manifest = "manifest.json"
        scenarios = "scenarios"
        config = "run_config.json"

    def __init__(
        self,
        out_dir: Union[str, Path],
        profile: Union[Profile, str] = Profile.DEBUG,
    ) -> None:
        """
        Parameters
        ----------
        out_dir:
            Directory that receives every file a command writes.
        profile:
            `debug` keeps NaN/Inf checks after every recorded op, `benchmark` drops them.
        """

        self.out_dir = Path(out_dir)
        self.profile = Profile(profile)
        self.paths = self.Paths()

    def path(self, name: str) -> Path:
        return self.out_dir / getattr(self.paths, name)
