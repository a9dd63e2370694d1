import dataclasses
import logging
import re
from contextlib import nullcontext
from pathlib import Path
from typing import ContextManager, Iterable, Optional, Union

import mlflow

from dual_branch_sam import __version__
from dual_branch_sam.config import ModelConfig
from dual_branch_sam.configs.template_config import experiment_name, mlflow_tracking_uri

logger = logging.getLogger(__name__)


def next_run_name(prefix: str, existing: Iterable[str]) -> str:
    """
    ``"<prefix> <n>"`` with ``n`` one past the highest number already used
    under ``prefix``; names that do not follow the pattern are ignored.
    """
    pattern = re.compile(rf"^{re.escape(prefix)} (\d+)$")
    numbers = [int(m.group(1)) for m in map(pattern.match, existing) if m]
    return f"{prefix} {max(numbers, default=0) + 1}"


class MLflowRun:
    """
    Context manager for one tracked command (training, evaluation or an
    ablation sweep).

    Points MLflow at the tracking server, selects the experiment and numbers
    the run after the previous runs of the same kind (``train run 3``). The
    package version is always added to the tags.

    Parameters
    ----------
    run_prefix : str
        Run kind, e.g. ``"train run"``.
    tags : dict, optional
        Extra tags (data directory, checkpoint path).
    tracking_uri : str, optional
        Defaults to ``MLFLOW_TRACKING_URI`` or a local ``./mlruns`` store.
    experiment_name : str, optional
    """

    def __init__(
        self,
        run_prefix: str = f"{experiment_name} run",
        tags: Optional[dict] = None,
        tracking_uri: str = mlflow_tracking_uri,
        experiment_name: str = experiment_name,
    ):
        self.run_prefix = run_prefix
        self.tracking_uri = tracking_uri
        self.experiment_name = experiment_name
        self.tags = {"dual_branch_sam.version": __version__, **(tags or {})}
        self.run = None
        self.run_name = self.setup_experiment()

    def __enter__(self):
        self.run = mlflow.start_run(run_name=self.run_name, tags=self.tags)
        logger.info(f"Started MLflow run: {self.run_name} ({self.tracking_uri})")
        return self.run

    def __exit__(self, exc_type, exc_value, traceback):
        """A run left by an exception is marked failed."""
        status = "FAILED" if exc_type is not None else "FINISHED"
        mlflow.end_run(status=status)
        logger.info(f"Ended MLflow run {self.run_name}: {status}")

    def setup_experiment(self) -> str:
        """
        Select the experiment and pick the next free run name.

        Returns
        -------
        str
        """
        logger.debug(f"Setting up MLflow experiment {self.experiment_name} at {self.tracking_uri}")
        mlflow.set_tracking_uri(self.tracking_uri)
        experiment = mlflow.set_experiment(self.experiment_name)
        runs = mlflow.tracking.MlflowClient().search_runs(experiment_ids=[experiment.experiment_id])
        return next_run_name(self.run_prefix, (run.data.tags.get("mlflow.runName", "") for run in runs))


class RunTracker:
    """
    Thin logging facade used by the training and evaluation loops.

    Does nothing unless ``enabled``; with tracking on, every call goes to the
    active MLflow run.
    """

    def __init__(self, enabled: bool = False):
        self.enabled = enabled

    def child_run(self, name: str) -> ContextManager:
        """
        A nested run under the active one. Members of a sweep log different
        values for the same params, and MLflow never lets a param change
        within a run. A no-op context when tracking is off.
        """
        if not self.enabled:
            return nullcontext()
        logger.debug(f"Starting nested MLflow run {name}")
        return mlflow.start_run(run_name=name, nested=True)

    def log_config(self, config: ModelConfig):
        if self.enabled:
            mlflow.log_params({k: str(v) for k, v in dataclasses.asdict(config).items()})

    def log_step(self, step: int, loss: float, lr: float):
        if self.enabled:
            mlflow.log_metrics({"loss": loss, "lr": lr}, step=step)

    def log_metrics(self, metrics: dict, step: Optional[int] = None):
        if self.enabled:
            mlflow.log_metrics(metrics, step=step)

    def log_artifact(self, path: Union[str, Path], artifact_path: Optional[str] = None):
        if not self.enabled:
            return
        try:
            mlflow.log_artifact(str(path), artifact_path)
        except FileNotFoundError:
            logger.error(f"Artifact {path} not found. Continuing without logging it.")
