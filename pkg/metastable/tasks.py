"""
Work pool for experiment plans.
Sweep points run in worker processes when WORKERS > 1, in-process otherwise.
"""
import asyncio
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

from metastable.config import Settings
from metastable.services.exceptions import ServiceError
from metastable.utils.sexy_logger import get_logger


logger = get_logger(__name__)


def execute_point(args: Tuple) -> Dict:
    """
    Runs one plan point and never raises: failures come back as records
    with the exit code of the error.
    """
    from metastable.services.harness_service import run_point

    try:
        return {"ok": True, "result": run_point(*args)}
    except ServiceError as e:
        logger.error(f"punto fallido: {e}")
        return {"ok": False, "error": str(e), "error_type": type(e).__name__, "exit_code": e.exit_code}


class SweepTaskManager:
    """
    Manages the process pool for plan sweeps.
    Results are returned in submission order regardless of completion order.
    """

    def __init__(self, workers: Optional[int] = None):
        self.running = False
        self.settings = Settings()
        self.workers = workers or self.settings.WORKERS
        self._pool: Optional[ProcessPoolExecutor] = None

    async def start(self):
        """
        Starts the pool (only when more than one worker is configured).
        """
        if self.running:
            logger.warning("Sweep pool is already running.")
            return

        self.running = True
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(max_workers=self.workers)
            logger.startup(f"Pool de {self.workers} procesos iniciado.")

    async def stop(self):
        """
        Stops the pool and waits for running points.
        """
        if not self.running:
            return

        self.running = False
        if self._pool is not None:
            pool, self._pool = self._pool, None
            await asyncio.to_thread(pool.shutdown, True)
            logger.shutdown("Pool de procesos detenido.")

    async def run(self, points: Sequence[Tuple]) -> List[Dict]:
        """Execute every point; one record per point, in order."""
        if not self.running:
            raise RuntimeError("SweepTaskManager.run called before start()")
        if self._pool is None:
            return [execute_point(p) for p in points]

        loop = asyncio.get_running_loop()
        futures = [loop.run_in_executor(self._pool, execute_point, p) for p in points]
        return list(await asyncio.gather(*futures))
