"""
Work queue over screening candidates

Every job runs in a worker thread; a failing job is logged and recorded as
{"status": False, "message": ...} instead of stopping the queue.
"""

from collections import deque
from concurrent.futures import ThreadPoolExecutor
import threading

import config as cfg


class _JobManagement():
    def __init__(self, logger, max_workers=None):
        self.queue = deque()
        self.status = "idle"  # idle or busy
        self.current_jobs = {}
        self.jobs_history = {"success": [], "failed": []}
        self.max_workers = cfg.max_thread_workers if max_workers is None else max_workers
        self.logger = logger
        self._lock = threading.Lock()

    def add_new_jobs(self, jobs):
        """
        jobs: dicts with an "id" and whatever the job function needs
        """
        for job in jobs:
            self.queue.append(job)

    def start_jobs(self, job_function):
        """
        while queue is not empty
            1. Pop every queued job
            2. Run them on the worker pool
            3. Record the job history
        Results come back in queue order.
        """
        jobs = []
        while self.queue:
            jobs.append(self.queue.popleft())
        if not jobs:
            return []

        self.status = "busy"
        with ThreadPoolExecutor(max_workers=self.max_workers, thread_name_prefix="job") as executor:
            results = list(executor.map(lambda job: self.start_job(job, job_function), jobs))
        self.status = "idle"
        return results

    def start_job(self, job, job_function):
        _id = job.get("id")
        with self._lock:
            self.current_jobs[_id] = job.get("stage", "running")
        try:
            self.logger.debug(f"start_job() - job {_id}")
            result = job_function(job)
            result.setdefault("status", True)
        except Exception as e:
            self.logger.exception(f"Error in job manager start_job() for job {_id}: {str(e)}")
            result = {"status": False, "message": str(e)}
        result["id"] = _id
        self.record_job_history(job, result)
        with self._lock:
            self.current_jobs.pop(_id, None)
        return result

    def record_job_history(self, job, result):
        with self._lock:
            if result.get("status"):
                self.jobs_history["success"].append(job.get("id"))
            else:
                self.jobs_history["failed"].append({"id": job.get("id"), "message": result.get("message")})
        return result

    def get_status_summary(self):
        with self._lock:
            return {
                "status": self.status,
                "running": sorted(str(x) for x in self.current_jobs),
                "queue_length": len(self.queue),
                "success": len(self.jobs_history["success"]),
                "failed": len(self.jobs_history["failed"]),
            }
