import threading
from datetime import datetime, timezone
from typing import Dict, Optional

status_types = ["pending", "running", "completed", "nonconverged", "failed"]
finished_types = ("completed", "nonconverged", "failed")

# oldest finished jobs are dropped beyond this many; pending and running jobs are never dropped
MAX_FINISHED_JOBS = 1000

_jobs: Dict[str, dict] = {}
_lock = threading.Lock()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _evict_finished():
    finished = [job_id for job_id, job in _jobs.items() if job["status"] in finished_types]
    for job_id in finished[:max(0, len(finished) - MAX_FINISHED_JOBS)]:
        del _jobs[job_id]


def add_job(job_id: str, status: str, kind: str, request: Optional[dict] = None) -> dict:
    """Add a new job record to the in-process job registry."""

    if (status not in status_types):
        raise ValueError(f"Invalid status type: {status}")

    data = {
        "job_id": job_id,
        "status": status,
        "kind": kind,
        "request": request or {},
        "result": None,
        "error": None,
        "created": _now(),
        "updated": _now(),
    }

    with _lock:
        if job_id in _jobs:
            raise RuntimeError(f"Failed to add job: {job_id} already exists")
        _jobs[job_id] = data
        _evict_finished()

    print(f"Job: {job_id} added with status: {status}")

    return dict(data)


def update_job_status(job_id: str, status: str, result: Optional[dict] = None,
                      error: Optional[str] = None) -> dict:
    """Update the status of an existing job, optionally attaching its result or error."""
    if (status not in status_types):
        raise ValueError(f"Invalid status type: {status}")
    with _lock:
        if job_id not in _jobs:
            raise RuntimeError(f"Failed to update job status: unknown job {job_id}")
        job = _jobs[job_id]
        if status in finished_types:
            # re-insert so dict order is finishing order
            _jobs[job_id] = _jobs.pop(job_id)
        job["status"] = status
        job["updated"] = _now()
        if result is not None:
            job["result"] = result
        if error is not None:
            job["error"] = error
        data = dict(job)
        _evict_finished()

    print(f"Job: {job_id} updated with status: {status}")
    return data


def get_job(job_id: str) -> Optional[dict]:
    with _lock:
        job = _jobs.get(job_id)
        return None if job is None else dict(job)


def clear_jobs():
    with _lock:
        _jobs.clear()
