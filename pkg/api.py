import uuid
from dataclasses import asdict
from typing import List, Optional

import pandas as pd
from fastapi import BackgroundTasks, FastAPI, HTTPException
from pydantic import BaseModel, Field
from starlette.middleware.cors import CORSMiddleware

from io_utils import jobs
from io_utils.storage import to_jsonable
from pipeline.MetaData import DATASET_COLUMNS, MetaDataset
from pipeline.NUTSSampler import SamplerConfig, fit
from pipeline.Simulator import DEFAULT_HET_SD, SimConfig, simulate_meta
from pipeline.Univariate import analyze_univariate

app = FastAPI(title="SparseMeta")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class EstimateRow(BaseModel):
    study_id: str
    variate_id: str
    estimate: float
    std_err: float


class DatasetRequest(BaseModel):
    rows: List[EstimateRow] = Field(..., min_length=1)

    def dataset(self) -> MetaDataset:
        frame = pd.DataFrame([r.model_dump() for r in self.rows], columns=DATASET_COLUMNS)
        return MetaDataset.from_frame(frame)


class FitRequest(DatasetRequest):
    q: Optional[int] = None
    q_max: int = 10
    level: float = 0.95
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    seed: int = 20201
    projection_seed: Optional[int] = None


class UnivariateRequest(DatasetRequest):
    level: float = 0.95


class SimulateRequest(BaseModel):
    n_meta: int = Field(1, ge=1, le=100)
    studies_min: int = 4
    studies_max: int = 15
    units_min: int = 50
    units_max: int = 4000
    p_min: int = 5
    p_max: int = 25
    density: float = 0.24
    het_sd: float = Field(DEFAULT_HET_SD, ge=0.0)
    seed: int = 20201


def _records(frame: pd.DataFrame) -> list:
    return to_jsonable(frame.to_dict(orient="records"))


def _fit_job(job_id: str, request: FitRequest):
    """Background job that fits the low-dimensional model and stores the posterior summary."""
    try:
        jobs.update_job_status(job_id=job_id, status="running")
        config = SamplerConfig(chains=request.chains, warmup=request.warmup,
                               samples=request.samples, seed=request.seed)
        result = fit(request.dataset(), q=request.q, config=config, level=request.level,
                     q_max=request.q_max, projection_seed=request.projection_seed)
        payload = {
            "q": result.q,
            "converged": result.converged,
            "posterior": _records(result.summary.table),
            "covariance": to_jsonable(result.covariance()),
            "diagnostics": to_jsonable(result.diagnostics),
        }
        status = "completed" if result.converged else "nonconverged"
        jobs.update_job_status(job_id=job_id, status=status, result=payload)
    except Exception as e:
        jobs.update_job_status(job_id=job_id, status="failed", error=str(e))
        print(f"Error fitting job {job_id}: {e}")


def _univariate_job(job_id: str, request: UnivariateRequest):
    try:
        jobs.update_job_status(job_id=job_id, status="running")
        results = analyze_univariate(request.dataset(), level=request.level)
        jobs.update_job_status(job_id=job_id, status="completed", result={"results": _records(results)})
    except Exception as e:
        jobs.update_job_status(job_id=job_id, status="failed", error=str(e))
        print(f"Error in univariate job {job_id}: {e}")


def _simulate_job(job_id: str, request: SimulateRequest):
    try:
        jobs.update_job_status(job_id=job_id, status="running")
        config = SimConfig(
            n_meta=request.n_meta,
            studies_range=(request.studies_min, request.studies_max),
            units_range=(request.units_min, request.units_max),
            p_range=(request.p_min, request.p_max),
            density=request.density,
            het_sd=request.het_sd,
            seed=request.seed,
        ).validate()
        replicates = []
        for index in range(config.n_meta):
            dataset, truth = simulate_meta(config, index)
            replicates.append({"rows": _records(dataset.to_frame()), "truth": to_jsonable(truth.to_dict())})
        jobs.update_job_status(job_id=job_id, status="completed",
                               result={"config": to_jsonable(asdict(config)), "replicates": replicates})
    except Exception as e:
        jobs.update_job_status(job_id=job_id, status="failed", error=str(e))
        print(f"Error in simulation job {job_id}: {e}")


def _start(kind: str, request: BaseModel, task, background_tasks: BackgroundTasks) -> dict:
    job_id = str(uuid.uuid4())
    jobs.add_job(job_id=job_id, status="pending", kind=kind, request=request.model_dump())
    background_tasks.add_task(task, job_id, request)
    return {
        "jobId": job_id,
        "status": "pending",
        "message": f"{kind} started. Poll /jobs/{job_id} for the result.",
    }


@app.post("/fit")
async def fit_dataset(request: FitRequest, background_tasks: BackgroundTasks):
    """
    Kick off a multivariate fit.

    The request returns immediately while sampling runs in a background task.
    """
    return _start("fit", request, _fit_job, background_tasks)


@app.post("/univariate")
async def univariate(request: UnivariateRequest, background_tasks: BackgroundTasks):
    return _start("univariate", request, _univariate_job, background_tasks)


@app.post("/simulate")
async def simulate(request: SimulateRequest, background_tasks: BackgroundTasks):
    return _start("simulate", request, _simulate_job, background_tasks)


@app.get("/jobs/{job_id}")
async def job_status(job_id: str):
    job = jobs.get_job(job_id)
    if job is None:
        raise HTTPException(status_code=404, detail=f"Unknown job: {job_id}")
    return job


@app.get("/health")
async def health():
    return {"status": "ok"}


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("api:app", host="0.0.0.0", port=8000, reload=True)
