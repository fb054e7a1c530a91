"""HTTP face of the library.

Long jobs run synchronously in the request; this service is meant for a
single analyst or a small team on a trusted network, where an experiment is
launched and polled by artifact directory.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..errors import AmortexError, ConfigError, DataError, NumericError
from . import ops, schemas

app = FastAPI(
    title="amortex",
    description="Spatio-temporal peaks-over-threshold modeling with amortized "
    "flow-based Gibbs inference",
)

_HTTP_STATUS = {ConfigError: 400, DataError: 400, NumericError: 500}


@app.exception_handler(AmortexError)
async def amortex_error_handler(request: Request, exc: AmortexError):
    status = 500
    for kind, code in _HTTP_STATUS.items():
        if isinstance(exc, kind):
            status = code
            break
    body = schemas.ErrorBody(error=type(exc).__name__, code=exc.exit_code,
                             message=str(exc))
    return JSONResponse(status_code=status, content=body.model_dump())


@app.get("/health", response_model=schemas.HealthResponse)
def health():
    return ops.health()


@app.get("/catalog", response_model=schemas.CatalogResponse)
def catalog():
    return ops.catalog()


@app.post("/simulate", response_model=schemas.SimulateResponse)
def simulate(req: schemas.SimulateRequest):
    return ops.simulate(req)


@app.post("/train", response_model=schemas.TrainResponse)
def train(req: schemas.TrainRequest):
    return ops.train(req)


@app.post("/gibbs", response_model=schemas.GibbsResponse)
def gibbs(req: schemas.GibbsRequest):
    return ops.gibbs(req)


@app.post("/diagnose", response_model=schemas.DiagnoseResponse)
def diagnose(req: schemas.DiagnoseRequest):
    return ops.diagnose(req)


@app.post("/experiment", response_model=schemas.ExperimentResponse)
def experiment(req: schemas.ExperimentRequest):
    return ops.experiment(req)


@app.post("/compare", response_model=schemas.CompareResponse)
def compare(req: schemas.CompareRequest):
    return ops.compare(req)
