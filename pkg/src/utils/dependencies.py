from typing import List, Optional

from fastapi import HTTPException
from pydantic import BaseModel, Field, ValidationError, model_validator

from src.core.exceptions import NumericalDegeneracyError, SensorSelectError, SpecError
from src.core.logger import get_logger
from src.services.gaussian_model import GaussianModel
from src.services.harness import gen_covariance

logger = get_logger(__name__)


class GeneratedModel(BaseModel):
    n: int = Field(ge=1, le=64)
    seed: int = Field(default=0, ge=0)


class ModelRequest(BaseModel):
    """Either an explicit covariance matrix or a generated one."""

    covariance: Optional[List[List[float]]] = None
    generated: Optional[GeneratedModel] = None

    @model_validator(mode="after")
    def _one_source(self) -> "ModelRequest":
        if (self.covariance is None) == (self.generated is None):
            raise ValueError("give exactly one of 'covariance' or 'generated'")
        return self


def resolve_model(request: ModelRequest) -> GaussianModel:
    if request.generated is not None:
        return gen_covariance(request.generated.n, request.generated.seed)
    return GaussianModel(request.covariance)  # type: ignore[arg-type]


def http_error(e: Exception) -> HTTPException:
    """Map solver errors to status codes: bad input 422, degenerate covariance 409."""
    if isinstance(e, (SpecError, ValidationError)):
        logger.warning(f"rejected request: {e}")
        return HTTPException(status_code=422, detail=str(e))
    if isinstance(e, NumericalDegeneracyError):
        logger.warning(f"degenerate covariance: {e}")
        return HTTPException(status_code=409, detail=str(e))
    if isinstance(e, SensorSelectError):
        logger.error(f"solver error: {e}")
        return HTTPException(status_code=500, detail=str(e))
    logger.exception(f"unexpected error: {e}")
    return HTTPException(status_code=500, detail="internal error")
